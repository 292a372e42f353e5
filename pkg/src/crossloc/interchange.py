"""Loaders and validators for the model-adapter interchange formats.

Feature directory:
    features.json             {format_version, descriptor_dim, global_dim,
                               images: [{image_id, num_keypoints}]}
    arrays/<id>.kpts.f32      N x 2 keypoints (u, v) in pixels, little-endian
    arrays/<id>.desc.f32      N x descriptor_dim local descriptors
    arrays/<id>.scores.f32    N detection scores
    arrays/<id>.global.f32    global descriptor, unit L2 norm

Match directory:
    matches.json              {format_version, pairs: [{image_a, image_b,
                               source, num_matches}]}
    arrays/<a>__<b>.<source>.idx.i32    M x 2 int32 keypoint index pairs
    arrays/<a>__<b>.<source>.conf.f32   M confidences in [0, 1]
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from crossloc.matching import Match, MatchSet

INTERCHANGE_VERSION = 1


class InterchangeError(ValueError):
    pass


@dataclass(frozen=True)
class ImageFeatures:
    image_id: str
    keypoints: np.ndarray  # (N, 2) float32
    descriptors: np.ndarray  # (N, D) float32
    scores: np.ndarray  # (N,) float32
    global_descriptor: np.ndarray  # (D_g,) float32


def _read_f32(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    if not path.exists():
        raise InterchangeError(f"missing array file {path.name}")
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise InterchangeError(
            f"{path.name}: expected {int(np.prod(shape))} values, found {data.size}"
        )
    return data.reshape(shape)


def _read_i32(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    if not path.exists():
        raise InterchangeError(f"missing array file {path.name}")
    data = np.fromfile(path, dtype="<i4")
    if data.size != int(np.prod(shape)):
        raise InterchangeError(
            f"{path.name}: expected {int(np.prod(shape))} values, found {data.size}"
        )
    return data.reshape(shape)


def load_feature_dir(path: str | Path) -> dict[str, ImageFeatures]:
    path = Path(path)
    manifest_path = path / "features.json"
    if not manifest_path.exists():
        raise InterchangeError(f"no features.json in {path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != INTERCHANGE_VERSION:
        raise InterchangeError(
            f"unsupported feature format_version {manifest.get('format_version')!r}"
        )
    dim = int(manifest["descriptor_dim"])
    gdim = int(manifest["global_dim"])
    out: dict[str, ImageFeatures] = {}
    for entry in manifest["images"]:
        iid = entry["image_id"]
        n = int(entry["num_keypoints"])
        kpts = _read_f32(path / "arrays" / f"{iid}.kpts.f32", (n, 2))
        desc = _read_f32(path / "arrays" / f"{iid}.desc.f32", (n, dim))
        scores = _read_f32(path / "arrays" / f"{iid}.scores.f32", (n,))
        g = _read_f32(path / "arrays" / f"{iid}.global.f32", (gdim,))
        for name, arr in (("keypoints", kpts), ("descriptors", desc),
                          ("scores", scores), ("global", g)):
            if not np.all(np.isfinite(arr)):
                raise InterchangeError(f"{iid}: non-finite values in {name}")
        norm = float(np.linalg.norm(g.astype(np.float64)))
        if abs(norm - 1.0) > 1e-4:
            raise InterchangeError(f"{iid}: global descriptor norm {norm:.6f} != 1")
        out[iid] = ImageFeatures(iid, kpts, desc, scores, g)
    return out


def load_match_dir(path: str | Path) -> list[tuple[str, str, MatchSet]]:
    path = Path(path)
    manifest_path = path / "matches.json"
    if not manifest_path.exists():
        raise InterchangeError(f"no matches.json in {path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != INTERCHANGE_VERSION:
        raise InterchangeError(
            f"unsupported match format_version {manifest.get('format_version')!r}"
        )
    out = []
    for entry in manifest["pairs"]:
        a, b, source = entry["image_a"], entry["image_b"], entry["source"]
        m = int(entry["num_matches"])
        stem = f"{a}__{b}.{source}"
        idx = _read_i32(path / "arrays" / f"{stem}.idx.i32", (m, 2))
        conf = _read_f32(path / "arrays" / f"{stem}.conf.f32", (m,))
        if np.any(idx < 0):
            raise InterchangeError(f"{stem}: negative keypoint index")
        if np.any(conf < 0) or np.any(conf > 1) or not np.all(np.isfinite(conf)):
            raise InterchangeError(f"{stem}: confidences outside [0, 1]")
        ms = MatchSet(a, b, tuple(
            Match(int(q), int(mm), float(c), source)
            for (q, mm), c in zip(idx, conf)
        ))
        out.append((a, b, ms))
    return out
