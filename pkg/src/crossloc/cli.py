"""Command-line front end: simulate, build-map, index, localize, evaluate.

Configuration comes from a YAML file with a strict schema (unknown keys are
rejected); command-line flags override file values, which override built-in
defaults. All randomness flows from a single seed; per-query streams are
derived by hashing query ids, so results are identical for any worker count.

Exit codes: 0 success, 3 missing input, 4 schema violation, 5 format-version
mismatch, 1 other error.
"""

from __future__ import annotations

import dataclasses
import json
import shlex
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from crossloc.evaluation import (
    device_pair_matrix,
    mean_matrix,
    overall_score,
    records_from_report,
)
from crossloc.mapstore import (
    StoreCorruptError,
    StoreTruncatedError,
    StoreVersionError,
    build_map,
    load,
    read_f32,
    save,
    write_f32,
)
from crossloc.neural import OracleLocalizer
from crossloc.pipeline import HybridLocalizer, PipelineConfig, QueryInput
from crossloc.pnp import RansacConfig
from crossloc.neural import DepthFilterConfig
from crossloc.simulate import (
    SceneConfig,
    generate_scene,
    export_scene,
    load_gt_poses,
    load_pair_matches,
)

EXIT_MISSING_INPUT = 3
EXIT_SCHEMA = 4
EXIT_VERSION = 5


class _CliError(click.ClickException):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.exit_code = code


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise _CliError(f"config file not found: {path}", EXIT_MISSING_INPUT)
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise _CliError(f"config is not valid YAML: {exc}", EXIT_SCHEMA)
    if not isinstance(data, dict):
        raise _CliError("config root must be a mapping", EXIT_SCHEMA)
    allowed = {"pipeline", "scene", "seed", "workers"}
    unknown = set(data) - allowed
    if unknown:
        raise _CliError(
            f"unknown config keys: {sorted(unknown)} (allowed: {sorted(allowed)})",
            EXIT_SCHEMA,
        )
    return data


def _build_dataclass(cls, section: dict, label: str, nested: dict | None = None):
    """Construct a config dataclass from a dict, rejecting unknown keys."""
    nested = nested or {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(section) - set(fields)
    if unknown:
        raise _CliError(
            f"unknown {label} config keys: {sorted(unknown)}", EXIT_SCHEMA
        )
    kwargs = {}
    for key, value in section.items():
        if key in nested and isinstance(value, dict):
            kwargs[key] = _build_dataclass(nested[key], value, f"{label}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise _CliError(f"invalid {label} config: {exc}", EXIT_SCHEMA)


def _pipeline_config(data: dict, overrides: dict) -> PipelineConfig:
    section = dict(data.get("pipeline", {}))
    for key, value in overrides.items():
        if value is not None:
            section[key] = value
    return _build_dataclass(
        PipelineConfig, section, "pipeline",
        nested={"ransac": RansacConfig, "depth_filter": DepthFilterConfig},
    )


def _scene_config(data: dict, seed: int | None) -> SceneConfig:
    section = dict(data.get("scene", {}))
    if "devices" in section:
        raise _CliError(
            "scene.devices is not configurable from file; use the built-in set",
            EXIT_SCHEMA,
        )
    if seed is not None:
        section["seed"] = seed
    return _build_dataclass(SceneConfig, section, "scene")


def _echo_config(out_dir: Path, effective: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(
        yaml.safe_dump(effective, sort_keys=True, default_flow_style=False)
    )


def _dataclass_doc(obj) -> dict:
    doc = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            doc[f.name] = _dataclass_doc(v)
        elif isinstance(v, tuple):
            doc[f.name] = [x if not dataclasses.is_dataclass(x) else _dataclass_doc(x)
                           for x in v]
        else:
            doc[f.name] = v
    return doc


def _load_map(path: str):
    p = Path(path)
    if not p.exists():
        raise _CliError(f"map directory not found: {path}", EXIT_MISSING_INPUT)
    try:
        return load(p)
    except StoreVersionError as exc:
        raise _CliError(str(exc), EXIT_VERSION)
    except (StoreTruncatedError, StoreCorruptError) as exc:
        raise _CliError(str(exc), EXIT_SCHEMA)


@click.group()
def main():
    """Hybrid cross-device visual localization toolkit."""


@main.command()
@click.option("--config", "config_path", type=str, default=None,
              help="YAML config file; scene.* keys configure the simulator.")
@click.option("--out", "out_dir", required=True, type=str,
              help="Output scene directory (map/, queries/, matches, poses).")
@click.option("--seed", type=int, default=None,
              help="Overrides config key scene.seed.")
def simulate(config_path, out_dir, seed):
    """Generate a synthetic multi-device scene and export it to disk."""
    data = _load_config_file(config_path)
    cfg = _scene_config(data, seed)
    scene = generate_scene(cfg)
    out = Path(out_dir)
    export_scene(scene, out)
    doc = _dataclass_doc(cfg)
    doc["devices"] = [
        {"tag": d.tag, "has_depth": d.has_depth, "domain_gap": d.domain_gap}
        for d in cfg.devices
    ]
    _echo_config(out, {"scene": doc})
    click.echo(f"scene written to {out} "
               f"({len(scene.map_frames)} map frames, {len(scene.queries)} queries)")


@main.command("build-map")
@click.option("--map-dir", required=True, type=str,
              help="Directory with map frames (saved database, landmarks optional).")
@click.option("--matches", "matches_path", required=True, type=str,
              help="Pairwise match file for triangulation.")
@click.option("--out", "out_dir", required=True, type=str)
@click.option("--max-reproj-error", type=float, default=4.0, show_default=True)
def build_map_cmd(map_dir, matches_path, out_dir, max_reproj_error):
    """Triangulate landmarks from pairwise matches and save the database."""
    db = _load_map(map_dir)
    if not Path(matches_path).exists():
        raise _CliError(f"matches file not found: {matches_path}", EXIT_MISSING_INPUT)
    try:
        pairs = load_pair_matches(matches_path)
    except (ValueError, KeyError) as exc:
        raise _CliError(f"bad matches file: {exc}", EXIT_SCHEMA)
    frames = [db.frames[fid] for fid in sorted(db.frames)]
    built = build_map(frames, pairs, max_reproj_error=max_reproj_error)
    save(built, Path(out_dir))
    click.echo(f"map with {len(built.landmarks)} landmarks written to {out_dir}")


@main.command()
@click.option("--map-dir", required=True, type=str)
@click.option("--out", "out_dir", required=True, type=str)
def index(map_dir, out_dir):
    """Build the global-descriptor retrieval index for a map."""
    db = _load_map(map_dir)
    if not db.frames:
        raise _CliError("map has no frames to index", EXIT_SCHEMA)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frame_ids = sorted(db.frames)
    mat = np.stack([db.frames[fid].global_descriptor for fid in frame_ids])
    write_f32(out / "descriptors.f32", mat)
    (out / "index.json").write_text(json.dumps({
        "format_version": 1,
        "metric": "cosine",
        "dim": int(mat.shape[1]),
        "frame_ids": frame_ids,
    }, indent=1, sort_keys=True) + "\n")
    click.echo(f"index over {len(frame_ids)} frames written to {out}")


def load_index(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Read an index directory back as (frame_ids, descriptor matrix)."""
    path = Path(path)
    meta = json.loads((path / "index.json").read_text())
    if meta.get("format_version") != 1:
        raise StoreVersionError(
            f"unsupported index format_version {meta.get('format_version')!r}"
        )
    ids = list(meta["frame_ids"])
    mat = read_f32(path / "descriptors.f32", (len(ids), int(meta["dim"])))
    return ids, mat


def _make_neural(impl: str, gt_path: str | None, adapter_cmd: str | None,
                 sigma_rot: float, sigma_trans: float, seed: int):
    if impl == "none":
        return None
    if impl == "oracle":
        if gt_path is None:
            raise _CliError("--neural-impl oracle requires --gt-poses",
                            EXIT_MISSING_INPUT)
        if not Path(gt_path).exists():
            raise _CliError(f"ground-truth file not found: {gt_path}",
                            EXIT_MISSING_INPUT)
        gt = {qid: pose for qid, (_, pose) in load_gt_poses(gt_path).items()}
        return OracleLocalizer(ground_truth=gt, sigma_rot_deg=sigma_rot,
                               sigma_trans_m=sigma_trans, seed=seed)
    if impl == "adapter":
        if not adapter_cmd:
            raise _CliError("--neural-impl adapter requires --adapter-cmd",
                            EXIT_MISSING_INPUT)
        from crossloc.adapter import AdapterLocalizer

        return AdapterLocalizer(shlex.split(adapter_cmd))
    raise _CliError(f"unknown neural implementation {impl!r}", EXIT_SCHEMA)


@main.command()
@click.option("--map-dir", required=True, type=str)
@click.option("--query-dir", required=True, type=str)
@click.option("--out", "out_dir", required=True, type=str,
              help="Output directory; report.jsonl and config.yaml land here.")
@click.option("--config", "config_path", type=str, default=None,
              help="YAML config; pipeline.* keys configure the localizer.")
@click.option("--neural-impl", type=click.Choice(["oracle", "adapter", "none"]),
              default="none", show_default=True)
@click.option("--gt-poses", "gt_path", type=str, default=None,
              help="Ground-truth pose file (oracle implementation only).")
@click.option("--adapter-cmd", type=str, default=None,
              help="Command line of the neural RPC server subprocess.")
@click.option("--oracle-sigma-rot", type=float, default=1.0, show_default=True)
@click.option("--oracle-sigma-trans", type=float, default=0.1, show_default=True)
@click.option("--map-device", type=str, default=None,
              help="Restrict the map to one device's frames before localizing.")
@click.option("--top-k", type=int, default=None, help="Overrides pipeline.top_k.")
@click.option("--inlier-gate", type=int, default=None,
              help="Overrides pipeline.inlier_gate.")
@click.option("--prune-radius", type=float, default=None,
              help="Overrides pipeline.prune_radius.")
@click.option("--seed", type=int, default=None, help="Overrides config key seed.")
@click.option("--workers", type=int, default=None,
              help="Query worker pool size; overrides config key workers.")
def localize(map_dir, query_dir, out_dir, config_path, neural_impl, gt_path,
             adapter_cmd, oracle_sigma_rot, oracle_sigma_trans, map_device,
             top_k, inlier_gate, prune_radius, seed, workers):
    """Run hybrid localization over a query set and write report.jsonl."""
    data = _load_config_file(config_path)
    base_seed = seed if seed is not None else int(data.get("seed", 0))
    n_workers = workers if workers is not None else int(data.get("workers", 1))

    overrides = {"top_k": top_k, "inlier_gate": inlier_gate,
                 "prune_radius": prune_radius}
    pcfg_section = dict(data.get("pipeline", {}))
    ransac_section = dict(pcfg_section.get("ransac", {}))
    ransac_section.setdefault("rng_seed", base_seed)
    pcfg_section["ransac"] = ransac_section
    cfg = _pipeline_config({"pipeline": pcfg_section}, overrides)

    db = _load_map(map_dir)
    if map_device is not None:
        db = db.device_subset(map_device)
        if not db.frames:
            raise _CliError(f"map has no frames for device {map_device!r}",
                            EXIT_MISSING_INPUT)
    qdb = _load_map(query_dir)

    neural = _make_neural(neural_impl, gt_path, adapter_cmd,
                          oracle_sigma_rot, oracle_sigma_trans, base_seed)
    try:
        loc = HybridLocalizer(config=cfg, neural=neural).fit(db)
        queries = [
            QueryInput(f.frame_id, f.device, f.intrinsics, f.keypoints,
                       f.local_descriptors, f.global_descriptor, f.depth)
            for fid in sorted(qdb.frames)
            for f in [qdb.frames[fid]]
        ]
        results = loc.predict(queries, workers=n_workers)
    finally:
        if neural is not None and hasattr(neural, "close"):
            neural.close()

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    device_of = {f.frame_id: f.device for f in qdb.frames.values()}
    tag = map_device if map_device is not None else "all"
    with open(out / "report.jsonl", "w") as fh:
        for r in results:
            doc = r.to_json()
            doc["device"] = device_of[r.query_id]
            doc["map_device"] = tag
            fh.write(json.dumps(doc, sort_keys=True) + "\n")
    _echo_config(out, {
        "pipeline": _dataclass_doc(cfg),
        "seed": base_seed,
        "workers": n_workers,
        "neural_impl": neural_impl,
        "map_device": tag,
    })
    n_fail = sum(1 for r in results if r.failure is not None)
    click.echo(f"localized {len(results)} queries ({n_fail} failures) "
               f"-> {out / 'report.jsonl'}")


@main.command()
@click.option("--report", "report_paths", multiple=True, required=True, type=str,
              help="report.jsonl path; repeat for multiple scenes.")
@click.option("--gt-poses", "gt_paths", multiple=True, required=True, type=str,
              help="Ground-truth pose file matching each --report in order.")
@click.option("--out", "out_dir", type=str, default=None,
              help="Optional directory for matrix.txt / matrix.json.")
@click.option("--t-thresh", type=float, default=0.5, show_default=True,
              help="Translation threshold in meters (inclusive).")
@click.option("--r-thresh", type=float, default=5.0, show_default=True,
              help="Rotation threshold in degrees (inclusive).")
def evaluate(report_paths, gt_paths, out_dir, t_thresh, r_thresh):
    """Score reports against ground truth: recall matrices + overall score."""
    if len(report_paths) != len(gt_paths):
        raise _CliError("need one --gt-poses per --report", EXIT_SCHEMA)
    matrices = []
    for rp, gp in zip(report_paths, gt_paths):
        for p in (rp, gp):
            if not Path(p).exists():
                raise _CliError(f"input not found: {p}", EXIT_MISSING_INPUT)
        try:
            gt = load_gt_poses(gp)
            records = records_from_report(rp, gt)
        except (KeyError, ValueError) as exc:
            raise _CliError(f"bad evaluation input: {exc}", EXIT_SCHEMA)
        matrices.append(device_pair_matrix(records, t_thresh, r_thresh))
    combined = mean_matrix(matrices)
    score = overall_score(matrices)

    text = combined.to_text() + f"\n\noverall: {score:.2f}\n"
    click.echo(text, nl=False)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "matrix.txt").write_text(text)
        (out / "matrix.json").write_text(json.dumps({
            "overall": score,
            "combined": combined.to_json(),
            "per_scene": [m.to_json() for m in matrices],
            "thresholds": {"translation_m": t_thresh, "rotation_deg": r_thresh},
        }, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
