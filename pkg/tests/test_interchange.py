import json

import numpy as np
import pytest

from crossloc.interchange import (
    InterchangeError,
    load_feature_dir,
    load_match_dir,
)


def write_features(root, images, dim=4, gdim=6, mutate=None):
    (root / "arrays").mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": 1, "descriptor_dim": dim, "global_dim": gdim,
                "images": []}
    rng = np.random.default_rng(0)
    for iid, n in images:
        manifest["images"].append({"image_id": iid, "num_keypoints": n})
        kpts = rng.uniform(0, 640, size=(n, 2)).astype("<f4")
        desc = rng.normal(size=(n, dim)).astype("<f4")
        scores = rng.uniform(size=n).astype("<f4")
        g = rng.normal(size=gdim)
        g = (g / np.linalg.norm(g)).astype("<f4")
        g = (g / np.linalg.norm(g.astype(np.float64))).astype("<f4")
        for suffix, arr in (("kpts", kpts), ("desc", desc),
                            ("scores", scores), ("global", g)):
            arr.tofile(root / "arrays" / f"{iid}.{suffix}.f32")
    if mutate:
        mutate(manifest, root)
    (root / "features.json").write_text(json.dumps(manifest))


def write_matches(root, pairs, mutate=None):
    (root / "arrays").mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": 1, "pairs": []}
    rng = np.random.default_rng(1)
    for a, b, source, m in pairs:
        manifest["pairs"].append(
            {"image_a": a, "image_b": b, "source": source, "num_matches": m}
        )
        idx = rng.integers(0, 100, size=(m, 2)).astype("<i4")
        conf = rng.uniform(size=m).astype("<f4")
        idx.tofile(root / "arrays" / f"{a}__{b}.{source}.idx.i32")
        conf.tofile(root / "arrays" / f"{a}__{b}.{source}.conf.f32")
    if mutate:
        mutate(manifest, root)
    (root / "matches.json").write_text(json.dumps(manifest))


class TestFeatures:
    def test_round_trip_shapes(self, tmp_path):
        write_features(tmp_path, [("img0", 3), ("img1", 7)])
        feats = load_feature_dir(tmp_path)
        assert set(feats) == {"img0", "img1"}
        f = feats["img0"]
        assert f.keypoints.shape == (3, 2)
        assert f.descriptors.shape == (3, 4)
        assert f.scores.shape == (3,)
        assert f.global_descriptor.shape == (6,)

    def test_empty_image_allowed(self, tmp_path):
        write_features(tmp_path, [("img0", 0)])
        assert load_feature_dir(tmp_path)["img0"].keypoints.shape == (0, 2)

    def test_version_rejected(self, tmp_path):
        write_features(tmp_path, [("img0", 3)],
                       mutate=lambda m, r: m.update(format_version=2))
        with pytest.raises(InterchangeError, match="format_version"):
            load_feature_dir(tmp_path)

    def test_truncated_array(self, tmp_path):
        def chop(manifest, root):
            p = root / "arrays" / "img0.desc.f32"
            p.write_bytes(p.read_bytes()[:-4])

        write_features(tmp_path, [("img0", 3)], mutate=chop)
        with pytest.raises(InterchangeError, match="expected"):
            load_feature_dir(tmp_path)

    def test_non_unit_global_rejected(self, tmp_path):
        def scale(manifest, root):
            p = root / "arrays" / "img0.global.f32"
            g = np.fromfile(p, dtype="<f4") * 2
            g.tofile(p)

        write_features(tmp_path, [("img0", 3)], mutate=scale)
        with pytest.raises(InterchangeError, match="norm"):
            load_feature_dir(tmp_path)

    def test_nan_rejected(self, tmp_path):
        def poison(manifest, root):
            p = root / "arrays" / "img0.kpts.f32"
            a = np.fromfile(p, dtype="<f4")
            a[0] = np.nan
            a.tofile(p)

        write_features(tmp_path, [("img0", 3)], mutate=poison)
        with pytest.raises(InterchangeError, match="non-finite"):
            load_feature_dir(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(InterchangeError, match="features.json"):
            load_feature_dir(tmp_path)


class TestMatches:
    def test_round_trip(self, tmp_path):
        write_matches(tmp_path, [("q0", "m0", "sg", 5), ("q0", "m1", "gim", 2)])
        pairs = load_match_dir(tmp_path)
        assert [(a, b) for a, b, _ in pairs] == [("q0", "m0"), ("q0", "m1")]
        ms = pairs[0][2]
        assert len(ms.matches) == 5
        assert all(m.source == "sg" for m in ms.matches)
        assert all(0.0 <= m.confidence <= 1.0 for m in ms.matches)

    def test_confidence_out_of_range(self, tmp_path):
        def bump(manifest, root):
            p = root / "arrays" / "q0__m0.sg.conf.f32"
            c = np.fromfile(p, dtype="<f4")
            c[0] = 1.5
            c.tofile(p)

        write_matches(tmp_path, [("q0", "m0", "sg", 3)], mutate=bump)
        with pytest.raises(InterchangeError, match=r"\[0, 1\]"):
            load_match_dir(tmp_path)

    def test_negative_index(self, tmp_path):
        def neg(manifest, root):
            p = root / "arrays" / "q0__m0.sg.idx.i32"
            i = np.fromfile(p, dtype="<i4")
            i[0] = -1
            i.tofile(p)

        write_matches(tmp_path, [("q0", "m0", "sg", 3)], mutate=neg)
        with pytest.raises(InterchangeError, match="negative"):
            load_match_dir(tmp_path)

    def test_version_rejected(self, tmp_path):
        write_matches(tmp_path, [("q0", "m0", "sg", 3)],
                      mutate=lambda m, r: m.update(format_version=0))
        with pytest.raises(InterchangeError, match="format_version"):
            load_match_dir(tmp_path)
