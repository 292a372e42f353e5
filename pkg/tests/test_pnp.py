import numpy as np
import pytest

from crossloc.geometry import CameraIntrinsics, Pose, Rotation, project, rotation_angle_deg
from crossloc.matching import Correspondence2D3D
from crossloc.pnp import (
    DegenerateError,
    RansacConfig,
    _residual_and_jacobian,
    ransac_pnp,
    refine_pose,
    solve_p3p,
)

K = CameraIntrinsics(fx=500, fy=480, cx=320, cy=240, width=640, height=480)


def random_pose(rng, center_radius=12.0):
    # camera placed away from the origin, looking roughly at it
    rot = Rotation(rng.normal(size=4))
    center = rng.normal(size=3)
    center = center / np.linalg.norm(center) * center_radius
    # aim z axis at origin
    z = -center / np.linalg.norm(center)
    x = np.cross(np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([0.0, 1.0, 0.0]), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.vstack([x, y, z])
    return Pose(Rotation.from_matrix(R), -R @ center)


def make_corrs(rng, pose, n, scene_radius=10.0, noise_px=0.0, outlier_frac=0.0):
    from crossloc.geometry import project_points

    pts, pxs = [], []
    while len(pts) < n:
        X = rng.uniform(-scene_radius, scene_radius, size=(4 * n, 3))
        uv, ok = project_points(K, pose, X)
        ok &= (
            (uv[:, 0] >= 0) & (uv[:, 0] < K.width)
            & (uv[:, 1] >= 0) & (uv[:, 1] < K.height)
        )
        uv = uv[ok]
        if noise_px:
            uv = uv + rng.normal(0, noise_px, size=uv.shape)
        pts.extend(X[ok][: n - len(pts)])
        pxs.extend(uv[: n - len(pxs)])
    corrs = [Correspondence2D3D(p, X) for X, p in zip(pts, pxs)]
    n_out = int(round(outlier_frac * n))
    out_idx = rng.choice(n, size=n_out, replace=False)
    for i in out_idx:
        bad = rng.uniform([0, 0], [K.width, K.height])
        corrs[i] = Correspondence2D3D(bad, corrs[i].point)
    return corrs, set(int(i) for i in out_idx)


def pose_error(est, gt):
    return (
        float(np.linalg.norm(est.camera_center() - gt.camera_center())),
        rotation_angle_deg(est.rotation, gt.rotation),
    )


class TestP3P:
    def test_exact_recovery(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            gt = random_pose(rng)
            corrs, _ = make_corrs(rng, gt, 3)
            try:
                candidates = solve_p3p(corrs, K)
            except DegenerateError:
                continue
            errs = [pose_error(p, gt) for p in candidates]
            assert any(t < 1e-6 and r < 1e-6 for t, r in errs), errs

    def test_candidates_reproject_exactly(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            gt = random_pose(rng)
            corrs, _ = make_corrs(rng, gt, 3)
            try:
                candidates = solve_p3p(corrs, K)
            except DegenerateError:
                continue
            for pose in candidates:
                for c in corrs:
                    uv = project(K, pose, c.point)
                    assert uv is not None
                    assert np.linalg.norm(uv - c.pixel) <= 1e-6

    def test_collinear_degenerate(self):
        pts = [np.array([0.0, 0, 5]), np.array([1.0, 0, 5]), np.array([2.0, 0, 5])]
        corrs = [Correspondence2D3D(project(K, Pose.identity(), p), p) for p in pts]
        with pytest.raises(DegenerateError):
            solve_p3p(corrs, K)

    def test_candidate_count_bounded(self):
        rng = np.random.default_rng(2)
        for _ in range(2000):
            gt = random_pose(rng)
            corrs, _ = make_corrs(rng, gt, 3)
            try:
                candidates = solve_p3p(corrs, K)
            except DegenerateError:
                continue
            assert len(candidates) <= 4


class TestRefinePose:
    def test_stationary_at_ground_truth(self):
        rng = np.random.default_rng(3)
        gt = random_pose(rng)
        corrs, _ = make_corrs(rng, gt, 50)
        out = refine_pose(corrs, K, gt)
        t_err, r_err = pose_error(out.pose, gt)
        assert t_err < 1e-10 and r_err < 1e-10
        assert out.converged

    def test_recovers_from_perturbation(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            gt = random_pose(rng)
            corrs, _ = make_corrs(rng, gt, 100)
            axis = rng.normal(size=3)
            perturbed = Pose(
                Rotation.from_axis_angle(axis, np.radians(5.0)).compose(gt.rotation),
                gt.translation + rng.normal(size=3) * 0.5 / np.sqrt(3),
            )
            out = refine_pose(corrs, K, perturbed)
            t_err, r_err = pose_error(out.pose, gt)
            assert t_err < 1e-8 and r_err < 1e-8

    def test_cost_never_increases(self):
        rng = np.random.default_rng(5)
        gt = random_pose(rng)
        corrs, _ = make_corrs(rng, gt, 40, noise_px=2.0)
        perturbed = Pose(
            Rotation.from_axis_angle(np.array([1.0, 0, 0]), 0.05).compose(gt.rotation),
            gt.translation + np.array([0.2, -0.1, 0.1]),
        )

        def cost(pose):
            total = 0.0
            for c in corrs:
                uv = project(K, pose, c.point)
                total += c.weight * float(np.sum((uv - c.pixel) ** 2))
            return total

        out = refine_pose(corrs, K, perturbed)
        assert cost(out.pose) <= cost(perturbed) + 1e-9

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            gt = random_pose(rng)
            corrs, _ = make_corrs(rng, gt, 8)
            pose = Pose(
                Rotation.from_axis_angle(rng.normal(size=3), 0.02).compose(gt.rotation),
                gt.translation + rng.normal(size=3) * 0.05,
            )
            points = np.array([c.point for c in corrs])
            pixels = np.array([c.pixel for c in corrs])
            weights = np.ones(len(corrs))
            res, J = _residual_and_jacobian(K, pose, points, pixels, weights)
            eps = 1e-6
            for k in range(6):
                d = np.zeros(6)
                d[k] = eps
                def retract(delta):
                    return Pose(
                        Rotation.from_rotvec(delta[:3]).compose(pose.rotation),
                        pose.translation + delta[3:],
                    )
                rp, _ = _residual_and_jacobian(K, retract(d), points, pixels, weights)
                rm, _ = _residual_and_jacobian(K, retract(-d), points, pixels, weights)
                fd = (rp - rm) / (2 * eps)
                scale = max(1.0, float(np.abs(fd).max()))
                assert np.abs(J[:, k] - fd).max() / scale < 1e-5


class TestRansacPnP:
    def test_noiseless_recovery(self):
        rng = np.random.default_rng(7)
        gt = random_pose(rng)
        corrs, _ = make_corrs(rng, gt, 200)
        result = ransac_pnp(corrs, K, RansacConfig(rng_seed=0))
        assert result is not None
        t_err, r_err = pose_error(result.pose, gt)
        assert t_err < 1e-6 and r_err < 1e-6
        assert result.num_inliers == 200

    def test_insufficient_correspondences(self):
        rng = np.random.default_rng(8)
        gt = random_pose(rng)
        corrs, _ = make_corrs(rng, gt, 3)
        assert ransac_pnp(corrs, K, RansacConfig()) is None

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        gt = random_pose(rng)
        corrs, _ = make_corrs(rng, gt, 100, noise_px=1.0, outlier_frac=0.3)
        a = ransac_pnp(corrs, K, RansacConfig(rng_seed=42))
        b = ransac_pnp(corrs, K, RansacConfig(rng_seed=42))
        assert np.array_equal(a.pose.rotation.q, b.pose.rotation.q)
        assert np.array_equal(a.pose.translation, b.pose.translation)
        assert np.array_equal(a.inlier_mask, b.inlier_mask)

    def test_inliers_within_threshold(self):
        rng = np.random.default_rng(10)
        gt = random_pose(rng)
        corrs, _ = make_corrs(rng, gt, 150, noise_px=1.0, outlier_frac=0.3)
        cfg = RansacConfig(rng_seed=1)
        result = ransac_pnp(corrs, K, cfg)
        assert result is not None
        for i in np.nonzero(result.inlier_mask)[0]:
            uv = project(K, result.pose, corrs[i].point)
            assert uv is not None
            assert np.linalg.norm(uv - corrs[i].pixel) <= cfg.reproj_threshold

    def test_monte_carlo_robustness(self):
        # 500 seeded trials, 200 corrs, 30% outliers, 1 px noise, 10 m scene
        rng = np.random.default_rng(11)
        ok = 0
        trials = 500
        for seed in range(trials):
            gt = random_pose(rng)
            corrs, _ = make_corrs(rng, gt, 200, noise_px=1.0, outlier_frac=0.3)
            result = ransac_pnp(corrs, K, RansacConfig(rng_seed=seed))
            if result is None:
                continue
            t_err, r_err = pose_error(result.pose, gt)
            if t_err < 0.05 and r_err < 0.1:
                ok += 1
        assert ok / trials >= 0.99
