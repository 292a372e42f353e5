"""Robust absolute pose from 2D-3D correspondences: P3P + LO-RANSAC + refinement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from crossloc.geometry import CameraIntrinsics, Pose, Rotation
from crossloc.matching import Correspondence2D3D


class DegenerateError(ValueError):
    pass


@dataclass(frozen=True)
class RansacConfig:
    reproj_threshold: float = 12.0
    confidence: float = 0.9999
    max_iterations: int = 10000
    min_inliers_success: int = 4
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.reproj_threshold <= 0:
            raise ValueError("reproj_threshold must be positive")


@dataclass(frozen=True)
class PnPResult:
    pose: Pose
    inlier_mask: np.ndarray
    num_inliers: int
    mean_inlier_reproj_error: float
    converged: bool


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def _bearing(K: CameraIntrinsics, pixel: np.ndarray) -> np.ndarray:
    f = np.array([(pixel[0] - K.cx) / K.fx, (pixel[1] - K.cy) / K.fy, 1.0])
    return f / np.linalg.norm(f)


def _rigid_from_point_pairs(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid transform with dst = R @ src + t (Kabsch)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return Pose(Rotation.from_matrix(R), cd - R @ cs)


def _reproj_errors(
    K: CameraIntrinsics, pose: Pose, points: np.ndarray, pixels: np.ndarray
) -> np.ndarray:
    """Per-correspondence pixel error; inf when behind the camera."""
    x = pose.apply(points)
    err = np.full(len(points), np.inf)
    front = x[:, 2] > 1e-6
    z = x[front, 2]
    du = K.fx * x[front, 0] / z + K.cx - pixels[front, 0]
    dv = K.fy * x[front, 1] / z + K.cy - pixels[front, 1]
    err[front] = np.hypot(du, dv)
    return err


def solve_p3p(corrs: list[Correspondence2D3D], K: CameraIntrinsics) -> list[Pose]:
    """Minimal absolute-pose solver from exactly 3 correspondences.

    Classical three-point resection: reduce the law-of-cosines system to a
    quartic in the depth ratio (elimination done numerically with polynomial
    arithmetic), recover per-point depths, then align world to camera points.
    Up to 4 candidates; each reprojects all 3 points to <=1e-6 px and passes
    cheirality.
    """
    if len(corrs) != 3:
        raise DegenerateError("solve_p3p needs exactly 3 correspondences")
    P = np.array([c.point for c in corrs])
    px = np.array([c.pixel for c in corrs])
    if np.linalg.norm(np.cross(P[1] - P[0], P[2] - P[0])) < 1e-12:
        raise DegenerateError("3D points are collinear or coincident")

    f1, f2, f3 = (_bearing(K, p) for p in px)
    a = np.linalg.norm(P[1] - P[2])
    b = np.linalg.norm(P[0] - P[2])
    c = np.linalg.norm(P[0] - P[1])
    if min(a, b, c) < 1e-12:
        raise DegenerateError("coincident 3D points")
    cos_alpha = float(f2 @ f3)
    cos_beta = float(f1 @ f3)
    cos_gamma = float(f1 @ f2)

    # With s2 = u*s1, s3 = v*s1 the two distance-ratio equations become
    #   u^2 + v^2 - 2uv*ca - (a/b)^2 (1 + v^2 - 2v*cb) = 0
    #   1 + u^2 - 2u*cg  - (c/b)^2 (1 + v^2 - 2v*cb) = 0
    # Their difference is linear in u: u*D(v) = N(v); substituting u = N/D
    # into the second equation yields a quartic in v.
    ab2 = (a / b) ** 2
    cb2 = (c / b) ** 2
    # polynomial coefficients in ascending order of v
    q_b = np.array([1.0, -2.0 * cos_beta, 1.0])  # 1 - 2 cb v + v^2
    N = np.array([1.0, 0.0, -1.0]) + (ab2 - cb2) * q_b  # N(v) = 1 - v^2 + (ab2-cb2) q_b
    D = np.array([2.0 * cos_gamma, -2.0 * cos_alpha])  # 2cg - 2ca v

    def polymul(p, q):
        return np.convolve(p, q)

    # second equation times D^2: D^2 + N^2 - 2 N D cg - cb2 * q_b * D^2 = 0
    D2 = polymul(D, D)
    poly = np.zeros(5)
    for term in (
        D2,
        polymul(N, N),
        -2.0 * cos_gamma * polymul(N, D),
        -cb2 * polymul(q_b, D2),
    ):
        poly[: len(term)] += term

    roots = np.roots(poly[::-1])
    poses: list[Pose] = []
    for r in roots:
        if abs(r.imag) > 1e-6:
            continue
        v = float(r.real)
        if v <= 0:
            continue
        denom = 2.0 * cos_gamma - 2.0 * cos_alpha * v
        if abs(denom) < 1e-12:
            continue
        u = float(np.polyval(N[::-1], v)) / denom
        if u <= 0:
            continue
        denom_b = 1.0 + v * v - 2.0 * v * cos_beta
        if denom_b <= 1e-12:
            continue
        s1_sq = b * b / denom_b
        if not np.isfinite(s1_sq) or s1_sq <= 0:
            continue
        s1 = float(np.sqrt(s1_sq))
        cam_pts = np.array([s1 * f1, s1 * u * f2, s1 * v * f3])
        pose = _rigid_from_point_pairs(P, cam_pts)
        pose = _polish_exact(pose, K, P, px)
        if pose is None:
            continue
        err = _reproj_errors(K, pose, P, px)
        if np.all(np.isfinite(err)) and err.max() <= 1e-6:
            if not any(_pose_close(pose, q) for q in poses):
                poses.append(pose)
    return poses[:4]


def _pose_close(a: Pose, b: Pose, tol: float = 1e-6) -> bool:
    from crossloc.geometry import rotation_angle_deg

    return (
        rotation_angle_deg(a.rotation, b.rotation) < tol
        and np.linalg.norm(a.translation - b.translation) < tol
    )


def _polish_exact(
    pose: Pose, K: CameraIntrinsics, points: np.ndarray, pixels: np.ndarray
) -> Pose | None:
    """A few Gauss-Newton steps to drive the 3-point residual to zero."""
    corrs = [Correspondence2D3D(pixels[i], points[i]) for i in range(len(points))]
    refined = refine_pose(corrs, K, pose, max_iterations=15)
    return refined.pose if refined.converged else pose


def _residual_and_jacobian(
    K: CameraIntrinsics,
    pose: Pose,
    points: np.ndarray,
    pixels: np.ndarray,
    weights: np.ndarray,
) -> tuple[np.ndarray, np.ndarray] | None:
    """Stacked weighted residual (2N,) and Jacobian (2N, 6) wrt (omega, dt).

    Pose perturbation is left-multiplicative: R <- exp(omega) R, t <- t + dt.
    Returns None when any point falls behind the camera.
    """
    R = pose.rotation.as_matrix()
    y_rot = points @ R.T
    y = y_rot + pose.translation
    if np.any(y[:, 2] <= 1e-6):
        return None
    z = y[:, 2]
    u = K.fx * y[:, 0] / z + K.cx
    v = K.fy * y[:, 1] / z + K.cy
    sw = np.sqrt(weights)
    res = np.empty(2 * len(points))
    res[0::2] = sw * (u - pixels[:, 0])
    res[1::2] = sw * (v - pixels[:, 1])

    n = len(points)
    Jproj = np.zeros((n, 2, 3))
    Jproj[:, 0, 0] = K.fx / z
    Jproj[:, 0, 2] = -K.fx * y[:, 0] / z ** 2
    Jproj[:, 1, 1] = K.fy / z
    Jproj[:, 1, 2] = -K.fy * y[:, 1] / z ** 2
    Jpose = np.zeros((n, 3, 6))
    # left block is -skew(R @ X); right block is identity
    Jpose[:, 0, 1] = y_rot[:, 2]
    Jpose[:, 0, 2] = -y_rot[:, 1]
    Jpose[:, 1, 0] = -y_rot[:, 2]
    Jpose[:, 1, 2] = y_rot[:, 0]
    Jpose[:, 2, 0] = y_rot[:, 1]
    Jpose[:, 2, 1] = -y_rot[:, 0]
    Jpose[:, 0, 3] = Jpose[:, 1, 4] = Jpose[:, 2, 5] = 1.0
    J = (sw[:, None, None] * (Jproj @ Jpose)).reshape(2 * n, 6)
    return res, J


def refine_pose(
    corrs: list[Correspondence2D3D],
    K: CameraIntrinsics,
    initial: Pose,
    max_iterations: int = 100,
) -> PnPResult:
    """Weighted Gauss-Newton polish with Levenberg damping on non-decrease.

    Minimizes sum(w_i * ||reprojection residual_i||^2); the rotation is
    updated on the manifold via axis-angle increments. Never returns a pose
    with higher cost than the input; diverging runs return the initial pose
    with converged=False.
    """
    points = np.array([c.point for c in corrs])
    pixels = np.array([c.pixel for c in corrs])
    weights = np.array([c.weight for c in corrs])

    pose = initial
    rj = _residual_and_jacobian(K, pose, points, pixels, weights)
    if rj is None:
        return PnPResult(initial, np.zeros(len(corrs), dtype=bool), 0, np.inf, False)
    res, J = rj
    cost = float(res @ res)
    lam = 1e-6
    converged = True
    for _ in range(max_iterations):
        JtJ = J.T @ J
        g = J.T @ res
        accepted = False
        while lam <= 1e8:
            try:
                step = np.linalg.solve(JtJ + lam * np.diag(np.diag(JtJ)) + 1e-15 * np.eye(6), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = Pose(
                Rotation.from_rotvec(step[:3]).compose(pose.rotation),
                pose.translation + step[3:],
            )
            rj = _residual_and_jacobian(K, cand, points, pixels, weights)
            if rj is not None:
                new_cost = float(rj[0] @ rj[0])
                if new_cost <= cost:
                    pose = cand
                    res, J = rj
                    cost = new_cost
                    lam = max(lam / 3.0, 1e-12)
                    accepted = True
                    break
            lam *= 10.0
        if not accepted:
            break  # no damping level improves the cost: numerical minimum
        if np.linalg.norm(step) < 1e-10:
            break

    errors = _reproj_errors(K, pose, points, pixels)
    mask = np.isfinite(errors)
    mean_err = float(errors[mask].mean()) if mask.any() else np.inf
    return PnPResult(pose, mask, int(mask.sum()), mean_err, converged)


def _count_inliers(
    K: CameraIntrinsics,
    pose: Pose,
    points: np.ndarray,
    pixels: np.ndarray,
    threshold: float,
) -> np.ndarray:
    return _reproj_errors(K, pose, points, pixels) <= threshold


def ransac_pnp(
    corrs: list[Correspondence2D3D],
    K: CameraIntrinsics,
    cfg: RansacConfig = RansacConfig(),
) -> PnPResult | None:
    """LO-RANSAC over P3P minimal samples with final weighted refinement.

    Deterministic for a fixed cfg.rng_seed. Returns None when fewer than 4
    correspondences are supplied or no model reaches min_inliers_success.
    """
    if len(corrs) < 4:
        return None
    points = np.array([c.point for c in corrs])
    pixels = np.array([c.pixel for c in corrs])
    n = len(corrs)
    rng = np.random.default_rng(cfg.rng_seed)

    best_pose: Pose | None = None
    best_mask = np.zeros(n, dtype=bool)
    best_count = 0
    max_iter = cfg.max_iterations
    it = 0
    while it < max_iter:
        it += 1
        idx = rng.choice(n, size=3, replace=False)
        try:
            candidates = solve_p3p([corrs[i] for i in idx], K)
        except DegenerateError:
            continue
        for pose in candidates:
            mask = _count_inliers(K, pose, points, pixels, cfg.reproj_threshold)
            count = int(mask.sum())
            if count > best_count:
                # local optimization: refine on the inlier set, rescore
                if count >= 4:
                    inl = [corrs[i] for i in np.nonzero(mask)[0]]
                    lo = refine_pose(inl, K, pose)
                    lo_mask = _count_inliers(K, lo.pose, points, pixels,
                                             cfg.reproj_threshold)
                    if int(lo_mask.sum()) >= count:
                        pose, mask, count = lo.pose, lo_mask, int(lo_mask.sum())
                best_pose, best_mask, best_count = pose, mask, count
                w = best_count / n
                if w > 0:
                    denom = np.log1p(-min(w ** 3, 1 - 1e-12))
                    needed = int(np.ceil(np.log1p(-cfg.confidence) / denom))
                    max_iter = min(cfg.max_iterations, max(needed, 1))

    if best_pose is None or best_count < cfg.min_inliers_success:
        return None

    # iterate refit + re-collect until the inlier set stabilizes, so a
    # marginal outlier leaving the band cannot pin us to the unrefined pose
    final_pose, final_mask = best_pose, best_mask
    converged = True
    for _ in range(10):
        inliers = [corrs[i] for i in np.nonzero(final_mask)[0]]
        if len(inliers) < 4:
            break
        ref = refine_pose(inliers, K, final_pose)
        converged = ref.converged
        new_mask = _count_inliers(K, ref.pose, points, pixels, cfg.reproj_threshold)
        final_pose = ref.pose
        stable = bool(np.array_equal(new_mask, final_mask))
        final_mask = new_mask
        if stable:
            break
    errors = _reproj_errors(K, final_pose, points, pixels)
    num = int(final_mask.sum())
    if num < cfg.min_inliers_success:
        return None
    mean_err = float(errors[final_mask].mean())
    return PnPResult(final_pose, final_mask, num, mean_err, converged)
