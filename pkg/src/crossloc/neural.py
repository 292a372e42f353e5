"""Pluggable neural metric-localization branch with depth conditioning.

Two implementations ship: a seeded simulation oracle (so the full pipeline
is testable without any model) and a subprocess adapter speaking
line-delimited JSON (see crossloc.adapter).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from crossloc.geometry import (
    CameraIntrinsics,
    DepthMap,
    Pose,
    Rotation,
    backproject_depth_map,
    transform_depth_to_query,
)


class NeuralBranchError(RuntimeError):
    pass


class ContextError(ValueError):
    pass


@dataclass(frozen=True)
class CandidateFrame:
    frame_id: str
    pose: Pose
    intrinsics: CameraIntrinsics
    depth: DepthMap | None = None
    conditioned_cloud: np.ndarray | None = None


@dataclass(frozen=True)
class LocalizationContext:
    query_id: str
    query_intrinsics: CameraIntrinsics
    candidates: tuple[CandidateFrame, ...]
    query_depth: DepthMap | None = None

    def __post_init__(self):
        if not self.candidates:
            raise ContextError("localization context needs at least one candidate")


@dataclass(frozen=True)
class NeuralPoseEstimate:
    pose: Pose
    confidence: float
    valid: bool

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


class NeuralLocalizer(Protocol):
    def localize(self, ctx: LocalizationContext) -> NeuralPoseEstimate: ...


@dataclass(frozen=True)
class DepthFilterConfig:
    min_depth: float = 0.1
    max_depth: float = 30.0
    mad_k: float = 5.0

    def __post_init__(self):
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError("need 0 < min_depth < max_depth")
        if self.mad_k <= 0:
            raise ValueError("mad_k must be positive")


def filter_depth(d: DepthMap, cfg: DepthFilterConfig = DepthFilterConfig()) -> DepthMap:
    """Invalidate unusable depth pixels; surviving pixels keep their values.

    A pixel is removed when it is non-finite or <= 0, outside
    [min_depth, max_depth], or farther than mad_k * MAD from the median of
    the range-gated values. Idempotent.
    """
    values = d.values.copy()
    valid = np.isfinite(values) & (values > 0)
    in_range = valid & (values >= cfg.min_depth) & (values <= cfg.max_depth)
    if in_range.any():
        kept = values[in_range]
        med = np.median(kept)
        mad = np.median(np.abs(kept - med))
        if mad > 0:
            in_range &= np.abs(values - med) <= cfg.mad_k * mad
    values[~in_range] = np.nan
    return DepthMap(values)


@dataclass(frozen=True)
class OracleLocalizer:
    """Test double for the feed-forward metric localizer.

    Returns the ground-truth query pose perturbed by Gaussian noise whose
    magnitude grows with the mean translation distance between the true
    query and the candidate poses, modeling degradation under excessive
    translation gaps. Invalid when every candidate is farther than
    fail_beyond. Deterministic per (seed, query_id).
    """

    ground_truth: dict[str, Pose]
    sigma_rot_deg: float = 0.0
    sigma_trans_m: float = 0.0
    degradation_alpha: float = 0.0
    fail_beyond: float = np.inf
    seed: int = 0
    # optional: extra rotation noise proportional to filtered-out depth fraction
    depth_noise_rot_gain: float = 0.0

    def localize(self, ctx: LocalizationContext) -> NeuralPoseEstimate:
        gt = self.ground_truth.get(ctx.query_id)
        if gt is None:
            raise NeuralBranchError(f"oracle has no ground truth for {ctx.query_id!r}")
        return oracle_localize(
            ctx,
            gt,
            noise=(self.sigma_rot_deg, self.sigma_trans_m),
            degradation_alpha=self.degradation_alpha,
            fail_beyond=self.fail_beyond,
            seed=self.seed,
            depth_noise_rot_gain=self.depth_noise_rot_gain,
        )


def _stable_seed(seed: int, query_id: str) -> np.random.Generator:
    import hashlib

    h = hashlib.sha256(f"{seed}:{query_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(h[:8], "little"))


def oracle_localize(
    ctx: LocalizationContext,
    gt: Pose,
    noise: tuple[float, float] = (0.0, 0.0),
    degradation_alpha: float = 0.0,
    fail_beyond: float = np.inf,
    seed: int = 0,
    depth_noise_rot_gain: float = 0.0,
) -> NeuralPoseEstimate:
    sigma_rot, sigma_trans = noise
    gt_center = gt.camera_center()
    dists = np.array(
        [np.linalg.norm(gt_center - c.pose.camera_center()) for c in ctx.candidates]
    )
    if dists.min() > fail_beyond:
        return NeuralPoseEstimate(gt, 0.0, valid=False)

    rng = _stable_seed(seed, ctx.query_id)
    growth = 1.0 + degradation_alpha * float(dists.mean())
    rot_sigma = sigma_rot * growth
    if depth_noise_rot_gain > 0.0:
        rot_sigma += depth_noise_rot_gain * _filtered_depth_fraction(ctx)
    trans_sigma = sigma_trans * growth

    axis = rng.normal(size=3)
    angle = np.radians(rng.normal(0.0, rot_sigma)) if rot_sigma > 0 else 0.0
    dt = rng.normal(0.0, trans_sigma, size=3) if trans_sigma > 0 else np.zeros(3)
    if rot_sigma > 0 or trans_sigma > 0:
        noise_rot = Rotation.from_axis_angle(axis, angle)
        pose = Pose(noise_rot.compose(gt.rotation), gt.translation + dt)
    else:
        pose = gt
    conf = float(1.0 / growth) if np.isfinite(growth) else 0.0
    return NeuralPoseEstimate(pose, min(max(conf, 0.0), 1.0), valid=True)


def _filtered_depth_fraction(ctx: LocalizationContext) -> float:
    """Fraction of candidate depth pixels removed by filtering, in [0, 1]."""
    total = 0
    removed = 0
    for c in ctx.candidates:
        if c.depth is None:
            continue
        total += c.depth.values.size
        removed += int((~filter_depth(c.depth).valid_mask()).sum())
    return removed / total if total else 0.0


def condition_depth(
    ctx: LocalizationContext,
    query_pose_estimate: Pose | None = None,
    cfg: DepthFilterConfig = DepthFilterConfig(),
) -> LocalizationContext:
    """Filter candidate depth and re-express it in the query camera frame.

    Candidate poses are the known extrinsics; the query frame is taken from
    query_pose_estimate when given, otherwise each candidate cloud stays in
    its own camera frame. Candidates without depth pass through unchanged.
    """
    conditioned = []
    for c in ctx.candidates:
        if c.depth is None:
            conditioned.append(c)
            continue
        filtered = filter_depth(c.depth, cfg)
        if query_pose_estimate is not None:
            cloud = transform_depth_to_query(
                filtered, c.intrinsics, c.pose, query_pose_estimate
            )
        else:
            cloud = backproject_depth_map(c.intrinsics, filtered)
        conditioned.append(
            CandidateFrame(c.frame_id, c.pose, c.intrinsics, filtered, cloud)
        )
    return LocalizationContext(
        ctx.query_id, ctx.query_intrinsics, tuple(conditioned), ctx.query_depth
    )
