"""End-to-end hybrid localization: retrieval, dual branches, pruning, re-run.

Per query: top-k retrieval feeds both a classical branch (multi-source
matching, fusion, pooled 2D-3D lifting, LO-RANSAC PnP) and a neural metric
branch. The PnP pose wins when its inlier count clears a strict gate;
otherwise the neural estimate is used. The chosen pose then prunes
candidates by camera-center distance (inclusive radius) and the neural
branch re-runs on the survivors when that changes the set.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from crossloc.geometry import CameraIntrinsics, DepthMap, Pose
from crossloc.mapstore import MapDatabase, MapFrame
from crossloc.matching import (
    Keypoint,
    MatchSet,
    fuse_matches,
    lift_to_2d3d_with_keypoints,
    match_mutual_nn,
    normalize_confidences,
)
from crossloc.neural import (
    CandidateFrame,
    DepthFilterConfig,
    LocalizationContext,
    NeuralPoseEstimate,
    condition_depth,
)
from crossloc.pnp import PnPResult, RansacConfig, ransac_pnp
from crossloc.retrieval import RetrievalIndex


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    top_k: int = 100
    prune_radius: float = 20.0
    inlier_gate: int = 120
    ransac: RansacConfig = field(default_factory=RansacConfig)
    depth_filter: DepthFilterConfig = field(default_factory=DepthFilterConfig)
    dedup_radius: float = 3.0
    matcher_sources: tuple[str, ...] = ("mnn",)
    mnn_ratio: float = 0.9
    enable_pruning: bool = True
    pre_neural_filter: bool = False

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.prune_radius <= 0:
            raise ValueError("prune_radius must be positive")
        if self.inlier_gate < 0:
            raise ValueError("inlier_gate must be >= 0")


@dataclass(frozen=True)
class QueryInput:
    query_id: str
    device: str
    intrinsics: CameraIntrinsics
    keypoints: tuple[Keypoint, ...]
    local_descriptors: np.ndarray
    global_descriptor: np.ndarray
    depth: DepthMap | None = None


@dataclass(frozen=True)
class HybridResult:
    query_id: str
    final_pose: Pose | None
    branch: str | None  # pnp | neural | neural_rerun
    pnp: PnPResult | None
    neural_first: NeuralPoseEstimate | None
    neural_rerun: NeuralPoseEstimate | None
    retrieved_ids: tuple[str, ...]
    pruned_ids: tuple[str, ...]
    failure: str | None = None

    def to_json(self) -> dict:
        from crossloc.mapstore import _pose_to_json

        return {
            "query_id": self.query_id,
            "final_pose": _pose_to_json(self.final_pose) if self.final_pose else None,
            "branch": self.branch,
            "failure": self.failure,
            "pnp": None if self.pnp is None else {
                "num_inliers": self.pnp.num_inliers,
                "mean_inlier_reproj_error": self.pnp.mean_inlier_reproj_error,
                "converged": self.pnp.converged,
                "pose": _pose_to_json(self.pnp.pose),
            },
            "neural_first": _estimate_json(self.neural_first),
            "neural_rerun": _estimate_json(self.neural_rerun),
            "retrieved_ids": list(self.retrieved_ids),
            "pruned_ids": list(self.pruned_ids),
        }


def _estimate_json(est: NeuralPoseEstimate | None) -> dict | None:
    from crossloc.mapstore import _pose_to_json

    if est is None:
        return None
    return {
        "pose": _pose_to_json(est.pose),
        "confidence": est.confidence,
        "valid": est.valid,
    }


def select_hybrid_pose(
    pnp: PnPResult | None, neural: NeuralPoseEstimate | None, gate: int
) -> tuple[Pose, str] | None:
    """Strictly-greater inlier gate picks PnP; else the neural pose if valid."""
    if pnp is not None and pnp.num_inliers > gate:
        return pnp.pose, "pnp"
    if neural is not None and neural.valid:
        return neural.pose, "neural"
    return None


def prune_candidates(
    candidates: list[tuple[str, Pose]], query_center: np.ndarray, radius: float
) -> list[str]:
    """Keep candidates whose camera center lies within radius (inclusive)."""
    query_center = np.asarray(query_center, dtype=np.float64).reshape(3)
    return [
        fid
        for fid, pose in candidates
        if np.linalg.norm(pose.camera_center() - query_center) <= radius
    ]


def derive_seed(base_seed: int, query_id: str) -> int:
    """Stable per-query RNG seed so results ignore worker scheduling."""
    h = hashlib.sha256(f"{base_seed}:{query_id}".encode()).digest()
    return int.from_bytes(h[:8], "little")


class HybridLocalizer(BaseEstimator):
    """fit on a map database, predict hybrid 6-DoF poses for queries.

    `neural` is any object with localize(ctx) -> NeuralPoseEstimate, or None
    to run the classical branch alone. `matchers` maps source tags to
    callables (query, map_frame, tag) -> MatchSet; the built-in "mnn"
    matcher is used for any tag without an entry.
    """

    def __init__(
        self,
        config: PipelineConfig | None = None,
        neural=None,
        matchers: dict | None = None,
    ):
        self.config = config
        self.neural = neural
        self.matchers = matchers

    def _cfg(self) -> PipelineConfig:
        return self.config if self.config is not None else PipelineConfig()

    def fit(self, db: MapDatabase) -> "HybridLocalizer":
        self.db_ = db
        frames = [db.frames[fid] for fid in sorted(db.frames)]
        self.index_ = RetrievalIndex(default_k=self._cfg().top_k).fit(frames) if frames else None
        return self

    # -- classical branch -----------------------------------------------------

    def _match_one_source(self, query: QueryInput, frame: MapFrame, tag: str) -> MatchSet:
        if self.matchers and tag in self.matchers:
            return self.matchers[tag](query, frame, tag)
        ms = match_mutual_nn(
            query.local_descriptors,
            frame.local_descriptors,
            ratio=self._cfg().mnn_ratio,
            query_id=query.query_id,
            map_id=frame.frame_id,
            source=tag,
        )
        return ms

    def _classical_branch(
        self, query: QueryInput, candidate_ids: list[str], seed: int
    ) -> PnPResult | None:
        cfg = self._cfg()
        if not cfg.matcher_sources or not self.db_.landmarks:
            return None
        corrs = []
        for fid in candidate_ids:
            frame = self.db_.frames[fid]
            sets = [
                normalize_confidences(self._match_one_source(query, frame, tag))
                for tag in cfg.matcher_sources
            ]
            sets = [s for s in sets if s.matches]
            if not sets:
                continue
            fused = fuse_matches(
                sets, list(query.keypoints), list(frame.keypoints), cfg.dedup_radius
            )
            corrs.extend(lift_to_2d3d_with_keypoints(fused, list(query.keypoints), self.db_))
        if len(corrs) < 4:
            return None
        ransac_cfg = RansacConfig(
            reproj_threshold=cfg.ransac.reproj_threshold,
            confidence=cfg.ransac.confidence,
            max_iterations=cfg.ransac.max_iterations,
            min_inliers_success=cfg.ransac.min_inliers_success,
            rng_seed=seed,
        )
        return ransac_pnp(corrs, query.intrinsics, ransac_cfg)

    # -- neural branch ---------------------------------------------------------

    def _neural_context(
        self, query: QueryInput, candidate_ids: list[str], guess: Pose | None
    ) -> LocalizationContext:
        cands = tuple(
            CandidateFrame(
                fid,
                self.db_.frames[fid].pose,
                self.db_.frames[fid].intrinsics,
                self.db_.frames[fid].depth,
            )
            for fid in candidate_ids
        )
        ctx = LocalizationContext(query.query_id, query.intrinsics, cands, query.depth)
        # condition depth in the frame of the best available pose guess;
        # before any estimate exists the top candidate stands in for the query
        anchor = guess if guess is not None else cands[0].pose
        return condition_depth(ctx, anchor, self._cfg().depth_filter)

    # -- orchestration ---------------------------------------------------------

    def localize_query(self, query: QueryInput) -> HybridResult:
        cfg = self._cfg()
        if self.index_ is None or not self.db_.frames:
            return HybridResult(query.query_id, None, None, None, None, None,
                                (), (), failure="empty-map")
        ranked = self.index_.query_topk(query.global_descriptor, cfg.top_k)
        candidate_ids = [fid for fid, _ in ranked]
        seed = derive_seed(cfg.ransac.rng_seed, query.query_id)

        pnp_result = self._classical_branch(query, candidate_ids, seed)

        neural_first = None
        neural_ids = candidate_ids
        if self.neural is not None:
            if cfg.pre_neural_filter and pnp_result is not None:
                cand_poses = [(fid, self.db_.frames[fid].pose) for fid in candidate_ids]
                filtered = prune_candidates(
                    cand_poses, pnp_result.pose.camera_center(), cfg.prune_radius
                )
                if filtered:
                    neural_ids = filtered
            ctx = self._neural_context(query, neural_ids, None)
            neural_first = self.neural.localize(ctx)

        selected = select_hybrid_pose(pnp_result, neural_first, cfg.inlier_gate)
        if selected is None:
            return HybridResult(query.query_id, None, None, pnp_result, neural_first,
                                None, tuple(candidate_ids), (), failure="no-pose")
        hybrid_pose, branch = selected

        pruned: list[str] = []
        neural_rerun = None
        if cfg.enable_pruning:
            cand_poses = [(fid, self.db_.frames[fid].pose) for fid in candidate_ids]
            pruned = prune_candidates(
                cand_poses, hybrid_pose.camera_center(), cfg.prune_radius
            )
            if (
                self.neural is not None
                and pruned
                and pruned != neural_ids
            ):
                ctx = self._neural_context(query, pruned, hybrid_pose)
                neural_rerun = self.neural.localize(ctx)

        if branch == "pnp":
            final_pose = pnp_result.pose
        elif neural_rerun is not None and neural_rerun.valid:
            final_pose = neural_rerun.pose
            branch = "neural_rerun"
        else:
            final_pose = neural_first.pose

        return HybridResult(
            query.query_id,
            final_pose,
            branch,
            pnp_result,
            neural_first,
            neural_rerun,
            tuple(candidate_ids),
            tuple(pruned),
        )

    def predict(self, queries: list[QueryInput], workers: int = 1) -> list[HybridResult]:
        """Localize queries; output is sorted by query_id for any worker count."""
        if workers <= 1:
            results = [self.localize_query(q) for q in queries]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(self.localize_query, queries))
        return sorted(results, key=lambda r: r.query_id)
