"""Local feature matching and multi-source match fusion.

Fusion combines match sets from several matchers for one query-map pair:
confidences are min-max normalized per source, duplicate correspondences
(both endpoints within a pixel radius) are merged with a noisy-or
confidence, and the result is made one-to-one per side greedily.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

if TYPE_CHECKING:
    from crossloc.mapstore import MapDatabase


class MatchingError(ValueError):
    pass


@dataclass(frozen=True)
class Keypoint:
    u: float
    v: float
    score: float = 1.0


@dataclass(frozen=True)
class Match:
    query_idx: int
    map_idx: int
    confidence: float
    source: str = "mnn"


@dataclass(frozen=True)
class MatchSet:
    query_id: str
    map_id: str
    matches: tuple[Match, ...] = ()

    def __len__(self) -> int:
        return len(self.matches)


def match_mutual_nn(
    desc_a: np.ndarray,
    desc_b: np.ndarray,
    ratio: float = 0.9,
    query_id: str = "",
    map_id: str = "",
    source: str = "mnn",
) -> MatchSet:
    """Mutual nearest neighbors under L2 with a Lowe ratio test.

    Confidence is 1 - d1/d2 (first vs second neighbor distance), clamped
    to [0, 1]; identical descriptors get confidence 1.
    """
    desc_a = np.asarray(desc_a, dtype=np.float64)
    desc_b = np.asarray(desc_b, dtype=np.float64)
    if desc_a.size == 0 or desc_b.size == 0:
        return MatchSet(query_id, map_id, ())
    if desc_a.shape[1] != desc_b.shape[1]:
        raise MatchingError("descriptor dimensions differ")

    d = cdist(desc_a, desc_b)
    nn_ab = np.argmin(d, axis=1)
    nn_ba = np.argmin(d, axis=0)

    matches = []
    for i, j in enumerate(nn_ab):
        if nn_ba[j] != i:
            continue
        d1 = d[i, j]
        if d.shape[1] >= 2:
            row = d[i].copy()
            row[j] = np.inf
            d2 = row.min()
            if d2 > 0 and d1 > ratio * d2:
                continue
            conf = 1.0 if d2 <= 0 else float(np.clip(1.0 - d1 / d2, 0.0, 1.0))
        else:
            conf = 1.0 if d1 == 0 else 0.5
        matches.append(Match(i, int(j), conf, source))
    return MatchSet(query_id, map_id, tuple(matches))


def normalize_confidences(ms: MatchSet) -> MatchSet:
    """Min-max rescale confidences to [0, 1]; constant sets map to all-1."""
    if not ms.matches:
        return ms
    by_source: dict[str, list[int]] = {}
    for i, m in enumerate(ms.matches):
        by_source.setdefault(m.source, []).append(i)
    scaled = np.empty(len(ms.matches))
    for idxs in by_source.values():
        confs = np.array([ms.matches[i].confidence for i in idxs])
        lo, hi = confs.min(), confs.max()
        if hi - lo < 1e-12:
            scaled[idxs] = 1.0
        else:
            scaled[idxs] = (confs - lo) / (hi - lo)
    return replace(
        ms,
        matches=tuple(
            replace(m, confidence=float(c)) for m, c in zip(ms.matches, scaled)
        ),
    )


def _sort_key(m: Match) -> tuple:
    return (-m.confidence, m.query_idx, m.map_idx)


def fuse_matches(
    sets: list[MatchSet],
    query_keypoints: list[Keypoint],
    map_keypoints: list[Keypoint],
    dedup_radius: float = 3.0,
) -> MatchSet:
    """Confidence-weighted union of match sets for one query-map pair.

    Two matches are duplicates when both endpoint keypoints lie within
    dedup_radius of each other; duplicate clusters merge via noisy-or over
    sources (1 - prod(1 - c)), keeping the strongest member's endpoints.
    The final set is one-to-one per side, greedily by descending fused
    confidence with deterministic tie-breaking.
    """
    if not sets:
        raise MatchingError("no match sets to fuse")
    qid, mid = sets[0].query_id, sets[0].map_id
    for s in sets[1:]:
        if s.query_id != qid or s.map_id != mid:
            raise MatchingError("match sets reference different frame pairs")

    all_matches = [m for s in sets for m in s.matches]
    if not all_matches:
        return MatchSet(qid, mid, ())

    q_uv = np.array([[query_keypoints[m.query_idx].u, query_keypoints[m.query_idx].v]
                     for m in all_matches])
    m_uv = np.array([[map_keypoints[m.map_idx].u, map_keypoints[m.map_idx].v]
                     for m in all_matches])

    # duplicate clusters = connected components of the "both endpoints close" graph
    n = len(all_matches)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    q_tree = cKDTree(q_uv)
    m_tree = cKDTree(m_uv)
    q_pairs = q_tree.query_pairs(dedup_radius, output_type="set")
    m_pairs = m_tree.query_pairs(dedup_radius, output_type="set")
    for a, b in q_pairs & m_pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra
    # identical index pairs across sources always cluster
    by_pair: dict[tuple[int, int], int] = {}
    for i, m in enumerate(all_matches):
        key = (m.query_idx, m.map_idx)
        if key in by_pair:
            ra, rb = find(by_pair[key]), find(i)
            if ra != rb:
                parent[rb] = ra
        else:
            by_pair[key] = i

    clusters: dict[int, list[int]] = {}
    for i in range(n):
        clusters.setdefault(find(i), []).append(i)

    fused = []
    for members in clusters.values():
        # one vote per source: max confidence, then noisy-or across sources
        per_source: dict[str, float] = {}
        for i in members:
            m = all_matches[i]
            per_source[m.source] = max(per_source.get(m.source, 0.0), m.confidence)
        # sorted source order keeps the product bit-identical under input permutation
        conf = 1.0
        for _, c in sorted(per_source.items()):
            conf *= 1.0 - c
        conf = 1.0 - conf
        rep = min((all_matches[i] for i in members), key=_sort_key)
        fused.append(Match(rep.query_idx, rep.map_idx, conf, rep.source))

    # greedy one-to-one by descending confidence, deterministic tie-break
    fused.sort(key=_sort_key)
    used_q: set[int] = set()
    used_m: set[int] = set()
    kept = []
    for m in fused:
        if m.query_idx in used_q or m.map_idx in used_m:
            continue
        used_q.add(m.query_idx)
        used_m.add(m.map_idx)
        kept.append(m)
    return MatchSet(qid, mid, tuple(kept))


@dataclass(frozen=True)
class Correspondence2D3D:
    pixel: np.ndarray
    point: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0:
            raise MatchingError(f"weight must lie in [0, 1], got {self.weight}")
        px = np.asarray(self.pixel, dtype=np.float64).reshape(2)
        pt = np.asarray(self.point, dtype=np.float64).reshape(3)
        object.__setattr__(self, "pixel", px)
        object.__setattr__(self, "point", pt)
        px.setflags(write=False)
        pt.setflags(write=False)


def lift_to_2d3d(ms: MatchSet, db: "MapDatabase") -> list[Correspondence2D3D]:
    """Turn 2D-2D matches into (query pixel, landmark point) pairs.

    Matches whose map keypoint observes no landmark are dropped; at most one
    correspondence per query keypoint is emitted.
    """
    if ms.map_id not in db.frames:
        raise MatchingError(f"unknown map frame {ms.map_id!r}")
    qframe = db.frames.get(ms.query_id)
    corrs = []
    seen_q: set[int] = set()
    for m in sorted(ms.matches, key=_sort_key):
        if m.query_idx in seen_q:
            continue
        lm_id = db.observation_index.get((ms.map_id, m.map_idx))
        if lm_id is None:
            continue
        if qframe is not None:
            kp = qframe.keypoints[m.query_idx]
            pixel = np.array([kp.u, kp.v])
        else:
            raise MatchingError(
                "query frame not in database; use lift_to_2d3d_with_keypoints"
            )
        seen_q.add(m.query_idx)
        corrs.append(Correspondence2D3D(pixel, db.landmarks[lm_id].point, m.confidence))
    return corrs


def lift_to_2d3d_with_keypoints(
    ms: MatchSet, query_keypoints: list[Keypoint], db: "MapDatabase"
) -> list[Correspondence2D3D]:
    """Same as lift_to_2d3d, for queries that are not map frames."""
    if ms.map_id not in db.frames:
        raise MatchingError(f"unknown map frame {ms.map_id!r}")
    corrs = []
    seen_q: set[int] = set()
    for m in sorted(ms.matches, key=_sort_key):
        if m.query_idx in seen_q:
            continue
        lm_id = db.observation_index.get((ms.map_id, m.map_idx))
        if lm_id is None:
            continue
        kp = query_keypoints[m.query_idx]
        seen_q.add(m.query_idx)
        corrs.append(
            Correspondence2D3D(np.array([kp.u, kp.v]), db.landmarks[lm_id].point,
                               m.confidence)
        )
    return corrs
