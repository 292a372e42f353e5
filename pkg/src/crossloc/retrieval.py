"""Shared top-k retrieval over unit-norm global descriptors.

Exact brute-force cosine search; exactness keeps both branches testable and
the candidate sets at this scale are small. Tie-breaking is by ascending
frame_id for determinism.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from crossloc.mapstore import MapFrame


class RetrievalError(ValueError):
    pass


class RetrievalIndex(BaseEstimator):
    """Brute-force cosine-similarity index with a fit/query estimator surface."""

    def __init__(self, default_k: int = 100):
        self.default_k = default_k

    def fit(self, frames: list[MapFrame]) -> "RetrievalIndex":
        if not frames:
            raise RetrievalError("cannot build an index from zero frames")
        dims = {f.global_descriptor.shape[0] for f in frames}
        if len(dims) != 1:
            raise RetrievalError(f"mixed global descriptor dimensions: {sorted(dims)}")
        ids = [f.frame_id for f in frames]
        if len(set(ids)) != len(ids):
            raise RetrievalError("duplicate frame_ids in index input")
        mat = np.stack([f.global_descriptor.astype(np.float64) for f in frames])
        norms = np.linalg.norm(mat, axis=1)
        if np.any(norms < 1e-12):
            raise RetrievalError("zero global descriptor vector")
        self.descriptors_ = mat / norms[:, None]
        self.frame_ids_ = list(ids)
        return self

    @property
    def dim(self) -> int:
        return self.descriptors_.shape[1]

    def __len__(self) -> int:
        return len(self.frame_ids_)

    def query_topk(self, q: np.ndarray, k: int | None = None) -> list[tuple[str, float]]:
        """Ranked (frame_id, cosine score), descending; ties by frame_id."""
        if not hasattr(self, "descriptors_"):
            raise RetrievalError("index is not fitted")
        k = self.default_k if k is None else k
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise RetrievalError(
                f"query dimension {q.shape[0]} != index dimension {self.dim}"
            )
        qn = np.linalg.norm(q)
        if qn < 1e-12:
            raise RetrievalError("zero query vector")
        scores = self.descriptors_ @ (q / qn)
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], self.frame_ids_[i]))
        return [(self.frame_ids_[i], float(scores[i])) for i in order[:k]]


def index_build(frames: list[MapFrame], default_k: int = 100) -> RetrievalIndex:
    return RetrievalIndex(default_k=default_k).fit(frames)
