"""Inverted index over centroid PolyCodes.

Bucket ``2 * feat_dim * m + b`` (0-based dimension ``m``) lists every centroid
whose code at dimension ``m`` is ``b``. Scoring a query visits one bucket per
dimension, so on uniformly spread codes it touches ``K * D / (2 * feat_dim)``
entries instead of ``K * D``.

Buckets are stored CSR-style: ``ids[offsets[w]:offsets[w + 1]]`` is bucket
``w``, ids ascending within each bucket.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import InvalidArgumentError


@dataclass
class InvertedIndex:
    offsets: np.ndarray  # (W + 1,) int64
    ids: np.ndarray  # (K * D,) int32
    codes: np.ndarray  # (K, D) indexed centroids
    feat_dim: int

    @property
    def K(self) -> int:
        return self.codes.shape[0]

    @property
    def D(self) -> int:
        return self.codes.shape[1]

    @property
    def W(self) -> int:
        return 2 * self.feat_dim * self.D

    @property
    def n_entries(self) -> int:
        return int(self.ids.shape[0])

    @property
    def nbytes(self) -> int:
        """Resident size: one u32 per entry plus one u32 bucket offset."""
        return 4 * (self.n_entries + self.W + 1)

    def bucket(self, w: int) -> np.ndarray:
        return self.ids[self.offsets[w]:self.offsets[w + 1]]

    def query_buckets(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.int64)
        return 2 * self.feat_dim * np.arange(self.D, dtype=np.int64) + q


def _bucket_keys(codes, feat_dim):
    K, D = codes.shape
    return (2 * feat_dim * np.arange(D, dtype=np.int64))[None, :] + codes.astype(np.int64)


def build_index(centroids, feat_dim: int) -> InvertedIndex:
    if not isinstance(centroids, np.ndarray):
        lens = {len(c) for c in centroids}
        if len(lens) > 1:
            raise InvalidArgumentError(f"heterogeneous code lengths {sorted(lens)}")
    centroids = np.asarray(centroids)
    if centroids.ndim != 2:
        raise InvalidArgumentError("centroids must be a (K, D) array")
    K, D = centroids.shape
    if K and (centroids.min() < 0 or centroids.max() >= 2 * feat_dim):
        raise InvalidArgumentError("centroid code out of range")
    W = 2 * feat_dim * D
    buckets = _bucket_keys(centroids, feat_dim).ravel()
    # rows are visited in id order, so a stable sort keeps ids ascending per bucket
    order = np.argsort(buckets, kind="stable")
    ids = (order // D).astype(np.int32) if D else np.zeros(0, np.int32)
    counts = np.bincount(buckets, minlength=W)
    offsets = np.zeros(W + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return InvertedIndex(offsets, ids, centroids.copy(), feat_dim)


def score_query(index: InvertedIndex, q) -> np.ndarray:
    """Agreement count ``S(q, B_k)`` for every centroid."""
    q = np.asarray(q)
    if q.ndim != 1 or q.shape[0] != index.D:
        raise InvalidArgumentError(f"query length {q.shape} != index D={index.D}")
    return _kernels.score_buckets(index.offsets, index.ids, index.query_buckets(q), index.K)


def visit_count(index: InvertedIndex, q) -> int:
    """Bucket entries touched by :func:`score_query` for ``q``."""
    b = index.query_buckets(q)
    return int((index.offsets[b + 1] - index.offsets[b]).sum())


def distances_from_scores(scores, D: int) -> np.ndarray:
    return 1.0 - np.asarray(scores, dtype=np.float64) / D


def rebuild_on_centroid_change(index: InvertedIndex, changed) -> InvertedIndex:
    """Re-file changed centroids, touching only the dimensions that moved.

    ``changed`` maps cluster id to its new code (a dict or ``(k, code)`` pairs).
    Entries are addressed by the global sort key ``bucket * K + id``, which is
    already ascending in storage order, so removals and insertions are
    positional splices rather than a re-sort.
    """
    items = changed.items() if isinstance(changed, dict) else changed
    K, D, fd = index.K, index.D, index.feat_dim
    codes = index.codes.copy()
    remove_keys, insert_keys = [], []
    for k, new in items:
        k = int(k)
        if not 0 <= k < K:
            raise InvalidArgumentError(f"unknown cluster id {k}")
        new = np.asarray(new)
        if new.shape != (D,):
            raise InvalidArgumentError(f"new code for cluster {k} has wrong length")
        if new.min() < 0 or new.max() >= 2 * fd:
            raise InvalidArgumentError("centroid code out of range")
        dims = np.flatnonzero(codes[k] != new)
        base = 2 * fd * dims.astype(np.int64)
        remove_keys.append((base + codes[k, dims]) * K + k)
        insert_keys.append((base + new[dims]) * K + k)
        codes[k] = new
    if not remove_keys:
        return InvertedIndex(index.offsets.copy(), index.ids.copy(), codes, fd)

    W = index.W
    keys = np.repeat(np.arange(W, dtype=np.int64), np.diff(index.offsets)) * K + index.ids
    rk = np.sort(np.concatenate(remove_keys))
    ik = np.sort(np.concatenate(insert_keys))
    keys = np.delete(keys, np.searchsorted(keys, rk))
    keys = np.insert(keys, np.searchsorted(keys, ik), ik)
    offsets = np.searchsorted(keys, np.arange(W + 1, dtype=np.int64) * K).astype(np.int64)
    return InvertedIndex(offsets, (keys % K).astype(np.int32), codes, fd)
