"""Place-recognition HMM: full-database filter and the two-tier HM4 step.

Places are 0-based. Likelihoods ``exp(-d / sigma)`` are evaluated after
shifting every distance of a step by the step's smallest distance; the
common factor cancels in normalization and keeps the best match at 1.0
instead of underflowing at small bandwidths.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import InvalidArgumentError, LostStateError
from .graph import TransitionMatrix
from .invindex import distances_from_scores, score_query
from .polyvlad import jaccard_distances
from .store import ActiveMemory, PassiveStore, TransferLog, am_sync


@dataclass
class ObservationParams:
    sigma: float = 0.03
    zeta: float = 0.00015
    cap: int = 100

    def __post_init__(self):
        if self.sigma <= 0:
            raise InvalidArgumentError("sigma must be > 0")
        if not 0.0 <= self.zeta <= 1.0:
            raise InvalidArgumentError("zeta must lie in [0, 1]")
        if self.cap < 1:
            raise InvalidArgumentError("cap must be >= 1")


@dataclass
class PromisingSet:
    ids: np.ndarray  # ascending place ids
    primary: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    expanded: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __len__(self):
        return len(self.ids)

    @property
    def M(self) -> int:
        return len(self.ids)


@dataclass
class TieredState:
    """Everything one inference stream needs: PS handle, AM, transfer log."""

    store: PassiveStore
    am: ActiveMemory
    log: TransferLog = field(default_factory=TransferLog)
    seq: int = 0
    t: int = 0


def observation_likelihood(dist, sigma: float):
    if sigma <= 0:
        raise InvalidArgumentError("sigma must be > 0")
    dist = np.asarray(dist, dtype=np.float64)
    if np.any(dist < 0):
        raise InvalidArgumentError("distances must be >= 0")
    out = np.exp(-dist / sigma)
    return float(out) if out.ndim == 0 else out


def shifted_likelihoods(dists, sigma: float, shift: float):
    return np.exp(-(np.asarray(dists, dtype=np.float64) - shift) / sigma)


def _csr(E):
    if isinstance(E, TransitionMatrix):
        return E.tocsr()
    if sparse.issparse(E):
        return E.tocsr()
    return sparse.csr_matrix(np.asarray(E, dtype=np.float64))


def _gather(indptr, rows):
    """Flat positions of every stored entry in the given compressed rows."""
    starts = indptr[rows]
    sizes = indptr[rows + 1] - starts
    total = int(sizes.sum())
    run_start = np.repeat(starts - np.cumsum(sizes) + sizes, sizes)
    return run_start + np.arange(total, dtype=np.int64), sizes


@dataclass
class ActiveColumns:
    """Columns of ``E`` at the promising places, kept as raw CSC arrays."""

    ids: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    N: int

    @property
    def nnz(self) -> int:
        return len(self.data)

    def predict(self, p_prev) -> np.ndarray:
        """``E_acᵀ p_prev``: inbound prior mass of each promising place."""
        col = np.repeat(np.arange(len(self.ids)), np.diff(self.indptr))
        return np.bincount(col, weights=self.data * p_prev[self.indices], minlength=len(self.ids))

    def tocsc(self) -> sparse.csc_matrix:
        return sparse.csc_matrix((self.data, self.indices, self.indptr), shape=(self.N, len(self.ids)))


def _active_columns(E, ids) -> ActiveColumns:
    csc = E.tocsc() if isinstance(E, TransitionMatrix) else sparse.csc_matrix(E)
    pos, sizes = _gather(csc.indptr, ids)
    indptr = np.zeros(len(ids) + 1, dtype=np.int64)
    np.cumsum(sizes, out=indptr[1:])
    return ActiveColumns(ids, indptr, csc.indices[pos], csc.data[pos], csc.shape[0])


def _normalize(q):
    s = q.sum()
    if not np.isfinite(s) or s <= 0:
        raise LostStateError("posterior vanished on every place")
    return q / s


def baseline_filter_step(E, o_t, p_prev) -> np.ndarray:
    """One full-database recursion: ``p_t ∝ o_t ∘ (Eᵀ p_prev)``."""
    csr = _csr(E)
    o_t = np.asarray(o_t, dtype=np.float64)
    p_prev = np.asarray(p_prev, dtype=np.float64)
    if not (csr.shape[0] == csr.shape[1] == len(o_t) == len(p_prev)):
        raise InvalidArgumentError("E, o_t and p_prev dimensions disagree")
    return _normalize(o_t * (csr.T @ p_prev))


def baseline_observation(codes, q_code, sigma: float) -> np.ndarray:
    """Likelihood of ``q_code`` at every stored place (max-shifted)."""
    d = jaccard_distances(codes, q_code)
    return shifted_likelihoods(d, sigma, d.min())


def map_decision(p) -> int:
    """Index of the largest posterior; the lowest index wins ties."""
    return int(np.argmax(np.asarray(p)))


def promising_set(p_prev, E, params: ObservationParams) -> PromisingSet:
    """Places above the mass threshold plus their map successors, capped.

    When nothing reaches the threshold the single most likely place is used.
    Trimming to ``params.cap`` keeps the members with the most prior mass.
    """
    p_prev = np.asarray(p_prev, dtype=np.float64)
    primary = np.flatnonzero(p_prev >= params.zeta)
    if len(primary) == 0:
        primary = np.array([map_decision(p_prev)], dtype=np.int64)
    csr = _csr(E)
    if len(primary) == csr.shape[0]:
        succ = np.unique(csr.indices)
    else:
        succ = np.unique(csr.indices[_gather(csr.indptr, primary)[0]])
    ids = np.union1d(primary, succ).astype(np.int64)
    if len(ids) > params.cap:
        order = np.lexsort((ids, -p_prev[ids]))[: params.cap]
        ids = np.sort(ids[order])
    return PromisingSet(ids, primary.astype(np.int64), np.setdiff1d(succ, primary).astype(np.int64))


def active_transition(E, P) -> sparse.csc_matrix:
    """Columns of ``E`` at the promising places, shape ``(N, |P|)``."""
    ids = np.asarray(getattr(P, "ids", P), dtype=np.int64)
    return _active_columns(E, ids).tocsc()


def _background(am: ActiveMemory, q_code):
    scores = score_query(am.index, q_code)
    return distances_from_scores(scores, am.index.D)


def first_frame_step(q_code, state: TieredState, params: ObservationParams) -> np.ndarray:
    """Posterior from the background observation alone (uniform prior).

    Also clears the resident promising codes, as a new sequence starts
    with an empty promising set.
    """
    am = state.am
    rec = am_sync(am, np.zeros(0, np.int64), state.store, state.seq, state.t)
    am.eac = None
    d_bg = _background(am, q_code)
    o_bg = shifted_likelihoods(d_bg, params.sigma, d_bg.min())
    p = _normalize(o_bg[am.labels])
    rec.am_bytes = am.nbytes
    state.log.append(rec)
    return p


def hm4_step(p_prev, q_code, state: TieredState, params: ObservationParams):
    """Two-tier recursion over promising places and the coarse model.

    Returns ``(belief, decision, promising_set)``. Promising places get the
    exact likelihood and their true inbound transitions; every other place
    inherits its cluster's centroid likelihood and the inbound transitions
    of the cluster's support place.
    """
    am, store = state.am, state.store
    E = store.E
    p_prev = np.asarray(p_prev, dtype=np.float64)
    if len(p_prev) != E.N or len(am.labels) != E.N:
        raise InvalidArgumentError("belief, labels and map disagree on N")
    P = promising_set(p_prev, E, params)
    eac = _active_columns(E, P.ids)
    am.eac = eac
    rec = am_sync(am, P, store, state.seq, state.t)

    d_ac = jaccard_distances(am.resident_codes, q_code)
    d_bg = _background(am, q_code)
    shift = min(d_ac.min(), d_bg.min())
    o_ac = shifted_likelihoods(d_ac, params.sigma, shift)
    o_bg = shifted_likelihoods(d_bg, params.sigma, shift)

    bg = o_bg * am.submap.predict(p_prev)
    q = bg[am.labels]
    q[P.ids] = o_ac * eac.predict(p_prev)
    state.log.append(rec)
    p = _normalize(q)
    return p, map_decision(p), P
