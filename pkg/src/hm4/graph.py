"""Topological map: a sparse row-stochastic transition matrix over places.

Rows are kept as ``{col: prob}`` dicts (cheap appends and edge inserts) with a
companion inbound list per place for column gathers. CSR/CSC views for the
filters are built lazily and dropped on every mutation.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import FormatError, InvalidArgumentError

MAP_MAGIC = b"HM4E"
MAP_VERSION = 1
EDGE_BYTES = 12  # u32 column + f64 probability


class TransitionMatrix:
    def __init__(self, rows=None):
        self.rows: list[dict[int, float]] = []
        self.inbound: list[set[int]] = []
        self._csr = None
        self._csc = None
        for r in rows or []:
            self._push_row(dict(r))

    @property
    def N(self) -> int:
        return len(self.rows)

    def __len__(self):
        return len(self.rows)

    @property
    def nnz(self) -> int:
        return sum(len(r) for r in self.rows)

    @property
    def nbytes(self) -> int:
        return EDGE_BYTES * self.nnz + 4 * self.N

    def _push_row(self, row):
        i = len(self.rows)
        self.rows.append(row)
        while len(self.inbound) <= i:
            self.inbound.append(set())
        for j in row:
            while j >= len(self.inbound):
                self.inbound.append(set())
            self.inbound[j].add(i)

    def _touch(self):
        self._csr = None
        self._csc = None

    def __getitem__(self, ij):
        i, j = ij
        return self.rows[i].get(j, 0.0)

    def set(self, i: int, j: int, value: float) -> None:
        if value > 0:
            self.rows[i][j] = float(value)
            self.inbound[j].add(i)
        else:
            self.rows[i].pop(j, None)
            self.inbound[j].discard(i)
        self._touch()

    def normalize_rows(self, rows) -> None:
        for i in rows:
            row = self.rows[i]
            s = math.fsum(row.values())
            if s > 0:
                for j in row:
                    row[j] /= s
        self._touch()

    def degree(self, i: int) -> int:
        return len(self.rows[i])

    def row_sums(self) -> np.ndarray:
        return np.array([math.fsum(r.values()) for r in self.rows])

    def column(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        src = np.array(sorted(self.inbound[j]), dtype=np.int64)
        vals = np.array([self.rows[i][j] for i in src], dtype=np.float64)
        return src, vals

    def tocsr(self) -> sparse.csr_matrix:
        if self._csr is None:
            indptr = np.zeros(self.N + 1, dtype=np.int64)
            np.cumsum([len(r) for r in self.rows], out=indptr[1:])
            cols = np.empty(indptr[-1], dtype=np.int64)
            vals = np.empty(indptr[-1], dtype=np.float64)
            for i, r in enumerate(self.rows):
                if r:
                    ks = sorted(r)
                    cols[indptr[i]:indptr[i + 1]] = ks
                    vals[indptr[i]:indptr[i + 1]] = [r[k] for k in ks]
            self._csr = sparse.csr_matrix((vals, cols, indptr), shape=(self.N, self.N))
        return self._csr

    def tocsc(self) -> sparse.csc_matrix:
        if self._csc is None:
            self._csc = self.tocsr().tocsc()
        return self._csc

    def toarray(self) -> np.ndarray:
        return self.tocsr().toarray()

    def copy(self) -> "TransitionMatrix":
        return TransitionMatrix(self.rows)

    @classmethod
    def from_dense(cls, a) -> "TransitionMatrix":
        a = np.asarray(a, dtype=np.float64)
        return cls([{int(j): float(a[i, j]) for j in np.flatnonzero(a[i])} for i in range(a.shape[0])])


def init_sequence_transitions(T: int, V_max: int = 10, delta: float = 3.0,
                              exponent_sign: int = -1) -> TransitionMatrix:
    """Forward-only banded transitions for a freshly recorded sequence.

    Row ``i`` gets weight ``exp(sign * (j - i)**2 / delta**2)`` for
    ``0 <= j - i <= V_max`` (clipped at the sequence end), normalized to 1.
    ``exponent_sign=+1`` gives the growing-weight variant.
    """
    if T < 1 or V_max < 0 or delta <= 0:
        raise InvalidArgumentError("need T >= 1, V_max >= 0, delta > 0")
    if exponent_sign not in (-1, 1):
        raise InvalidArgumentError("exponent_sign must be -1 or +1")
    steps = np.arange(V_max + 1)
    w = np.exp(exponent_sign * steps.astype(np.float64) ** 2 / delta**2)
    rows = []
    for i in range(T):
        n = min(V_max + 1, T - i)
        ww = w[:n] / math.fsum(w[:n])
        rows.append({i + int(s): float(ww[s]) for s in range(n)})
    return TransitionMatrix(rows)


def append_sequence(E: TransitionMatrix, EQ: TransitionMatrix) -> TransitionMatrix:
    """Block-diagonal growth: ``EQ``'s places become ids ``N .. N + T - 1``.

    Mutates and returns ``E``; existing ids are unchanged.
    """
    off = E.N
    for r in EQ.rows:
        E._push_row({off + j: v for j, v in r.items()})
    E._touch()
    return E


def link_matches(E: TransitionMatrix, matches, n_before: int) -> TransitionMatrix:
    """Add loop-closure edges for a just-appended sequence.

    ``matches`` holds ``(t, i)`` pairs: frame ``t`` (0-based) of the sequence
    appended at offset ``n_before`` was localized to place ``i``. Each pair sets
    ``E(t + n_before, i)`` to the pre-update diagonal of the new place and
    ``E(i, t + n_before)`` to the pre-update diagonal of ``i``; touched rows
    are renormalized. Mutates and returns ``E``.
    """
    matches = [(int(t), int(i)) for t, i in matches]
    if not matches:
        return E
    N = E.N
    for t, i in matches:
        if not (0 <= t + n_before < N) or not (0 <= i < N):
            raise InvalidArgumentError(f"match ({t}, {i}) out of range for N={N}")
    diag = {}
    for t, i in matches:
        for p in (t + n_before, i):
            diag.setdefault(p, E[p, p])
    touched = set()
    for t, i in matches:
        a = t + n_before
        if a == i:
            continue
        for src, dst, v in ((a, i, diag[a]), (i, a, diag[i])):
            if v > 0:
                E.rows[src][dst] = v
                E.inbound[dst].add(src)
                touched.add(src)
    E.normalize_rows(sorted(touched))
    return E


def support_place(E: TransitionMatrix, members) -> int:
    """Member with the most outgoing edges; ties go to the smallest id."""
    members = sorted(int(m) for m in members)
    if not members:
        raise InvalidArgumentError("empty cluster has no support place")
    deg = [E.degree(m) for m in members]
    return members[int(np.argmax(deg))]


@dataclass
class SubMap:
    support_places: np.ndarray  # (K,)
    columns: sparse.csc_matrix  # (N, K): column k == E[:, support_places[k]]

    @property
    def K(self) -> int:
        return len(self.support_places)

    @property
    def nnz(self) -> int:
        return int(self.columns.nnz)

    @property
    def nbytes(self) -> int:
        return EDGE_BYTES * self.nnz + 4 * self.K

    def predict(self, p) -> np.ndarray:
        """``E_smᵀ p``: prior mass flowing into each support place."""
        if getattr(self, "_rows", None) is None:
            self._rows = sparse.csr_matrix(self.columns.T)
        return self._rows @ p


def build_submap(E: TransitionMatrix, clusters) -> SubMap:
    """Support place per cluster and the matching columns of ``E``.

    ``clusters`` is a :class:`~hm4.polyvlad.ClusterModel` or a plain
    assignment array (cluster id per place).
    """
    assign = np.asarray(getattr(clusters, "assignments", clusters))
    K = getattr(clusters, "K", int(assign.max()) + 1 if len(assign) else 0)
    if len(assign) > E.N:
        raise InvalidArgumentError("cluster assignments cover more places than the map")
    order = np.argsort(assign, kind="stable")
    bounds = np.searchsorted(assign[order], np.arange(K + 1))
    support = np.empty(K, dtype=np.int64)
    for k in range(K):
        members = order[bounds[k]:bounds[k + 1]]
        if len(members) == 0:
            raise InvalidArgumentError(f"cluster {k} is empty")
        support[k] = support_place(E, members)
    return SubMap(support, E.tocsc()[:, support])


# -- HM4E files --------------------------------------------------------------

def write_map_file(path, E: TransitionMatrix) -> None:
    """Write atomically via a temporary file and rename."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAP_MAGIC)
        fh.write(struct.pack("<HQ", MAP_VERSION, E.N))
        for r in E.rows:
            ks = sorted(r)
            rec = np.empty(len(ks), dtype=[("col", "<u4"), ("prob", "<f8")])
            rec["col"] = ks
            rec["prob"] = [r[k] for k in ks]
            fh.write(struct.pack("<I", len(ks)))
            fh.write(rec.tobytes())
    os.replace(tmp, path)


def read_map_file(path) -> TransitionMatrix:
    buf = Path(path).read_bytes()
    if len(buf) < 14:
        raise FormatError("truncated map header", len(buf))
    if buf[:4] != MAP_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    version, N = struct.unpack_from("<HQ", buf, 4)
    if version != MAP_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    pos = 14
    rows = []
    dt = np.dtype([("col", "<u4"), ("prob", "<f8")])
    for i in range(N):
        if pos + 4 > len(buf):
            raise FormatError(f"truncated row count for row {i}", pos)
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + n * dt.itemsize > len(buf):
            raise FormatError(f"truncated edges for row {i}", pos)
        rec = np.frombuffer(buf, dtype=dt, count=n, offset=pos)
        if n and int(rec["col"].max()) >= N:
            raise FormatError(f"row {i} references column beyond N={N}", pos)
        rows.append(dict(zip(rec["col"].tolist(), rec["prob"].tolist())))
        pos += n * dt.itemsize
    if pos != len(buf):
        raise FormatError("trailing bytes after last row", pos)
    return TransitionMatrix(rows)
