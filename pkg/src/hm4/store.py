"""Two-tier memory: a disk-backed passive store and a bounded active memory.

The passive store (PS) keeps every PolyCode in ``codes.hm4c`` as fixed-width
records, so any record is one offset-computed read. The topological map is
held by the PS object and persisted to ``map.hm4e``; the coarse model lives
in ``centroids.hm4c``, ``submap.hm4e`` and ``meta.json``.

The active memory (AM) holds only the coarse model, its inverted index, the
codes of the current promising places and the current active transition
columns. Byte accounting uses packed sizes, not numpy buffer sizes.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from . import graph, polyvlad
from .errors import InvalidArgumentError, NotFoundError, StorageError
from .invindex import InvertedIndex, build_index, rebuild_on_centroid_change

CODES_FILE = "codes.hm4c"
MAP_FILE = "map.hm4e"
CENTROIDS_FILE = "centroids.hm4c"
SUBMAP_FILE = "submap.hm4e"
META_FILE = "meta.json"
LABELS_FILE = "labels.u32"


class PassiveStore:
    """Append-only code records plus the full map, rooted at ``directory``."""

    def __init__(self, directory, read_delay_s: float = 0.0):
        self.directory = Path(directory)
        self.read_delay_s = read_delay_s
        try:
            meta = json.loads((self.directory / META_FILE).read_text())
            with open(self.directory / CODES_FILE, "rb") as fh:
                hdr = polyvlad.parse_code_header(fh.read(polyvlad.CODE_HEADER_SIZE))
        except OSError as exc:
            raise StorageError(f"cannot open passive store at {self.directory}: {exc}") from exc
        self.meta = meta
        self.feat_dim, self.L, self.M, self.D = hdr.feat_dim, hdr.L, hdr.M, hdr.D
        self.count = hdr.count
        self.row_bytes = hdr.row_bytes
        self._fd = os.open(self.directory / CODES_FILE, os.O_RDWR)
        map_path = self.directory / MAP_FILE
        self.E = graph.read_map_file(map_path) if map_path.exists() else graph.TransitionMatrix()
        self.reads = 0
        self.bytes_read = 0

    @classmethod
    def create(cls, directory, feat_dim: int, L: int, M: int, read_delay_s: float = 0.0,
               params: dict | None = None) -> "PassiveStore":
        directory = Path(directory)
        try:
            directory.mkdir(parents=True, exist_ok=True)
            polyvlad.write_code_file(directory / CODES_FILE, np.zeros((0, L * M), np.uint8), feat_dim, L, M)
            meta = {"feat_dim": feat_dim, "L": L, "M": M, "D": L * M, "K": 0,
                    "params": params or {}, "sequences": [], "support_places": []}
            _write_json(directory / META_FILE, meta)
            for stale in (MAP_FILE, CENTROIDS_FILE, SUBMAP_FILE, LABELS_FILE):
                (directory / stale).unlink(missing_ok=True)
        except OSError as exc:
            raise StorageError(f"cannot create passive store at {directory}: {exc}") from exc
        return cls(directory, read_delay_s)

    def close(self):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def code_bytes(self) -> int:
        return self.row_bytes

    @property
    def nbytes(self) -> int:
        """Bytes held in PS: packed codes plus the map."""
        return self.count * self.row_bytes + self.E.nbytes

    @property
    def sequences(self) -> list[dict]:
        return self.meta["sequences"]

    # -- codes -------------------------------------------------------------

    def put_sequence(self, codes, name: str | None = None) -> range:
        codes = np.atleast_2d(np.asarray(codes))
        if codes.shape[1] != self.D:
            raise InvalidArgumentError(f"code length {codes.shape[1]} != store D={self.D}")
        if codes.size and int(codes.max()) >= 2 * self.feat_dim:
            raise InvalidArgumentError("code value out of range")
        start = self.count
        try:
            payload = polyvlad.pack_codes(codes, self.feat_dim).tobytes()
            os.pwrite(self._fd, payload, polyvlad.CODE_HEADER_SIZE + start * self.row_bytes)
            self.count += codes.shape[0]
            os.pwrite(self._fd, int(self.count).to_bytes(4, "little"), polyvlad.CODE_COUNT_OFFSET)
        except OSError as exc:
            raise StorageError(f"failed to append codes: {exc}") from exc
        ids = range(start, self.count)
        self.meta["sequences"].append({"name": name or f"seq{len(self.sequences)}",
                                       "start": start, "stop": self.count})
        self.save_meta()
        return ids

    def get_codes(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64).ravel()
        bad = (ids < 0) | (ids >= self.count)
        if bad.any():
            raise NotFoundError(f"unknown place ids {ids[bad][:5].tolist()}")
        if len(ids) == 0:
            return np.zeros((0, self.D), dtype=polyvlad.code_dtype(self.feat_dim))
        out = np.empty((len(ids), self.row_bytes), dtype=np.uint8)
        # one read per run of consecutive ids; promising sets come in bands
        breaks = np.flatnonzero(np.diff(ids) != 1) + 1
        starts = np.concatenate([[0], breaks])
        stops = np.concatenate([breaks, [len(ids)]])
        try:
            for a, b in zip(starts.tolist(), stops.tolist()):
                if self.read_delay_s:
                    time.sleep(self.read_delay_s * (b - a))
                raw = os.pread(self._fd, (b - a) * self.row_bytes,
                               polyvlad.CODE_HEADER_SIZE + int(ids[a]) * self.row_bytes)
                out[a:b] = np.frombuffer(raw, dtype=np.uint8).reshape(b - a, self.row_bytes)
        except (OSError, ValueError) as exc:
            raise StorageError(f"failed to read codes: {exc}") from exc
        self.reads += len(ids)
        self.bytes_read += len(ids) * self.row_bytes
        return polyvlad.unpack_codes(out, self.D, self.feat_dim)

    def read_all(self) -> np.ndarray:
        """Bulk read of every record (used by updates and the full-database arm)."""
        try:
            raw = os.pread(self._fd, self.count * self.row_bytes, polyvlad.CODE_HEADER_SIZE)
        except OSError as exc:
            raise StorageError(f"failed to read codes: {exc}") from exc
        self.bytes_read += len(raw)
        rows = np.frombuffer(raw, dtype=np.uint8).reshape(self.count, self.row_bytes)
        return polyvlad.unpack_codes(rows, self.D, self.feat_dim)

    # -- map and coarse model ----------------------------------------------

    def save_map(self):
        try:
            graph.write_map_file(self.directory / MAP_FILE, self.E)
        except OSError as exc:
            raise StorageError(f"failed to write map: {exc}") from exc

    def save_meta(self):
        try:
            _write_json(self.directory / META_FILE, self.meta)
        except OSError as exc:
            raise StorageError(f"failed to write meta: {exc}") from exc

    def save_coarse(self, centroids, submap: graph.SubMap, labels) -> None:
        try:
            polyvlad.write_code_file(self.directory / CENTROIDS_FILE, centroids, self.feat_dim, self.L, self.M)
            # N rows of the (N, K) submap; K <= N so column ids stay in range
            graph.write_map_file(self.directory / SUBMAP_FILE, _submap_rows(submap.columns))
            tmp = self.directory / (LABELS_FILE + ".tmp")
            np.asarray(labels, dtype="<u4").tofile(tmp)
            os.replace(tmp, self.directory / LABELS_FILE)
        except OSError as exc:
            raise StorageError(f"failed to write coarse model: {exc}") from exc
        self.meta["K"] = int(len(centroids))
        self.meta["support_places"] = [int(p) for p in submap.support_places]
        self.save_meta()

    def load_coarse(self):
        """Return ``(centroids, submap, labels)`` as persisted."""
        try:
            centroids, _ = polyvlad.read_code_file(self.directory / CENTROIDS_FILE)
            cols = graph.read_map_file(self.directory / SUBMAP_FILE)
            labels = np.fromfile(self.directory / LABELS_FILE, dtype="<u4").astype(np.int64)
        except OSError as exc:
            raise StorageError(f"failed to read coarse model: {exc}") from exc
        support = np.asarray(self.meta["support_places"], dtype=np.int64)
        columns = sparse.csc_matrix(cols.tocsr()[:, : len(support)])
        return centroids, graph.SubMap(support, columns), labels


def _submap_rows(columns) -> graph.TransitionMatrix:
    m = sparse.csr_matrix(columns)
    return graph.TransitionMatrix(
        dict(zip(m.indices[m.indptr[i]:m.indptr[i + 1]].tolist(), m.data[m.indptr[i]:m.indptr[i + 1]].tolist()))
        for i in range(m.shape[0]))


def _write_json(path, obj):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True))
    os.replace(tmp, path)


def ps_put_sequence(store: PassiveStore, codes, name=None) -> range:
    return store.put_sequence(codes, name)


def ps_get_codes(store: PassiveStore, ids) -> np.ndarray:
    return store.get_codes(ids)


# -- active memory -----------------------------------------------------------

@dataclass
class TransferRecord:
    seq: int
    t: int
    n_promising: int
    fetched: np.ndarray
    evicted: np.ndarray
    bytes_in: int
    eac_bytes: int
    am_bytes: int
    step_ms: float = 0.0
    lost: bool = False

    def row(self) -> dict:
        return {"seq": self.seq, "t": self.t, "n_promising": self.n_promising,
                "fetches": len(self.fetched), "evictions": len(self.evicted),
                "bytes_in": self.bytes_in, "eac_bytes": self.eac_bytes,
                "am_bytes": self.am_bytes, "step_ms": round(self.step_ms, 6),
                "lost": int(self.lost)}


@dataclass
class TransferLog:
    records: list[TransferRecord] = field(default_factory=list)

    def append(self, rec: TransferRecord):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


class ActiveMemory:
    """Coarse model + promising codes + active transition columns."""

    def __init__(self, centroids, submap: graph.SubMap, labels, feat_dim: int, code_bytes: int):
        self.feat_dim = feat_dim
        self.code_bytes = code_bytes
        self.centroids = np.asarray(centroids)
        self.submap = submap
        self.labels = np.asarray(labels, dtype=np.int64)
        self.index: InvertedIndex = build_index(self.centroids, feat_dim)
        self.resident_ids = np.zeros(0, dtype=np.int64)
        self.resident_codes = np.zeros((0, self.centroids.shape[1]), dtype=self.centroids.dtype)
        self.eac = None

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def eac_bytes(self) -> int:
        return 0 if self.eac is None else graph.EDGE_BYTES * int(self.eac.nnz)

    @property
    def nbytes(self) -> int:
        """Resident database payload (filter state excluded, see ``state_bytes``)."""
        return ((self.K + len(self.resident_ids)) * self.code_bytes + self.submap.nbytes
                + self.index.nbytes + self.eac_bytes)

    @property
    def state_bytes(self) -> int:
        """Per-place filter state: one f64 belief and one u32 cluster label per place."""
        return 12 * len(self.labels)

    def bound_bytes(self, cap: int) -> int:
        """Upper bound on :attr:`nbytes` for a promising set of at most ``cap`` places."""
        return ((self.K + cap) * self.code_bytes + self.submap.nbytes
                + self.index.nbytes + self.eac_bytes)

    def resident_items(self) -> int:
        return self.K + len(self.resident_ids)


def am_sync(am: ActiveMemory, promising, store: PassiveStore, seq: int = 0, t: int = 0) -> TransferRecord:
    """Make the resident code set equal the promising set.

    Fetches the newcomers from PS, drops everything else; returns the
    transfer record for this step.
    """
    ids = np.unique(np.asarray(getattr(promising, "ids", promising), dtype=np.int64))
    res = am.resident_ids
    # both id lists are sorted and unique, so membership is a searchsorted merge
    pos = np.searchsorted(res, ids)
    hit = pos < len(res)
    hit[hit] = res[pos[hit]] == ids[hit]
    fetch = ids[~hit]
    kept = np.zeros(len(res), dtype=bool)
    kept[pos[hit]] = True
    evict = res[~kept]
    codes = np.empty((len(ids), store.D), dtype=am.resident_codes.dtype)
    codes[hit] = am.resident_codes[pos[hit]]
    if len(fetch):
        codes[~hit] = store.get_codes(fetch)
    am.resident_ids = ids
    am.resident_codes = codes
    if not np.array_equal(am.resident_ids, ids):
        raise StorageError("active memory out of sync with promising set")
    return TransferRecord(seq=seq, t=t, n_promising=len(ids), fetched=fetch, evicted=evict,
                          bytes_in=len(fetch) * store.row_bytes, eac_bytes=am.eac_bytes,
                          am_bytes=am.nbytes)


def refresh_coarse(am: ActiveMemory, centroids, submap: graph.SubMap, labels=None) -> None:
    """Swap in a new coarse model; the index is re-filed only where centroids moved."""
    centroids = np.asarray(centroids)
    if centroids.shape == am.centroids.shape:
        changed = np.flatnonzero((centroids != am.centroids).any(axis=1))
        index = rebuild_on_centroid_change(am.index, {int(k): centroids[k] for k in changed})
    else:
        index = build_index(centroids, am.feat_dim)
    if submap.K != len(centroids):
        raise InvalidArgumentError("submap and centroids disagree on K")
    am.centroids = centroids.copy()
    am.submap = submap
    am.index = index
    if labels is not None:
        am.labels = np.asarray(labels, dtype=np.int64)


def snapshot_metrics(log: TransferLog) -> dict:
    recs = log.records
    if not recs:
        return {"steps": 0, "am_bytes": 0, "max_am_bytes": 0, "mean_am_bytes": 0.0, "bytes_in_total": 0,
                "eac_bytes_total": 0, "lost_events": 0, "step_ms_mean": 0.0, "step_ms_p50": 0.0,
                "step_ms_p95": 0.0, "step_ms_p99": 0.0}
    ms = np.array([r.step_ms for r in recs])
    am = np.array([r.am_bytes for r in recs])
    return {
        "steps": len(recs),
        "am_bytes": int(am[-1]),
        "max_am_bytes": int(am.max()),
        "mean_am_bytes": float(am.mean()),
        "bytes_in_total": int(sum(r.bytes_in for r in recs)),
        "eac_bytes_total": int(sum(r.eac_bytes for r in recs)),
        "lost_events": int(sum(r.lost for r in recs)),
        "step_ms_mean": float(ms.mean()),
        "step_ms_p50": float(np.percentile(ms, 50)),
        "step_ms_p95": float(np.percentile(ms, 95)),
        "step_ms_p99": float(np.percentile(ms, 99)),
    }
