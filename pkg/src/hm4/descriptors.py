"""Local descriptor sets: file ingestion, synthetic worlds, k-means vocabulary."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgumentError

DESCRIPTOR_MAGIC = b"HM4D"
DESCRIPTOR_VERSION = 1
NORM_TOLERANCE = 1e-3


@dataclass
class LocalDescriptorSet:
    """Unit-norm local features of one image, shape ``(n, feat_dim)``."""

    descriptors: np.ndarray
    image_id: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.descriptors = np.atleast_2d(np.asarray(self.descriptors, dtype=np.float64))

    @property
    def feat_dim(self) -> int:
        return self.descriptors.shape[1]

    def __len__(self):
        return self.descriptors.shape[0]


@dataclass
class Vocabulary:
    centers: np.ndarray
    objective_trace: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2 or self.centers.shape[0] < 2:
            raise InvalidArgumentError("vocabulary needs at least 2 centers")
        if len(np.unique(self.centers, axis=0)) != self.centers.shape[0]:
            raise InvalidArgumentError("vocabulary centers must be pairwise distinct")

    @property
    def L(self) -> int:
        return self.centers.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.centers.shape[1]

    def assign(self, descriptors: np.ndarray) -> np.ndarray:
        """Nearest center per descriptor (ties go to the lower index)."""
        return _nearest(np.asarray(descriptors, dtype=np.float64), self.centers)[0]


def _sq_dists(x, centers):
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _nearest(x, centers):
    d = _sq_dists(x, centers)
    idx = np.argmin(d, axis=1)
    return idx, d[np.arange(len(x)), idx]


def _farthest_point_seeds(pool, L, rng):
    n = len(pool)
    chosen = [int(rng.integers(n))]
    mind = _sq_dists(pool, pool[chosen])[:, 0]
    for _ in range(1, L):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, _sq_dists(pool, pool[[nxt]])[:, 0])
    return pool[chosen].copy()


def kmeans_vocabulary(pool, L: int, iters: int = 20, seed: int = 0) -> Vocabulary:
    """Lloyd k-means with farthest-point seeding.

    The per-iteration objective (sum of squared distances to the assigned
    center) is recorded in ``Vocabulary.objective_trace``.
    """
    pool = np.asarray(pool, dtype=np.float64)
    if pool.ndim != 2 or len(pool) < L:
        raise InvalidArgumentError(f"need at least L={L} pool vectors, got {len(pool)}")
    if L < 2:
        raise InvalidArgumentError("L must be >= 2")
    rng = np.random.default_rng(seed)
    centers = _farthest_point_seeds(pool, L, rng)
    assign, dist = _nearest(pool, centers)
    trace = [float(dist.sum())]
    for _ in range(iters):
        for l in range(L):
            members = pool[assign == l]
            if len(members):  # empty cells keep their previous center
                centers[l] = members.mean(axis=0)
        new_assign, dist = _nearest(pool, centers)
        trace.append(float(dist.sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return Vocabulary(centers, trace)


def _unit_rows(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    n[n == 0] = 1.0
    return x / n


@dataclass
class SyntheticWorldConfig:
    num_places: int = 200
    loop_topology: str = "linear"
    descriptors_per_image: int = 40
    appearance_noise: float = 0.0
    revisit_offset_m: float = 0.0
    place_spacing_m: float = 10.0
    seed: int = 0
    feat_dim: int = 32
    num_query_sequences: int = 1

    def __post_init__(self):
        if self.num_places < 2:
            raise InvalidArgumentError("num_places must be >= 2")
        if self.descriptors_per_image < 1:
            raise InvalidArgumentError("descriptors_per_image must be >= 1")
        if self.loop_topology not in ("linear", "loop"):
            raise InvalidArgumentError(f"unknown loop_topology {self.loop_topology!r}")
        if self.appearance_noise < 0:
            raise InvalidArgumentError("appearance_noise must be >= 0")
        if self.feat_dim < 2:
            raise InvalidArgumentError("feat_dim must be >= 2")
        if self.num_query_sequences < 0:
            raise InvalidArgumentError("num_query_sequences must be >= 0")


@dataclass
class SyntheticWorld:
    config: SyntheticWorldConfig
    database: list[list[LocalDescriptorSet]]
    queries: list[list[LocalDescriptorSet]]
    ground_truth: dict[tuple[int, int], float]
    query_places: list[np.ndarray]
    adjacency: set[tuple[int, int]]

    @property
    def circumference(self) -> float | None:
        if self.config.loop_topology == "loop":
            return self.config.num_places * self.config.place_spacing_m
        return None


def generate_synthetic_world(cfg: SyntheticWorldConfig) -> SyntheticWorld:
    """Places with random unit descriptors; queries re-observe them with noise.

    The database is sequence 0 and observes place ``p`` at frame ``p``.
    Query sequence ``s`` (1-based) re-traverses every place once, starting
    at place 0 for a linear route or a seeded offset on a loop.
    """
    P, d = cfg.num_places, cfg.feat_dim
    rng = np.random.default_rng(cfg.seed)
    base = [_unit_rows(rng.standard_normal((cfg.descriptors_per_image, d))) for _ in range(P)]
    positions = np.arange(P) * float(cfg.place_spacing_m)

    database = [[LocalDescriptorSet(base[p].copy(), (0, p)) for p in range(P)]]
    ground_truth = {(0, p): float(positions[p]) for p in range(P)}

    queries, query_places = [], []
    for s in range(1, cfg.num_query_sequences + 1):
        qrng = np.random.default_rng([cfg.seed, s])
        start = int(qrng.integers(P)) if cfg.loop_topology == "loop" else 0
        places = (start + np.arange(P)) % P
        frames = []
        for t, p in enumerate(places):
            desc = base[p].copy()
            if cfg.appearance_noise > 0:
                desc = _unit_rows(desc + cfg.appearance_noise * qrng.standard_normal(desc.shape))
            frames.append(LocalDescriptorSet(desc, (s, t)))
            ground_truth[(s, t)] = float(positions[p] + cfg.revisit_offset_m)
        queries.append(frames)
        query_places.append(places)

    adjacency = {(p, p + 1) for p in range(P - 1)}
    if cfg.loop_topology == "loop":
        adjacency.add((P - 1, 0))
    return SyntheticWorld(cfg, database, queries, ground_truth, query_places, adjacency)


def write_descriptor_file(path, sets: list[LocalDescriptorSet]) -> None:
    if not sets:
        raise InvalidArgumentError("no descriptor sets to write")
    feat_dim = sets[0].feat_dim
    with open(path, "wb") as fh:
        fh.write(DESCRIPTOR_MAGIC)
        fh.write(struct.pack("<HHI", DESCRIPTOR_VERSION, feat_dim, len(sets)))
        for s in sets:
            if s.feat_dim != feat_dim:
                raise InvalidArgumentError("mixed feat_dim across descriptor sets")
            fh.write(struct.pack("<I", len(s)))
            fh.write(np.ascontiguousarray(s.descriptors, dtype="<f4").tobytes())


def load_descriptor_file(path, renormalize: bool = False, sequence: int = 0) -> list[LocalDescriptorSet]:
    """Read an ``HM4D`` file.

    Descriptors whose norm is off by more than 1e-3 are rejected with a
    :class:`FormatError`, or rescaled to unit norm when ``renormalize`` is set.
    """
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise FormatError("truncated header", len(buf))
    if buf[:4] != DESCRIPTOR_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    version, feat_dim, count = struct.unpack_from("<HHI", buf, 4)
    if version != DESCRIPTOR_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if feat_dim == 0:
        raise FormatError("feat_dim is zero", 6)
    pos = 12
    sets = []
    for i in range(count):
        if pos + 4 > len(buf):
            raise FormatError(f"truncated count for image {i}", pos)
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        nbytes = n * feat_dim * 4
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated payload for image {i}", pos)
        desc = np.frombuffer(buf, dtype="<f4", count=n * feat_dim, offset=pos)
        desc = desc.reshape(n, feat_dim).astype(np.float64)
        norms = np.linalg.norm(desc, axis=1)
        bad = np.abs(norms - 1.0) > NORM_TOLERANCE
        if bad.any():
            if not renormalize:
                raise FormatError(f"image {i} has {int(bad.sum())} non-unit descriptors", pos)
            desc = _unit_rows(desc)
        sets.append(LocalDescriptorSet(desc, (sequence, i)))
        pos += nbytes
    if pos != len(buf):
        raise FormatError("trailing bytes after last image", pos)
    return sets
