"""Polytope VLAD: VLAD residuals quantized by randomly rotated cross-polytopes.

A PolyCode is a 1-D integer array of ``D = L * M`` categorical codes in
``[0, 2 * feat_dim)``. Collections of codes are 2-D arrays, one row per image.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .descriptors import LocalDescriptorSet, Vocabulary
from .errors import FormatError, InvalidArgumentError

CODE_MAGIC = b"HM4C"
ROTATION_MAGIC = b"HM4R"
FILE_VERSION = 1
_CODE_HEADER = struct.Struct("<4sHHHHII")
_ROT_HEADER = struct.Struct("<4sHHHQ")


def code_bits(feat_dim: int) -> int:
    """Bits per packed code: ``ceil(log2(2 * feat_dim))``."""
    return max(1, math.ceil(math.log2(2 * feat_dim)))


def code_dtype(feat_dim: int):
    if 2 * feat_dim <= 256:
        return np.uint8
    return np.uint16 if 2 * feat_dim <= 65536 else np.uint32


def code_nbytes(D: int, feat_dim: int) -> int:
    """Bytes of one packed PolyCode row (padded to a byte boundary)."""
    return (D * code_bits(feat_dim) + 7) // 8


def packed_size_bits(D: int, feat_dim: int) -> int:
    return D * code_bits(feat_dim)


def vlad_aggregate(dset: LocalDescriptorSet, vocab: Vocabulary) -> np.ndarray:
    """Intra-normalized VLAD residuals, shape ``(L, feat_dim)``.

    Cells with no assigned descriptor, or whose residuals cancel, stay zero.
    """
    f = dset.descriptors
    if f.shape[0] == 0:
        raise InvalidArgumentError("empty descriptor set")
    if f.shape[1] != vocab.feat_dim:
        raise InvalidArgumentError(f"descriptor dim {f.shape[1]} != vocabulary dim {vocab.feat_dim}")
    assign = vocab.assign(f)
    x = np.zeros_like(vocab.centers)
    np.add.at(x, assign, f - vocab.centers[assign])
    norms = np.linalg.norm(x, axis=1)
    nz = norms > 0
    x[nz] /= norms[nz, None]
    return x


@dataclass
class RotationBank:
    rotations: np.ndarray  # (M, d, d)
    seed: int = 0

    @property
    def M(self) -> int:
        return self.rotations.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.rotations.shape[1]


def sample_rotations(M: int, feat_dim: int, seed: int = 0) -> RotationBank:
    """Seeded uniform rotations: QR of a Gaussian matrix, signs fixed, det +1."""
    if M < 1 or feat_dim < 2:
        raise InvalidArgumentError("need M >= 1 and feat_dim >= 2")
    rng = np.random.default_rng(seed)
    out = np.empty((M, feat_dim, feat_dim))
    for m in range(M):
        q, r = np.linalg.qr(rng.standard_normal((feat_dim, feat_dim)))
        s = np.sign(np.diag(r))
        s[s == 0] = 1.0
        q = q * s
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        out[m] = q
    return RotationBank(out, seed)


def polytope_encode(x, R) -> int:
    """Index of the cross-polytope vertex nearest to ``R @ x``.

    Vertex ``m`` is ``+e_m`` and vertex ``m + d`` is ``-e_m`` (0-based);
    a zero vector maps to 0.
    """
    xr = np.asarray(R, dtype=np.float64) @ np.asarray(x, dtype=np.float64)
    return int(_kernels.polytope_codes(xr[None, :])[0])


def encode_image(dset: LocalDescriptorSet, vocab: Vocabulary, bank: RotationBank) -> np.ndarray:
    """PolyCode of one image, rotation-major: index ``m * L + l``."""
    if bank.feat_dim != vocab.feat_dim:
        raise InvalidArgumentError("rotation bank and vocabulary disagree on feat_dim")
    x = vlad_aggregate(dset, vocab)
    rotated = np.einsum("mij,lj->mli", bank.rotations, x).reshape(-1, vocab.feat_dim)
    return _kernels.polytope_codes(rotated).astype(code_dtype(vocab.feat_dim))


def encode_images(sets, vocab: Vocabulary, bank: RotationBank) -> np.ndarray:
    D = vocab.L * bank.M
    out = np.empty((len(sets), D), dtype=code_dtype(vocab.feat_dim))
    for i, s in enumerate(sets):
        out[i] = encode_image(s, vocab, bank)
    return out


def jaccard_distance(a, b) -> float:
    """Fraction of positions where two PolyCodes disagree."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"code length mismatch: {a.shape} vs {b.shape}")
    D = a.shape[-1]
    return 1.0 - np.count_nonzero(a == b) / D


def jaccard_distances(codes, q) -> np.ndarray:
    """Distance from ``q`` to every row of ``codes``."""
    codes = np.asarray(codes)
    q = np.asarray(q)
    if codes.ndim != 2 or codes.shape[1] != q.shape[0]:
        raise InvalidArgumentError("code length mismatch")
    return 1.0 - _kernels.match_counts(codes, q.astype(codes.dtype)) / q.shape[0]


def kmodes_centroid(members) -> np.ndarray:
    """Per-dimension mode of the member codes; ties go to the smaller code."""
    members = np.atleast_2d(np.asarray(members))
    if members.shape[0] == 0 or members.size == 0:
        raise InvalidArgumentError("cannot take the mode of an empty cluster")
    n, D = members.shape
    V = int(members.max()) + 1
    counts = np.zeros((D, V), dtype=np.int64)
    np.add.at(counts, (np.broadcast_to(np.arange(D), (n, D)), members), 1)
    return np.argmax(counts, axis=1).astype(members.dtype)


@dataclass
class ClusterModel:
    assignments: np.ndarray  # (N,) cluster id per image, 0-based
    centroids: np.ndarray  # (K, D)
    objective_trace: list[float] = field(default_factory=list, repr=False)

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == k)

    def objective(self, codes) -> float:
        return kmodes_objective(codes, self.assignments, self.centroids)


def kmodes_objective(codes, assignments, centroids) -> float:
    codes = np.asarray(codes)
    D = codes.shape[1]
    matches = np.count_nonzero(codes == centroids[assignments], axis=1)
    return float((D - matches).sum() / (D * len(codes)))


def _greedy_init(codes, K, rng):
    N, D = codes.shape
    chosen = [int(rng.integers(N))]
    taken = np.zeros(N, dtype=bool)
    taken[chosen[0]] = True
    mind = D - _kernels.match_counts(codes, codes[chosen[0]]).astype(np.int64)
    for _ in range(1, K):
        cand = np.where(taken, -1, mind)
        nxt = int(np.argmax(cand))
        chosen.append(nxt)
        taken[nxt] = True
        mind = np.minimum(mind, D - _kernels.match_counts(codes, codes[nxt]))
    return codes[chosen].copy()


def _assign(codes, centroids, current=None):
    matches = _kernels.match_count_matrix(codes, centroids)
    best = np.argmax(matches, axis=1)
    if current is not None:
        # stay put when the current cluster is among the best
        cur = matches[np.arange(len(codes)), current]
        keep = cur == matches[np.arange(len(codes)), best]
        best = np.where(keep, current, best)
    return best, matches


def _update_modes(codes, assign, centroids, clusters):
    for k in clusters:
        members = codes[assign == k]
        if len(members):
            centroids[k] = kmodes_centroid(members)


def _repair_empty(codes, assign, centroids):
    """Move the farthest point from a multi-member cluster into each empty one."""
    K = centroids.shape[0]
    sizes = np.bincount(assign, minlength=K)
    for k in np.flatnonzero(sizes == 0):
        dist = np.count_nonzero(codes != centroids[assign], axis=1).astype(np.int64)
        dist[sizes[assign] <= 1] = -1
        i = int(np.argmax(dist))
        donor = int(assign[i])
        assign[i] = k
        sizes[donor] -= 1
        sizes[k] += 1
        centroids[k] = codes[i]
        _update_modes(codes, assign, centroids, [donor])


def kmodes_cluster(codes, K: int, iters: int = 20, seed: int = 0) -> ClusterModel:
    """Huang-style K-modes under the Jaccard (mismatch-fraction) distance.

    ``objective_trace`` holds the mean distance to the assigned centroid after
    initialization and after every iteration; it never increases.
    """
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise InvalidArgumentError("codes must be a 2-D array")
    N = codes.shape[0]
    if K < 1 or N < K:
        raise InvalidArgumentError(f"need at least K={K} codes, got {N}")
    rng = np.random.default_rng(seed)
    centroids = _greedy_init(codes, K, rng)
    assign, _ = _assign(codes, centroids)
    _update_modes(codes, assign, centroids, range(K))
    _repair_empty(codes, assign, centroids)
    trace = [kmodes_objective(codes, assign, centroids)]
    for _ in range(iters):
        new_assign, _ = _assign(codes, centroids, current=assign)
        moved = new_assign != assign
        touched = np.union1d(assign[moved], new_assign[moved])
        assign = new_assign
        _update_modes(codes, assign, centroids, touched)
        _repair_empty(codes, assign, centroids)
        trace.append(kmodes_objective(codes, assign, centroids))
        if not moved.any():
            break
    return ClusterModel(assign.astype(np.int64), centroids, trace)


def nearest_centroid(codes, centroids) -> np.ndarray:
    return _assign(np.atleast_2d(codes), centroids)[0]


# -- packed code files ------------------------------------------------------

def pack_codes(codes, feat_dim: int) -> np.ndarray:
    """Pack rows of codes little-endian at ``code_bits`` each; one byte row per code."""
    codes = np.atleast_2d(np.asarray(codes))
    n, D = codes.shape
    b = code_bits(feat_dim)
    if b == 8:
        return codes.astype(np.uint8)
    bits = ((codes[..., None].astype(np.uint32) >> np.arange(b, dtype=np.uint32)) & 1).astype(np.uint8)
    bits = bits.reshape(n, D * b)
    pad = code_nbytes(D, feat_dim) * 8 - D * b
    if pad:
        bits = np.concatenate([bits, np.zeros((n, pad), dtype=np.uint8)], axis=1)
    return np.packbits(bits, axis=1, bitorder="little")


def unpack_codes(rows, D: int, feat_dim: int) -> np.ndarray:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.uint8))
    b = code_bits(feat_dim)
    if b == 8:
        return rows[:, :D].astype(code_dtype(feat_dim))
    return _kernels.unpack_rows(rows, D, b, code_dtype(feat_dim))


@dataclass
class CodeFileHeader:
    feat_dim: int
    L: int
    M: int
    D: int
    count: int

    @property
    def row_bytes(self) -> int:
        return code_nbytes(self.D, self.feat_dim)

    def pack(self) -> bytes:
        return _CODE_HEADER.pack(CODE_MAGIC, FILE_VERSION, self.feat_dim, self.L, self.M, self.D, self.count)


CODE_HEADER_SIZE = _CODE_HEADER.size
CODE_COUNT_OFFSET = CODE_HEADER_SIZE - 4


def parse_code_header(buf: bytes) -> CodeFileHeader:
    if len(buf) < CODE_HEADER_SIZE:
        raise FormatError("truncated code file header", len(buf))
    magic, version, feat_dim, L, M, D, count = _CODE_HEADER.unpack_from(buf, 0)
    if magic != CODE_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FILE_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if D != L * M:
        raise FormatError(f"D={D} does not equal L*M={L * M}", 12)
    return CodeFileHeader(feat_dim, L, M, D, count)


def write_code_file(path, codes, feat_dim: int, L: int, M: int) -> None:
    codes = np.atleast_2d(np.asarray(codes))
    if codes.size and int(codes.max()) >= 2 * feat_dim:
        raise InvalidArgumentError("code value out of range for feat_dim")
    hdr = CodeFileHeader(feat_dim, L, M, L * M, codes.shape[0] if codes.size else 0)
    if codes.size and codes.shape[1] != hdr.D:
        raise InvalidArgumentError(f"codes have length {codes.shape[1]}, expected {hdr.D}")
    with open(path, "wb") as fh:
        fh.write(hdr.pack())
        if codes.size:
            fh.write(pack_codes(codes, feat_dim).tobytes())


def read_code_file(path) -> tuple[np.ndarray, CodeFileHeader]:
    buf = Path(path).read_bytes()
    hdr = parse_code_header(buf)
    need = CODE_HEADER_SIZE + hdr.count * hdr.row_bytes
    if len(buf) < need:
        raise FormatError(f"truncated code payload, expected {need} bytes", len(buf))
    rows = np.frombuffer(buf, dtype=np.uint8, count=hdr.count * hdr.row_bytes, offset=CODE_HEADER_SIZE)
    codes = unpack_codes(rows.reshape(hdr.count, hdr.row_bytes), hdr.D, hdr.feat_dim)
    return codes.reshape(hdr.count, hdr.D), hdr


def write_rotation_file(path, bank: RotationBank) -> None:
    with open(path, "wb") as fh:
        fh.write(_ROT_HEADER.pack(ROTATION_MAGIC, FILE_VERSION, bank.feat_dim, bank.M, bank.seed))
        fh.write(np.ascontiguousarray(bank.rotations, dtype="<f8").tobytes())


def read_rotation_file(path) -> RotationBank:
    buf = Path(path).read_bytes()
    if len(buf) < _ROT_HEADER.size:
        raise FormatError("truncated rotation header", len(buf))
    magic, version, d, M, seed = _ROT_HEADER.unpack_from(buf, 0)
    if magic != ROTATION_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FILE_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    n = M * d * d
    if len(buf) != _ROT_HEADER.size + 8 * n:
        raise FormatError("rotation payload size mismatch", _ROT_HEADER.size)
    rot = np.frombuffer(buf, dtype="<f8", count=n, offset=_ROT_HEADER.size).reshape(M, d, d).copy()
    return RotationBank(rot, seed)
