"""Pure-numpy versions of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and bit-identical output; ``hm4._kernels`` picks one at import time.
"""
import numpy as np


def score_buckets(offsets, ids, buckets, n_centroids):
    """Accumulate one vote per centroid id found in each probed bucket."""
    offsets = np.asarray(offsets, dtype=np.int64)
    buckets = np.asarray(buckets, dtype=np.int64)
    starts = offsets[buckets]
    sizes = offsets[buckets + 1] - starts
    total = int(sizes.sum())
    if total == 0:
        return np.zeros(n_centroids, dtype=np.int32)
    # flat positions of every entry in the probed buckets
    run_start = np.repeat(starts - np.cumsum(sizes) + sizes, sizes)
    pos = run_start + np.arange(total, dtype=np.int64)
    hits = np.asarray(ids)[pos]
    return np.bincount(hits, minlength=n_centroids).astype(np.int32)


def match_counts(codes, q):
    """Number of positions where each row of ``codes`` equals ``q``."""
    codes = np.asarray(codes)
    if codes.shape[0] == 0:
        return np.zeros(0, dtype=np.int32)
    return np.count_nonzero(codes == np.asarray(q)[None, :], axis=1).astype(np.int32)


def match_count_matrix(a, b, chunk=256):
    """Pairwise agreement counts between the rows of ``a`` and ``b``."""
    a = np.asarray(a)
    b = np.asarray(b)
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.int32)
    for s in range(0, a.shape[0], chunk):
        blk = a[s:s + chunk]
        out[s:s + chunk] = np.count_nonzero(blk[:, None, :] == b[None, :, :], axis=2)
    return out


def polytope_codes(xrot):
    """Cross-polytope vertex index for each row of rotated vectors."""
    xrot = np.asarray(xrot, dtype=np.float64)
    dim = xrot.shape[1]
    m = np.argmax(np.abs(xrot), axis=1)  # first max wins ties
    neg = xrot[np.arange(xrot.shape[0]), m] < 0
    return (m + dim * neg).astype(np.int64)


def unpack_rows(rows, D, b, out_dtype):
    """Read ``D`` little-endian ``b``-bit fields from each packed byte row."""
    rows = np.asarray(rows, dtype=np.uint8)
    # a field plus its bit shift fits a three-byte window for b <= 17
    off = np.arange(D, dtype=np.int64) * b
    byte, shift = off // 8, (off % 8).astype(np.uint32)
    r = np.zeros((rows.shape[0], rows.shape[1] + 2), dtype=np.uint32)
    r[:, : rows.shape[1]] = rows
    window = r[:, byte] | (r[:, byte + 1] << 8) | (r[:, byte + 2] << 16)
    return np.ascontiguousarray((window >> shift) & ((1 << b) - 1), dtype=out_dtype)
