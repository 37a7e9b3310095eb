# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; see _pykernels for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()

ctypedef fused code_t:
    cnp.uint8_t
    cnp.uint16_t
    cnp.uint32_t


def score_buckets(offsets, ids, buckets, Py_ssize_t n_centroids):
    cdef const cnp.int64_t[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef const cnp.int32_t[::1] idv = np.ascontiguousarray(ids, dtype=np.int32)
    cdef const cnp.int64_t[::1] bk = np.ascontiguousarray(buckets, dtype=np.int64)
    out = np.zeros(n_centroids, dtype=np.int32)
    cdef cnp.int32_t[::1] s = out
    cdef Py_ssize_t m, j, b
    with nogil:
        for m in range(bk.shape[0]):
            b = bk[m]
            for j in range(off[b], off[b + 1]):
                s[idv[j]] += 1
    return out


def _match_counts(const code_t[:, ::1] codes, const code_t[::1] q):
    cdef Py_ssize_t n = codes.shape[0], d = codes.shape[1], i, j
    out = np.zeros(n, dtype=np.int32)
    cdef cnp.int32_t[::1] o = out
    cdef cnp.int32_t c
    with nogil:
        for i in range(n):
            c = 0
            for j in range(d):
                c += codes[i, j] == q[j]
            o[i] = c
    return out


def match_counts(codes, q):
    codes = np.ascontiguousarray(codes)
    q = np.ascontiguousarray(q, dtype=codes.dtype)
    if codes.shape[0] == 0:
        return np.zeros(0, dtype=np.int32)
    return _match_counts(codes, q)


def _match_count_matrix(const code_t[:, ::1] a, const code_t[:, ::1] b):
    cdef Py_ssize_t na = a.shape[0], nb = b.shape[0], d = a.shape[1], i, k, j
    out = np.zeros((na, nb), dtype=np.int32)
    cdef cnp.int32_t[:, ::1] o = out
    cdef cnp.int32_t c
    with nogil:
        for i in range(na):
            for k in range(nb):
                c = 0
                for j in range(d):
                    c += a[i, j] == b[k, j]
                o[i, k] = c
    return out


def match_count_matrix(a, b, chunk=None):
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b, dtype=a.dtype)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.int32)
    return _match_count_matrix(a, b)


def polytope_codes(xrot):
    cdef const double[:, ::1] x = np.ascontiguousarray(xrot, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], dim = x.shape[1], i, j, best
    cdef double bv, v
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    with nogil:
        for i in range(n):
            best = 0
            bv = fabs(x[i, 0])
            for j in range(1, dim):
                v = fabs(x[i, j])
                if v > bv:
                    bv = v
                    best = j
            o[i] = best if x[i, best] >= 0 else best + dim
    return out


def unpack_rows(rows, Py_ssize_t D, int b, out_dtype):
    cdef const cnp.uint8_t[:, ::1] r = np.ascontiguousarray(rows, dtype=np.uint8)
    cdef Py_ssize_t n = r.shape[0], width = r.shape[1], i, j, byte
    cdef cnp.uint32_t window, mask = (1 << b) - 1
    cdef int shift
    out = np.empty((n, D), dtype=np.uint32)
    cdef cnp.uint32_t[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(D):
                byte = (j * b) >> 3
                shift = (j * b) & 7
                window = r[i, byte]
                if byte + 1 < width:
                    window |= (<cnp.uint32_t> r[i, byte + 1]) << 8
                if byte + 2 < width:
                    window |= (<cnp.uint32_t> r[i, byte + 2]) << 16
                o[i, j] = (window >> shift) & mask
    return out.astype(out_dtype, copy=False)
