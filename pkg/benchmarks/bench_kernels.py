"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel with the best-of-N time for each backend and the
speedup. Workload sizes follow the scaling scenario (D=512, feat_dim=32).
"""
import argparse
import timeit

import numpy as np

from hm4._kernels import compiled_backend, python_backend
from hm4.invindex import build_index
from hm4.polyvlad import code_bits, pack_codes


def workloads(rng):
    fd, D = 32, 512
    db = rng.integers(0, 2 * fd, size=(5000, D)).astype(np.uint8)
    q = db[17].copy()
    cents = rng.integers(0, 2 * fd, size=(300, D)).astype(np.uint8)
    index = build_index(cents, fd)
    buckets = index.query_buckets(q)
    packed = pack_codes(db[:80], fd)
    xrot = rng.standard_normal((2048, 32))
    return {
        "match_counts (5000x512)": lambda m: m.match_counts(db, q),
        "match_count_matrix (300x512 vs 64)": lambda m: m.match_count_matrix(cents, db[:64]),
        "score_buckets (K=300, D=512)": lambda m: m.score_buckets(index.offsets, index.ids, buckets, index.K),
        "unpack_rows (80 codes, 6 bits)": lambda m: m.unpack_rows(packed, D, code_bits(fd), np.uint8),
        "polytope_codes (2048x32)": lambda m: m.polytope_codes(xrot),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=200)
    args = ap.parse_args()
    if compiled_backend is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':38s} {'cython us':>10s} {'numpy us':>10s} {'speedup':>8s}")
    for name, fn in workloads(rng).items():
        np.testing.assert_array_equal(fn(compiled_backend), fn(python_backend))
        times = []
        for mod in (compiled_backend, python_backend):
            t = min(timeit.repeat(lambda: fn(mod), number=args.number, repeat=args.repeat))
            times.append(t / args.number * 1e6)
        print(f"{name:38s} {times[0]:10.1f} {times[1]:10.1f} {times[1] / times[0]:7.1f}x")


if __name__ == "__main__":
    main()
