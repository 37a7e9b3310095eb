"""Acceptance suite: one test group per criterion, each checked at its stated
tolerance and time budget. The terminal summary prints a PASS/FAIL line per
criterion (see ``conftest.py``)."""
import gc
import time

import numpy as np
import pytest

from hm4 import graph
from hm4.descriptors import SyntheticWorldConfig, generate_synthetic_world, kmeans_vocabulary
from hm4.hmm import ObservationParams, baseline_filter_step, baseline_observation, hm4_step
from hm4.invindex import build_index, distances_from_scores, score_query, visit_count
from hm4.polyvlad import (encode_image, encode_images, jaccard_distance, jaccard_distances, kmodes_cluster,
                          packed_size_bits, polytope_encode, sample_rotations, write_code_file)
from hm4.scenario import Params, ScenarioConfig, prepare_world, run_baseline, run_scenario

from conftest import make_state, random_codes

criterion = pytest.mark.acceptance


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# -- 1 ------------------------------------------------------------------------

@criterion(1, "singleton-cluster HM4 equals the full-database filter within 1e-9 (N=300, 100 steps)")
def test_oracle_equivalence(tmp_path):
    t0 = time.perf_counter()
    w = generate_synthetic_world(SyntheticWorldConfig(num_places=300, appearance_noise=0.03, seed=11,
                                                      descriptors_per_image=30))
    pool = np.concatenate([s.descriptors for s in w.database[0]])
    vocab, bank = kmeans_vocabulary(pool, 16, seed=11), sample_rotations(4, 32, seed=12)
    codes = encode_images(w.database[0], vocab, bank)
    queries = encode_images(w.queries[0], vocab, bank)
    N = len(codes)
    E = graph.init_sequence_transitions(N)
    rng = np.random.default_rng(11)
    # loop-closure style edges so the map is not a pure band
    graph.link_matches(E, [(int(a), int(b)) for a, b in rng.integers(0, N, size=(40, 2))], 0)
    state = make_state(tmp_path, codes, E, np.arange(N), codes.copy(), 32, L=16, M=4)
    params = ObservationParams(sigma=0.03, zeta=0.0, cap=N)
    p_hm4 = p_base = np.full(N, 1.0 / N)
    worst = 0.0
    for t in range(100):
        q = queries[t]
        p_hm4, dec, P = hm4_step(p_hm4, q, state, params)
        p_base = baseline_filter_step(E, baseline_observation(codes, q, params.sigma), p_base)
        assert len(P) == N
        worst = max(worst, float(np.abs(p_hm4 - p_base).max()))
        assert dec == int(np.argmax(p_base))
    elapsed = time.perf_counter() - t0
    print(f"criterion 1: max |p_hm4 - p_base| = {worst:.3e}, {elapsed:.2f}s")
    assert worst <= 1e-9
    assert elapsed < 10.0


# -- 2 ------------------------------------------------------------------------

@criterion(2, "inverted-index scores equal pairwise Jaccard exactly (100 sets x 20 queries)")
def test_index_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    for _ in range(100):
        K, D = int(rng.integers(1, 1001)), int(rng.integers(1, 1025))
        fd = int(rng.choice([2, 4, 16, 32, 128]))
        cents = random_codes(rng, K, D, fd)
        index = build_index(cents, fd)
        for q in random_codes(rng, 20, D, fd):
            got = distances_from_scores(score_query(index, q), D)
            want = jaccard_distances(cents, q)
            assert np.array_equal(got, want)
    elapsed = time.perf_counter() - t0
    print(f"criterion 2: {elapsed:.2f}s")
    assert elapsed < 5.0


# -- 3 ------------------------------------------------------------------------

@criterion(3, "polytope fast path equals brute-force vertex argmax (1000 pairs per dimension)")
@pytest.mark.parametrize("feat_dim", [4, 8, 128])
def test_polytope_encode_exact(feat_dim):
    t0 = time.perf_counter()
    rng = np.random.default_rng(feat_dim)
    bank = sample_rotations(100, feat_dim, seed=feat_dim)
    vertices = np.concatenate([np.eye(feat_dim), -np.eye(feat_dim)])
    mismatches = 0
    for n in range(1000):
        x = _unit(rng.standard_normal(feat_dim))
        R = bank.rotations[n % 100]
        brute = int(np.argmax(vertices @ (R @ x)))
        mismatches += polytope_encode(x, R) != brute
    elapsed = time.perf_counter() - t0
    print(f"criterion 3 (d={feat_dim}): {mismatches} mismatches, {elapsed:.2f}s")
    assert mismatches == 0
    assert elapsed < 2.0


# -- 4 ------------------------------------------------------------------------

@criterion(4, "L=128, M=8, d=128 code packs to exactly 8192 bits")
def test_code_size(tmp_path):
    assert packed_size_bits(128 * 8, 128) == 8192
    rng = np.random.default_rng(4)
    f = _unit(rng.standard_normal((400, 128)))
    from hm4.descriptors import LocalDescriptorSet, Vocabulary
    vocab = Vocabulary(_unit(rng.standard_normal((128, 128))))
    code = encode_image(LocalDescriptorSet(f), vocab, sample_rotations(8, 128, seed=4))
    assert code.shape == (1024,)
    write_code_file(tmp_path / "one.hm4c", code[None], 128, 128, 8)
    payload_bits = 8 * ((tmp_path / "one.hm4c").stat().st_size - 20)
    print(f"criterion 4: packed record = {payload_bits} bits")
    assert payload_bits == 8192


# -- 5 ------------------------------------------------------------------------

@criterion(5, "inverted-index visits per query <= 2 KD/2d on uniform centroids")
def test_index_work_bound():
    rng = np.random.default_rng(5)
    K, D, fd = 1000, 1024, 128
    index = build_index(random_codes(rng, K, D, fd), fd)
    visits = np.mean([visit_count(index, q) for q in random_codes(rng, 200, D, fd)])
    bound = 2 * K * D / (2 * fd)
    print(f"criterion 5: mean visits {visits:.1f} vs bound {bound:.0f} (linear scan {K * D})")
    assert visits <= bound


# -- 6 (and the normalization part of 8) ----------------------------------------

SCALING_PLACES = 1000
SCALING_REPEATS = 3


@pytest.fixture(scope="module")
def scaling_runs(tmp_path_factory):
    """Fixed coverage area revisited by five query sequences; the database grows
    from 1000 to 5000 places across them. Each arm is replayed a few times so
    wall-clock latency can be taken as a median over repeats."""
    tmp = tmp_path_factory.mktemp("scaling")
    cfg = ScenarioConfig(
        synthetic=SyntheticWorldConfig(num_places=SCALING_PLACES, appearance_noise=0.02, seed=7,
                                       num_query_sequences=5, descriptors_per_image=40, feat_dim=32),
        params=Params(K=300, L=64, M=8), seed=7, out_dir=str(tmp))
    t0 = time.perf_counter()
    world = prepare_world(cfg)
    runs = {"hm4": [], "baseline": []}
    for r in range(SCALING_REPEATS):
        gc.collect()
        gc.disable()
        try:
            runs["hm4"].append(run_scenario(cfg, world, tmp / f"hm4_{r}"))
            runs["baseline"].append(run_baseline(cfg, world, tmp / f"base_{r}"))
        finally:
            gc.enable()
    return runs, time.perf_counter() - t0


def _median_latency(reports, s):
    return float(np.median([rep.sequences[s]["mean_step_ms"] for rep in reports]))


@criterion(6, "scaling shape: HM4 AM bytes and latency < 1.5x, baseline >= 3x over 5 sequences")
def test_scaling_shape(scaling_runs):
    runs, elapsed = scaling_runs
    h, b = runs["hm4"][0].sequences, runs["baseline"][0].sequences
    assert [s["places"] for s in h] == [SCALING_PLACES * s for s in range(1, 6)]
    # replays are deterministic: identical decisions and byte counts
    for arm in runs.values():
        assert all(rep.trace == arm[0].trace for rep in arm)
        assert all([s["max_am_bytes"] for s in rep.sequences] == [s["max_am_bytes"] for s in arm[0].sequences]
                   for rep in arm)
    ratios = {
        "hm4_mem": h[-1]["max_am_bytes"] / h[0]["max_am_bytes"],
        "hm4_lat": _median_latency(runs["hm4"], -1) / _median_latency(runs["hm4"], 0),
        "base_mem": b[-1]["max_am_bytes"] / b[0]["max_am_bytes"],
        "base_lat": _median_latency(runs["baseline"], -1) / _median_latency(runs["baseline"], 0),
    }
    print("criterion 6: " + ", ".join(f"{k}={v:.2f}x" for k, v in ratios.items()) + f", {elapsed:.1f}s")
    print("  hm4 ms/step per sequence: " + " ".join(f"{_median_latency(runs['hm4'], s):.3f}" for s in range(5)))
    print("  baseline ms/step per sequence: "
          + " ".join(f"{_median_latency(runs['baseline'], s):.3f}" for s in range(5)))
    assert ratios["hm4_mem"] < 1.5
    assert ratios["hm4_lat"] < 1.5
    assert ratios["base_mem"] >= 3.0
    assert ratios["base_lat"] >= 3.0
    assert elapsed < 120.0


# -- 7 ------------------------------------------------------------------------

def _localization(tmp_path, noise):
    spacing = 10.0
    world_cfg = SyntheticWorldConfig(num_places=200, appearance_noise=noise, seed=3, place_spacing_m=spacing,
                                     num_query_sequences=2, descriptors_per_image=40, feat_dim=32)
    cfg = ScenarioConfig(synthetic=world_cfg, params=Params(K=20, L=16, M=4), seed=3, out_dir=str(tmp_path))
    world = prepare_world(cfg)
    # true place of every query frame, from the generator itself
    places = generate_synthetic_world(world_cfg).query_places
    db = world.database[0]
    jac = np.mean([jaccard_distance(db[pl[k]], q)
                   for codes, pl in zip(world.queries, places) for k, q in enumerate(codes)])
    report = run_scenario(cfg, world, tmp_path / "store")
    errs = np.array([r["error_m"] for r in report.trace])
    return float(jac), float(np.mean(errs <= spacing)), len(errs)


@criterion(7, "localization: zero noise >= 99% within one place; noisy (Jaccard <= 0.3) >= 90%")
def test_localization(tmp_path):
    t0 = time.perf_counter()
    jac0, acc0, n0 = _localization(tmp_path / "clean", 0.0)
    jac, acc, n = _localization(tmp_path / "noisy", 0.015)
    elapsed = time.perf_counter() - t0
    print(f"criterion 7: zero noise {acc0:.4f} of {n0} frames; noise 0.015 -> mean intra-place "
          f"Jaccard {jac:.3f}, accuracy {acc:.4f} of {n} frames; {elapsed:.1f}s")
    assert jac0 == 0.0 and acc0 >= 0.99
    assert jac <= 0.3 and acc >= 0.90
    assert elapsed < 60.0


INVARIANTS = "invariant suites: map mutations, K-modes monotone, triangle inequality, belief normalization"


# -- 8 ------------------------------------------------------------------------

@criterion(8, INVARIANTS)
def test_map_mutations():
    rng = np.random.default_rng(8)
    E = graph.init_sequence_transitions(50)
    for _ in range(10_000):
        op = rng.integers(0, 3)
        if op == 0 and E.N < 1000:
            graph.append_sequence(E, graph.init_sequence_transitions(int(rng.integers(1, 20))))
        elif op == 1:
            n = int(rng.integers(1, 10))
            n_before = int(rng.integers(0, E.N - n + 1))
            graph.link_matches(E, [(t, int(rng.integers(0, E.N))) for t in range(n)], n_before)
        else:
            i, j = (int(x) for x in rng.integers(0, E.N, size=2))
            E.set(i, j, float(rng.uniform(0.01, 1.0)))
            E.normalize_rows([i])
    a = E.toarray()
    assert a.min() >= 0
    assert np.abs(a.sum(axis=1) - 1).max() <= 1e-9


@criterion(8, INVARIANTS)
def test_kmodes_monotone():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        codes = random_codes(rng, 80, 16, 4)
        trace = kmodes_cluster(codes, 6, iters=15, seed=seed).objective_trace
        assert all(b <= a for a, b in zip(trace, trace[1:]))


@criterion(8, INVARIANTS)
def test_triangle_inequality():
    rng = np.random.default_rng(88)
    for _ in range(1000):
        D = int(rng.integers(1, 64))
        a, b, c = random_codes(rng, 3, D, int(rng.choice([2, 4, 128])))
        # mismatch counts make the inequality an exact integer check
        ab, bc, ac = (int((x != y).sum()) for x, y in ((a, b), (b, c), (a, c)))
        assert ac <= ab + bc


@criterion(8, INVARIANTS)
def test_scaling_run_normalized(scaling_runs):
    runs, _ = scaling_runs
    for rep in runs["hm4"] + runs["baseline"]:
        for s in rep.sequences:
            assert s["max_norm_err"] <= 1e-9
