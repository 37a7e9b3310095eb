import numpy as np
import pytest

from hm4 import graph
from hm4.hmm import TieredState
from hm4.polyvlad import code_dtype
from hm4.store import ActiveMemory, PassiveStore


def random_codes(rng, n, D, feat_dim):
    return rng.integers(0, 2 * feat_dim, size=(n, D)).astype(code_dtype(feat_dim))


def make_state(directory, codes, E, labels, centroids, feat_dim, L=None, M=1):
    """PS holding ``codes`` and map ``E``, AM holding the given coarse model."""
    D = codes.shape[1]
    L = L or D // M
    store = PassiveStore.create(directory, feat_dim, L, M)
    store.put_sequence(codes)
    store.E = E
    submap = graph.build_submap(E, labels)
    am = ActiveMemory(centroids, submap, labels, feat_dim, store.code_bytes)
    return TieredState(store, am)


def random_map(rng, N, extra_edges=0):
    """Banded forward chain plus random extra edges, row-normalized."""
    E = graph.init_sequence_transitions(N, V_max=3, delta=2.0)
    for _ in range(extra_edges):
        i, j = rng.integers(0, N, size=2)
        E.set(int(i), int(j), float(rng.uniform(0.05, 1.0)))
    E.normalize_rows(range(N))
    return E


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance criteria reporting -------------------------------------------

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "ran": False})
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        terminalreporter.write_line(f"{status} criterion {number}: {e['title']}")
