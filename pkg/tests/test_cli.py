import json

import numpy as np
import pytest

from hm4.cli import main
from hm4.descriptors import SyntheticWorldConfig, generate_synthetic_world, write_descriptor_file
from hm4.store import PassiveStore

WORLD = {"num_places": 40, "appearance_noise": 0.0, "seed": 3, "descriptors_per_image": 20}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"world": {"synthetic": WORLD}, "params": {"K": 8, "L": 8, "M": 2},
                                "out_dir": str(tmp_path / "out")}))
    return path


def test_run_and_report(config, tmp_path, capsys):
    assert main(["run", "--config", str(config)]) == 0
    for name in ("accuracy.csv", "scaling.csv", "trace.csv", "steps.csv", "summary.json"):
        assert (tmp_path / "out" / "hm4" / name).exists()
    assert main(["report", "--out", str(tmp_path / "out")]) == 0
    assert "[hm4]" in capsys.readouterr().out


def test_baseline(config, tmp_path):
    assert main(["baseline", "--config", str(config), "--seed", "4"]) == 0
    summary = json.loads((tmp_path / "out" / "baseline" / "summary.json").read_text())
    assert summary["accuracy"][0] == 1.0


def test_synthetic_flag_overrides_world(tmp_path):
    syn = tmp_path / "world.json"
    syn.write_text(json.dumps(dict(WORLD, num_places=20)))
    assert main(["run", "--synthetic", str(syn), "--out", str(tmp_path / "o")]) == 2  # default K=50 > 20 places
    cfg = tmp_path / "p.json"
    cfg.write_text(json.dumps({"params": {"K": 5, "L": 8, "M": 2}}))
    assert main(["run", "--config", str(cfg), "--synthetic", str(syn), "--out", str(tmp_path / "o")]) == 0


def test_bad_config_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"world": {"synthetic": WORLD}, "thresholds": [3, 1]}))
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2


def test_storage_errors_exit_3(tmp_path):
    assert main(["report", "--out", str(tmp_path / "nothing")]) == 3
    assert main(["cluster", "--out", str(tmp_path / "nothing")]) == 3
    junk = tmp_path / "junk.hm4d"
    junk.write_bytes(b"HM4Dxx")
    assert main(["encode", "--descriptors", str(junk), "--out", str(tmp_path / "e")]) == 3


def test_encode_then_cluster(tmp_path):
    w = generate_synthetic_world(SyntheticWorldConfig(num_places=30, seed=2, descriptors_per_image=15))
    write_descriptor_file(tmp_path / "a.hm4d", w.database[0])
    write_descriptor_file(tmp_path / "b.hm4d", w.queries[0])
    store = tmp_path / "store"
    assert main(["encode", "--descriptors", str(tmp_path / "a.hm4d"), "--descriptors", str(tmp_path / "b.hm4d"),
                 "--out", str(store), "--L", "8", "--M", "2"]) == 0
    assert main(["cluster", "--out", str(store), "--K", "6"]) == 0
    ps = PassiveStore(store)
    assert ps.count == 60 and ps.D == 16
    cents, sm, labels = ps.load_coarse()
    assert cents.shape == (6, 16) and len(labels) == 60
    assert np.all(np.abs(ps.E.row_sums() - 1) < 1e-12)
    # the two sequences are independent chains until a map links them
    assert ps.E[29, 30] == 0.0
