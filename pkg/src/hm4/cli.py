"""Command line entry point: ``hm4 {run,baseline,encode,cluster,report}``.

Exit status is 0 on success, 2 on a configuration error and 3 on a
storage or file-format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import descriptors as desc
from . import graph, polyvlad
from .errors import ConfigError, FormatError, InvalidArgumentError, StorageError
from .scenario import ScenarioConfig, emit_report, prepare_world, run_baseline, run_scenario
from .store import PassiveStore

log = logging.getLogger("hm4")

EXIT_CONFIG = 2
EXIT_STORAGE = 3


def _scenario_config(args) -> ScenarioConfig:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    world = dict(raw.pop("world", {}) or {})
    if args.synthetic:
        try:
            world = {"synthetic": json.loads(Path(args.synthetic).read_text())}
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read synthetic world {args.synthetic}: {exc}") from exc
    if args.descriptors:
        world = {"descriptors": args.descriptors, "ground_truth": args.ground_truth}
    raw["world"] = world
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out:
        raw["out_dir"] = args.out
    return ScenarioConfig.from_dict(raw)


def _print_summary(report):
    print(f"arm={report.arm} frames={len(report.trace)}")
    for s in report.sequences:
        print(f"  seq {s['seq']}: places={s['places']} max_am_bytes={s['max_am_bytes']} "
              f"mean_step_ms={s['mean_step_ms']:.3f} lost={s['lost_events']}")
    pairs = list(zip(report.thresholds, report.accuracy))
    if pairs:
        shown = [pairs[0], pairs[len(pairs) // 2], pairs[-1]]
        print("  accuracy: " + ", ".join(f"<{th:g}m={a:.3f}" for th, a in shown))


def cmd_run(args, baseline=False):
    cfg = _scenario_config(args)
    out = Path(cfg.out_dir)
    world = prepare_world(cfg)
    runner = run_baseline if baseline else run_scenario
    report = runner(cfg, world)
    emit_report(report, out / report.arm)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    _print_summary(report)
    return 0


def cmd_encode(args):
    if not args.descriptors:
        raise ConfigError("encode needs --descriptors")
    out = Path(args.out)
    sets = [s for path in args.descriptors for s in desc.load_descriptor_file(path, renormalize=args.renormalize)]
    pool = np.concatenate([s.descriptors for s in sets])
    vocab = desc.kmeans_vocabulary(pool, args.L, args.iters, seed=args.seed)
    bank = polyvlad.sample_rotations(args.M, vocab.feat_dim, seed=args.seed + 1)
    store = PassiveStore.create(out, vocab.feat_dim, args.L, args.M)
    try:
        for path in args.descriptors:
            seq = desc.load_descriptor_file(path, renormalize=args.renormalize)
            store.put_sequence(polyvlad.encode_images(seq, vocab, bank), name=Path(path).stem)
    finally:
        store.close()
    np.save(out / "vocab.npy", vocab.centers)
    polyvlad.write_rotation_file(out / "rotations.hm4r", bank)
    print(f"encoded {len(sets)} images into {out / 'codes.hm4c'} (D={args.L * args.M})")
    return 0


def cmd_cluster(args):
    store = PassiveStore(args.out)
    try:
        if args.map:
            store.E = graph.read_map_file(args.map)
        elif store.E.N == 0:
            for s in store.sequences:
                eq = graph.init_sequence_transitions(s["stop"] - s["start"], args.V_max, args.delta)
                graph.append_sequence(store.E, eq)
        if store.E.N != store.count:
            raise ConfigError(f"map has {store.E.N} places but the store holds {store.count} codes")
        codes = store.read_all()
        model = polyvlad.kmodes_cluster(codes, args.K, args.iters, seed=args.seed)
        submap = graph.build_submap(store.E, model)
        store.save_map()
        store.save_coarse(model.centroids, submap, model.assignments)
    finally:
        store.close()
    print(f"K={args.K} objective={model.objective_trace[-1]:.4f} over {len(codes)} codes")
    return 0


def cmd_report(args):
    out = Path(args.out)
    found = False
    for arm in ("hm4", "baseline"):
        path = out / arm / "summary.json"
        if not path.exists():
            continue
        found = True
        s = json.loads(path.read_text())
        print(f"[{arm}] final places={s.get('final_places')} lost={s.get('lost_events')}")
        for row in s.get("sequences", []):
            print(f"  seq {row['seq']}: places={row['places']} max_am_bytes={row['max_am_bytes']} "
                  f"mean_step_ms={row['mean_step_ms']:.3f}")
        acc = dict(zip(s.get("thresholds", []), s.get("accuracy", [])))
        if acc:
            print("  accuracy: " + ", ".join(f"<{k:g}m={v:.3f}" for k, v in list(acc.items())[::6]))
    if not found:
        raise StorageError(f"no reports under {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hm4", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_flags(p):
        p.add_argument("--config", help="scenario JSON")
        p.add_argument("--synthetic", help="synthetic world JSON (overrides the config's world)")
        p.add_argument("--descriptors", action="append", help="HM4D file; first is the database")
        p.add_argument("--ground-truth", help="JSON of per-sequence positions for descriptor worlds")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)

    scenario_flags(sub.add_parser("run", help="two-tier HM4 scenario"))
    scenario_flags(sub.add_parser("baseline", help="full-database HMM scenario"))

    p = sub.add_parser("encode", help="descriptor files -> PolyCode store")
    p.add_argument("--descriptors", action="append", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--L", type=int, default=16)
    p.add_argument("--M", type=int, default=4)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--renormalize", action="store_true", help="rescale non-unit descriptors")

    p = sub.add_parser("cluster", help="build the coarse model for a store")
    p.add_argument("--out", required=True, help="store directory")
    p.add_argument("--map", help="HM4E map to use instead of per-sequence transitions")
    p.add_argument("--K", type=int, default=50)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--V-max", dest="V_max", type=int, default=10)
    p.add_argument("--delta", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("report", help="summarize a finished run")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "run": cmd_run,
        "baseline": lambda a: cmd_run(a, baseline=True),
        "encode": cmd_encode,
        "cluster": cmd_cluster,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, InvalidArgumentError) as exc:
        log.error("%s", exc)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StorageError, FormatError, OSError) as exc:
        print(f"storage error: {exc}", file=sys.stderr)
        return EXIT_STORAGE


if __name__ == "__main__":
    sys.exit(main())
