"""End-to-end scenarios: bootstrap a database, replay query sequences,
localize each frame, fold the localized sequence back into the database,
and score the decisions against ground truth.

Two arms share the world, encoding and update logic: the two-tier arm
(:func:`run_scenario`) and the full-database filter (:func:`run_baseline`).
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import descriptors as desc
from . import graph, hmm, polyvlad
from .errors import ConfigError, InvalidArgumentError, LostStateError
from .store import ActiveMemory, PassiveStore, refresh_coarse, snapshot_metrics

DEFAULT_THRESHOLDS = [float(t) for t in range(1, 26)]


@dataclass
class Params:
    V_max: int = 10
    delta: float = 3.0
    sigma: float = 0.03
    zeta: float = 0.00015
    cap: int = 100
    K: int = 50
    L: int = 16
    M: int = 4
    transition_exponent_sign: int = -1
    kmeans_iters: int = 20
    kmodes_iters: int = 20
    vocab_pool: int = 20000
    read_delay_s: float = 0.0

    def observation(self) -> hmm.ObservationParams:
        return hmm.ObservationParams(self.sigma, self.zeta, self.cap)


@dataclass
class ScenarioConfig:
    synthetic: desc.SyntheticWorldConfig | None = None
    descriptor_files: list[str] = field(default_factory=list)
    ground_truth_file: str | None = None
    params: Params = field(default_factory=Params)
    seed: int = 0
    update_every: int = 1
    thresholds: list[float] = field(default_factory=lambda: list(DEFAULT_THRESHOLDS))
    out_dir: str = "hm4_out"

    def __post_init__(self):
        if self.synthetic is None and not self.descriptor_files:
            raise ConfigError("scenario needs a synthetic world or descriptor files")
        if self.synthetic is not None and self.descriptor_files:
            raise ConfigError("choose either a synthetic world or descriptor files, not both")
        th = [float(t) for t in self.thresholds]
        if not th or any(t <= 0 for t in th) or th != sorted(th):
            raise ConfigError("thresholds must be positive and sorted ascending")
        self.thresholds = th
        if self.update_every < 0:
            raise ConfigError("update_every must be >= 0")
        p = self.params
        if p.K < 1 or p.L < 2 or p.M < 1 or p.cap < 1 or p.sigma <= 0:
            raise ConfigError("invalid parameter block")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        try:
            world = d.pop("world", {}) or {}
            synthetic = world.get("synthetic", d.pop("synthetic", None))
            if isinstance(synthetic, dict):
                synthetic = desc.SyntheticWorldConfig(**synthetic)
            params = d.pop("params", {}) or {}
            known = {f.name for f in fields(Params)}
            unknown = set(params) - known
            if unknown:
                raise ConfigError(f"unknown parameters {sorted(unknown)}")
            return cls(
                synthetic=synthetic,
                descriptor_files=list(world.get("descriptors", d.pop("descriptor_files", [])) or []),
                ground_truth_file=world.get("ground_truth", d.pop("ground_truth_file", None)),
                params=Params(**params),
                **d,
            )
        except (TypeError, InvalidArgumentError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "world": {"synthetic": asdict(self.synthetic) if self.synthetic else None,
                      "descriptors": self.descriptor_files, "ground_truth": self.ground_truth_file},
            "params": asdict(self.params),
            "seed": self.seed,
            "update_every": self.update_every,
            "thresholds": self.thresholds,
            "out_dir": self.out_dir,
        }


@dataclass
class EvaluationReport:
    arm: str
    thresholds: list[float]
    accuracy: list[float]
    trace: list[dict]
    sequences: list[dict]
    steps: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def evaluate(trace, ground_truth, thresholds, circumference=None) -> np.ndarray:
    """Fraction of decisions whose position error is below each threshold.

    ``trace`` yields ``(query_image_id, matched_image_id)`` pairs and
    ``ground_truth`` maps image ids to positions in meters.
    """
    errs = []
    for qid, mid in trace:
        if qid not in ground_truth or mid not in ground_truth:
            raise InvalidArgumentError(f"no ground truth for decision {qid} -> {mid}")
        errs.append(position_error(ground_truth[qid], ground_truth[mid], circumference))
    errs = np.asarray(errs, dtype=np.float64)
    th = np.asarray(thresholds, dtype=np.float64)
    if len(errs) == 0:
        return np.zeros(len(th))
    return (errs[None, :] < th[:, None]).mean(axis=1)


def position_error(a: float, b: float, circumference=None) -> float:
    e = abs(a - b)
    if circumference:
        e = min(e, circumference - e)
    return e


# -- world preparation ---------------------------------------------------------

@dataclass
class PreparedWorld:
    database: list[np.ndarray]  # codes per database sequence
    queries: list[np.ndarray]  # codes per query sequence
    database_ids: list[list[tuple[int, int]]]
    query_ids: list[list[tuple[int, int]]]
    ground_truth: dict
    vocab: desc.Vocabulary
    bank: polyvlad.RotationBank
    circumference: float | None = None

    @property
    def feat_dim(self) -> int:
        return self.vocab.feat_dim


def _load_world(cfg: ScenarioConfig):
    if cfg.synthetic is not None:
        w = desc.generate_synthetic_world(cfg.synthetic)
        return w.database, w.queries, w.ground_truth, w.circumference
    seqs = [desc.load_descriptor_file(p, sequence=s) for s, p in enumerate(cfg.descriptor_files)]
    gt = {}
    if cfg.ground_truth_file:
        raw = json.loads(Path(cfg.ground_truth_file).read_text())
        for s, positions in raw.items():
            for t, pos in enumerate(positions):
                gt[(int(s), t)] = float(pos)
    return seqs[:1], seqs[1:], gt, None


def prepare_world(cfg: ScenarioConfig) -> PreparedWorld:
    """Generate or load descriptors, fit the vocabulary, encode every image."""
    p = cfg.params
    database, queries, gt, circ = _load_world(cfg)
    pool = np.concatenate([s.descriptors for seq in database for s in seq])
    rng = np.random.default_rng([cfg.seed, 1])
    if len(pool) > p.vocab_pool:
        pool = pool[np.sort(rng.choice(len(pool), p.vocab_pool, replace=False))]
    vocab = desc.kmeans_vocabulary(pool, p.L, p.kmeans_iters, seed=cfg.seed)
    bank = polyvlad.sample_rotations(p.M, vocab.feat_dim, seed=cfg.seed + 1)
    enc = lambda seq: polyvlad.encode_images(seq, vocab, bank)
    return PreparedWorld(
        database=[enc(s) for s in database],
        queries=[enc(s) for s in queries],
        database_ids=[[s.image_id for s in seq] for seq in database],
        query_ids=[[s.image_id for s in seq] for seq in queries],
        ground_truth=gt, vocab=vocab, bank=bank, circumference=circ,
    )


# -- shared database maintenance ------------------------------------------------

class _Database:
    """PS plus the bookkeeping both arms need to grow it sequence by sequence."""

    def __init__(self, directory, world: PreparedWorld, cfg: ScenarioConfig):
        p = cfg.params
        self.cfg = cfg
        self.store = PassiveStore.create(directory, world.feat_dim, p.L, p.M, p.read_delay_s,
                                         params=asdict(p))
        self.place_images: list[tuple[int, int]] = []
        for codes, ids in zip(world.database, world.database_ids):
            self._append(codes, ids, matches=None)

    @property
    def E(self) -> graph.TransitionMatrix:
        return self.store.E

    def _append(self, codes, image_ids, matches, name=None):
        p = self.cfg.params
        n_before = self.E.N
        self.store.put_sequence(codes, name)
        eq = graph.init_sequence_transitions(len(codes), p.V_max, p.delta, p.transition_exponent_sign)
        graph.append_sequence(self.E, eq)
        if matches:
            graph.link_matches(self.E, matches, n_before)
        self.place_images.extend(image_ids)
        self.store.save_map()
        return n_before


def _build_coarse(db: _Database, cfg: ScenarioConfig):
    codes = db.store.read_all()
    model = polyvlad.kmodes_cluster(codes, cfg.params.K, cfg.params.kmodes_iters, seed=cfg.seed)
    submap = graph.build_submap(db.E, model)
    db.store.save_coarse(model.centroids, submap, model.assignments)
    return model.centroids, submap, model.assignments


def _update_coarse(db: _Database, centroids, labels, new_codes, decisions, lost, n_before):
    """Join each localized frame to its match's cluster and refresh the modes."""
    new_labels = np.asarray(labels)[np.asarray(decisions, dtype=np.int64)].copy()
    lost = np.asarray(lost, dtype=bool)
    if lost.any():
        new_labels[lost] = polyvlad.nearest_centroid(new_codes[lost], centroids)
    labels = np.concatenate([labels, new_labels])
    centroids = centroids.copy()
    codes = db.store.read_all()
    for k in np.unique(new_labels):
        centroids[k] = polyvlad.kmodes_centroid(codes[labels == k])
    submap = graph.build_submap(db.E, labels)
    if submap.K != len(centroids):
        raise InvalidArgumentError("cluster count changed during update")
    db.store.save_coarse(centroids, submap, labels)
    return centroids, submap, labels


def _trace_rows(world, db, seq, decisions, lost):
    rows = []
    for t, (dec, was_lost) in enumerate(zip(decisions, lost)):
        qid = world.query_ids[seq - 1][t]
        mid = db.place_images[dec]
        row = {"seq": seq, "t": t, "decision": int(dec), "matched_image": f"{mid[0]}:{mid[1]}",
               "lost": int(was_lost)}
        if qid in world.ground_truth and mid in world.ground_truth:
            qp, mp = world.ground_truth[qid], world.ground_truth[mid]
            row.update(query_pos_m=qp, match_pos_m=mp,
                       error_m=round(position_error(qp, mp, world.circumference), 9))
        rows.append(row)
    return rows


def _accuracy(world, trace, thresholds):
    pairs = []
    for r in trace:
        mid = tuple(int(x) for x in r["matched_image"].split(":"))
        pairs.append((world.query_ids[r["seq"] - 1][r["t"]], mid))
    if not world.ground_truth or any(q not in world.ground_truth for q, _ in pairs):
        return [float("nan")] * len(thresholds)
    return evaluate(pairs, world.ground_truth, thresholds, world.circumference).tolist()


def _update_due(cfg, s):
    return cfg.update_every and s % cfg.update_every == 0


# -- arms -----------------------------------------------------------------------

def run_scenario(cfg: ScenarioConfig, world: PreparedWorld | None = None,
                 directory=None) -> EvaluationReport:
    """Two-tier HM4 arm: coarse model in AM, promising codes fetched per step."""
    world = world or prepare_world(cfg)
    directory = Path(directory or Path(cfg.out_dir) / "store")
    obs = cfg.params.observation()
    db = _Database(directory, world, cfg)
    centroids, submap, labels = _build_coarse(db, cfg)
    am = ActiveMemory(centroids, submap, labels, world.feat_dim, db.store.code_bytes)
    state = hmm.TieredState(db.store, am)

    trace, seq_stats = [], []
    for s, codes in enumerate(world.queries, start=1):
        state.seq = s
        n_places = db.E.N
        first_rec = len(state.log)
        decisions, lost, norm_err = [], [], 0.0
        p = None
        for t, q in enumerate(codes):
            state.t = t
            t0 = time.perf_counter()
            was_lost = False
            if t == 0:
                p = hmm.first_frame_step(q, state, obs)
            else:
                try:
                    p, _, _ = hmm.hm4_step(p, q, state, obs)
                except LostStateError:
                    failed = state.log.records.pop()
                    p = hmm.first_frame_step(q, state, obs)
                    rec = state.log.records[-1]
                    rec.fetched = np.concatenate([failed.fetched, rec.fetched])
                    rec.evicted = np.concatenate([failed.evicted, rec.evicted])
                    rec.bytes_in += failed.bytes_in
                    rec.eac_bytes = failed.eac_bytes
                    was_lost = True
            dec = hmm.map_decision(p)
            elapsed = (time.perf_counter() - t0) * 1e3
            rec = state.log.records[-1]
            rec.step_ms = elapsed
            rec.lost = was_lost
            norm_err = max(norm_err, abs(p.sum() - 1.0))
            decisions.append(dec)
            lost.append(was_lost)
        trace.extend(_trace_rows(world, db, s, decisions, lost))
        recs = state.log.records[first_rec:]
        seq_stats.append(_sequence_stats(s, n_places, db.store, recs, am=am, norm_err=norm_err))

        if _update_due(cfg, s):
            n_before = db._append(codes, world.query_ids[s - 1], list(enumerate(decisions)), name=f"query{s}")
            centroids, submap, labels = _update_coarse(db, am.centroids, am.labels, codes, decisions, lost, n_before)
            refresh_coarse(am, centroids, submap, labels)

    metrics = snapshot_metrics(state.log)
    report = EvaluationReport(
        arm="hm4", thresholds=cfg.thresholds, accuracy=_accuracy(world, trace, cfg.thresholds),
        trace=trace, sequences=seq_stats, steps=[r.row() for r in state.log],
        summary={"arm": "hm4", "final_places": db.E.N, "K": am.K, "metrics": metrics,
                 "ps_bytes": db.store.nbytes, "lost_events": metrics.get("lost_events", 0)},
    )
    db.store.close()
    return report


def run_baseline(cfg: ScenarioConfig, world: PreparedWorld | None = None,
                 directory=None) -> EvaluationReport:
    """Full-database filter arm: every code and the whole map held in memory."""
    world = world or prepare_world(cfg)
    directory = Path(directory or Path(cfg.out_dir) / "baseline_store")
    sigma = cfg.params.sigma
    db = _Database(directory, world, cfg)
    codes_all = db.store.read_all()

    trace, seq_stats, steps = [], [], []
    for s, codes in enumerate(world.queries, start=1):
        n_places = db.E.N
        mem = codes_all.shape[0] * db.store.code_bytes + db.E.nbytes
        decisions, lost, times, norm_err = [], [], [], 0.0
        p = np.full(n_places, 1.0 / n_places)
        for t, q in enumerate(codes):
            t0 = time.perf_counter()
            o = hmm.baseline_observation(codes_all, q, sigma)
            was_lost = False
            try:
                p = hmm.baseline_filter_step(db.E, o, p)
            except LostStateError:
                p = o / o.sum()
                was_lost = True
            dec = hmm.map_decision(p)
            times.append((time.perf_counter() - t0) * 1e3)
            norm_err = max(norm_err, abs(p.sum() - 1.0))
            decisions.append(dec)
            lost.append(was_lost)
            steps.append({"seq": s, "t": t, "n_promising": n_places, "fetches": 0, "evictions": 0,
                          "bytes_in": 0, "eac_bytes": 0, "am_bytes": mem,
                          "step_ms": round(times[-1], 6), "lost": int(was_lost)})
        trace.extend(_trace_rows(world, db, s, decisions, lost))
        ms = np.array(times)
        seq_stats.append({"seq": s, "places": n_places, "ps_bytes": db.store.nbytes,
                          "max_am_bytes": mem, "mean_am_bytes": float(mem),
                          "mean_step_ms": float(ms.mean()), "p50_step_ms": float(np.median(ms)),
                          "p95_step_ms": float(np.percentile(ms, 95)),
                          "lost_events": int(sum(lost)), "max_norm_err": norm_err})
        if _update_due(cfg, s):
            db._append(codes, world.query_ids[s - 1], list(enumerate(decisions)), name=f"query{s}")
            codes_all = np.concatenate([codes_all, codes])

    report = EvaluationReport(
        arm="baseline", thresholds=cfg.thresholds, accuracy=_accuracy(world, trace, cfg.thresholds),
        trace=trace, sequences=seq_stats, steps=steps,
        summary={"arm": "baseline", "final_places": db.E.N, "ps_bytes": db.store.nbytes,
                 "lost_events": int(sum(r["lost"] for r in trace))},
    )
    db.store.close()
    return report


def _sequence_stats(s, n_places, store, recs, am, norm_err):
    ms = np.array([r.step_ms for r in recs])
    amb = np.array([r.am_bytes for r in recs])
    return {"seq": s, "places": n_places, "ps_bytes": store.nbytes,
            "max_am_bytes": int(amb.max()), "mean_am_bytes": float(amb.mean()),
            "mean_step_ms": float(ms.mean()), "p50_step_ms": float(np.median(ms)),
            "p95_step_ms": float(np.percentile(ms, 95)),
            "mean_promising": float(np.mean([r.n_promising for r in recs])),
            "bytes_in": int(sum(r.bytes_in for r in recs)),
            "lost_events": int(sum(r.lost for r in recs)),
            "state_bytes": am.state_bytes, "max_norm_err": norm_err}


# -- reporting ------------------------------------------------------------------

TRACE_COLUMNS = ["seq", "t", "decision", "matched_image", "query_pos_m", "match_pos_m", "error_m", "lost"]
SCALING_COLUMNS = ["seq", "places", "ps_bytes", "max_am_bytes", "mean_am_bytes", "mean_step_ms",
                   "p50_step_ms", "p95_step_ms", "lost_events"]
STEP_COLUMNS = ["seq", "t", "n_promising", "fetches", "evictions", "bytes_in", "eac_bytes",
                "am_bytes", "step_ms", "lost"]


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def emit_report(report: EvaluationReport, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {
        "accuracy.csv": (["threshold_m", "accuracy"],
                         [{"threshold_m": th, "accuracy": round(a, 12)}
                          for th, a in zip(report.thresholds, report.accuracy)]),
        "scaling.csv": (SCALING_COLUMNS, report.sequences),
        "trace.csv": (TRACE_COLUMNS, report.trace),
        "steps.csv": (STEP_COLUMNS, report.steps),
    }
    out = []
    for name, (cols, rows) in files.items():
        _write_csv(directory / name, cols, rows)
        out.append(directory / name)
    summary = dict(report.summary)
    summary.update(arm=report.arm, thresholds=report.thresholds, accuracy=report.accuracy,
                   sequences=report.sequences)
    (directory / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float))
    out.append(directory / "summary.json")
    return out
