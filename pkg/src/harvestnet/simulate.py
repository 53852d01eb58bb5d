"""End-to-end round loop: stream, sample, annotate, grow, retrain, adapt, evaluate.

Within a round every decision uses the model and thresholds fixed at the
start of that round. The run log keeps one record per timestep so a run can
be replayed and audited.
"""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import cloud
from .data import (
    ConfigError,
    DatasetHeader,
    SensorSample,
    StreamManifest,
    SynthConfig,
    check_manifest,
    gen_synthetic,
    load_dataset,
    load_manifest,
)
from .perception import EvalResult, PerceptionModel, TrainHP, evaluate, predict, predict_proba, retrain
from .sampler import (
    ADAPTIVE,
    NEEDS_EXEMPLARS,
    POLICIES,
    SamplerParams,
    StreamPolicy,
    TargetSpec,
    oracle_select,
)

METRIC_COLUMNS = (
    "policy", "seed", "round", "test_accuracy", "test_loss", "val_accuracy", "cache_size",
    "cache_precision", "cache_recall", "cumulative_sampled", "conf_thresh", "emb_thresh",
    "retrain_ms", "decide_us_median",
)


@dataclass(frozen=True)
class SimConfig:
    n_rounds: int = 10
    steps_per_round: int = 1000
    n_cache: int = 20
    policy: str = "harvest_conf"
    train: TrainHP = TrainHP()
    pretrain: TrainHP | None = None
    val_fraction: float = 0.15
    seed: int = 0
    oracle_repeats: int = 5
    class_weight: bool = True
    thresh_window: int | None = None
    refresh_exemplars: bool = False
    record_timing: bool = False

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"invalid value for 'policy': {self.policy!r}; valid policies: {', '.join(POLICIES)}")
        for key, ok in (
            ("n_rounds", self.n_rounds >= 1),
            ("steps_per_round", self.steps_per_round >= 1),
            ("n_cache", 1 <= self.n_cache <= self.steps_per_round),
            ("val_fraction", 0.0 < self.val_fraction < 1.0),
            ("oracle_repeats", self.oracle_repeats >= 1),
            ("seed", 0 <= self.seed < 2**63),
        ):
            if not ok:
                raise ConfigError(f"invalid value for {key!r}: {getattr(self, key)!r}")
        if self.thresh_window is not None and self.thresh_window < 1:
            raise ConfigError("invalid value for 'thresh_window'")


@dataclass
class Scenario:
    """Dataset plus stream manifest, seed set and final test set."""

    header: DatasetHeader
    samples: dict[int, SensorSample]
    manifest: StreamManifest
    seed_ids: list[int]
    test_ids: list[int]

    def __post_init__(self):
        check_manifest(self.manifest, self.seed_ids, self.test_ids, self.samples.keys())
        Xt = np.stack([self.samples[i].embedding for i in self.test_ids])
        yt = np.array([self.samples[i].true_label for i in self.test_ids], dtype=np.int64)
        self.X_test, self.y_test = Xt, yt

    @classmethod
    def from_synth(cls, cfg: SynthConfig) -> "Scenario":
        header, samples, manifest, seed_ids, test_ids = gen_synthetic(cfg)
        return cls(header, {s.id: s for s in samples}, manifest, seed_ids, test_ids)

    @classmethod
    def from_files(cls, dataset_path, manifest_path) -> "Scenario":
        header, samples = load_dataset(dataset_path)
        manifest, seed_ids, test_ids = load_manifest(manifest_path)
        by_id = {s.id: s for s in samples}
        # restore stream positions from the manifest
        for r, ids in enumerate(manifest.rounds):
            for t, sid in enumerate(ids):
                if sid in by_id:
                    s = by_id[sid]
                    by_id[sid] = SensorSample(s.id, r, t, s.embedding, s.true_label)
        return cls(header, by_id, manifest, seed_ids, test_ids)

    def round_samples(self, i: int) -> list[SensorSample]:
        return [self.samples[sid] for sid in self.manifest.rounds[i]]

    def targets(self) -> TargetSpec:
        tc = self.header.target_classes
        ex = [self.samples[i].embedding for i in self.seed_ids if self.samples[i].true_label in tc]
        ex = np.stack(ex) if ex else np.zeros((0, self.header.d))
        return TargetSpec(tc, ex)

    @property
    def total_stream_size(self) -> int:
        return sum(len(r) for r in self.manifest.rounds)


@dataclass
class RoundMetrics:
    round: int
    test_accuracy: float
    test_loss: float
    val_accuracy: float
    cache_size: int
    cache_precision: float
    cache_recall: float
    cumulative_sampled: int
    conf_thresh: float
    emb_thresh: float
    retrain_ms: float = math.nan
    decide_us_median: float = math.nan
    probe_auc: float = math.nan
    dataset_size: int = 0
    policy: str = ""
    seed: int = 0


@dataclass
class SimState:
    model: PerceptionModel
    params: SamplerParams
    D: cloud.CloudDataset
    targets: TargetSpec
    policy: StreamPolicy
    rng: np.random.Generator
    round: int = 0
    cumulative_sampled: int = 0
    train_ids: tuple[int, ...] = ()


@dataclass
class SimResult:
    policy: str
    seed: int
    rounds: list[RoundMetrics]
    log: list[dict]
    initial_eval: EvalResult
    initial_auc: float
    initial_params: SamplerParams
    thresholds: list[tuple[int, SamplerParams]] = field(default_factory=list)
    final_model: Optional[PerceptionModel] = None

    @property
    def accuracy_curve(self) -> list[float]:
        return [m.test_accuracy for m in self.rounds]


def auc(scores, positive) -> float:
    """Area under the ROC curve (Mann-Whitney, ties count one half)."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return math.nan
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def probe_auc(model: PerceptionModel, scenario: Scenario, targets: TargetSpec) -> float:
    P = predict_proba(model, scenario.X_test)
    score = P[:, list(targets.target_classes)].max(axis=1)
    return auc(score, np.isin(scenario.y_test, targets.target_classes))


def _rng(seed: int, replicate: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x5A11, replicate]))


def check_config(cfg: SimConfig, scenario: Scenario) -> None:
    if cfg.n_rounds > scenario.manifest.n_rounds:
        raise ConfigError(
            f"invalid value for 'n_rounds': {cfg.n_rounds} exceeds the manifest's {scenario.manifest.n_rounds} rounds"
        )
    lengths = {len(r) for r in scenario.manifest.rounds[:cfg.n_rounds]}
    if lengths != {cfg.steps_per_round}:
        raise ConfigError(
            f"invalid value for 'steps_per_round': {cfg.steps_per_round} but manifest rounds have {sorted(lengths)} steps"
        )
    if cfg.policy in NEEDS_EXEMPLARS and scenario.targets().n_exemplars == 0:
        raise ConfigError(f"policy {cfg.policy!r} needs target exemplars but the seed set has none")


def init_state(cfg: SimConfig, scenario: Scenario, replicate: int = 0) -> SimState:
    """Assemble D^0, pre-train the initial model and initialize thresholds."""
    check_config(cfg, scenario)
    targets = scenario.targets()
    D0 = cloud.initial_dataset([scenario.samples[i] for i in scenario.seed_ids], scenario.test_ids)
    train_ids, _ = cloud.split(D0, cfg.val_fraction, cfg.seed)
    K, d = scenario.header.K, scenario.header.d
    model = PerceptionModel.zeros(K, d)
    if train_ids:
        X, y = D0.arrays(train_ids)
        hp = replace(cfg.pretrain or cfg.train, warm_start=True)
        model = retrain(model, X, y, hp, round_trained=0)
    params = cloud.initial_params(targets)
    if cfg.policy in ADAPTIVE:
        params = cloud.adapt_thresholds(D0, model, targets, params, class_weight=cfg.class_weight)
    return SimState(model, params, D0, targets, StreamPolicy(cfg.policy, cfg.n_cache),
                    _rng(cfg.seed, replicate), 0, 0, tuple(train_ids))


def _sample_round(cfg: SimConfig, state: SimState, round_samples: Sequence[SensorSample], i: int):
    """Robot half of a round. Returns ``(cache_ids, log_records, decide_times_us)``."""
    records = []
    times = []
    if cfg.policy == "oracle":
        chosen = oracle_select(round_samples, state.targets, cfg.n_cache, state.rng)
        picked = set(chosen)
        for t, s in enumerate(round_samples):
            a = int(s.id in picked)
            records.append({"round": i, "t": t, "id": s.id, "score": None, "a": a, "stored": a, "evicted": None})
        return chosen, records, times
    cache = state.policy.new_cache()
    timing = cfg.record_timing
    for t, s in enumerate(round_samples):
        out = predict(state.model, s)
        if timing:
            t0 = time.perf_counter_ns()
        dec, stored = state.policy.offer(cache, s.id, t, out, state.targets, state.params, state.rng)
        if timing:
            times.append((time.perf_counter_ns() - t0) / 1e3)
        records.append({
            "round": i, "t": t, "id": s.id,
            "score": None if math.isnan(dec.score) else dec.score,
            "a": dec.a, "stored": int(stored), "evicted": dec.evicted,
        })
    return cache.ids(), records, times


def _cloud_round(cfg: SimConfig, scenario: Scenario, state: SimState, round_samples, cache_ids, i: int):
    """Cloud half of a round; returns ``(new_state, RoundMetrics)``."""
    truth = {s.id: s.true_label for s in round_samples}
    uploads = {s.id: s.embedding for s in round_samples}
    annotated = cloud.annotate(cache_ids, truth)
    D1 = cloud.dataset_update(state.D, annotated, uploads, i)
    train_ids, val_ids = cloud.split(D1, cfg.val_fraction, cfg.seed)
    t0 = time.perf_counter()
    model = state.model
    if tuple(train_ids) != state.train_ids:
        X, y = D1.arrays(train_ids)
        model = retrain(state.model, X, y, cfg.train, round_trained=i + 1)
    retrain_ms = (time.perf_counter() - t0) * 1e3
    targets = state.targets
    if cfg.refresh_exemplars:
        new_targets = [sid for sid, lab in annotated if lab in targets.target_classes and sid not in state.D]
        if new_targets:
            targets = targets.with_exemplars(
                np.vstack([targets.target_exemplars] + [uploads[s][None, :] for s in new_targets])
            )
    params = state.params
    if cfg.policy in ADAPTIVE:
        params = cloud.adapt_thresholds(D1, model, targets, state.params, class_weight=cfg.class_weight,
                                        window=cfg.thresh_window, current_round=i)
    test = evaluate(model, scenario.X_test, scenario.y_test)
    val_acc = math.nan
    if val_ids:
        Xv, yv = D1.arrays(val_ids)
        val_acc = evaluate(model, Xv, yv).accuracy
    tc = targets.target_classes
    hits = sum(1 for _, lab in annotated if lab in tc)
    stream_targets = sum(1 for s in round_samples if s.true_label in tc)
    n_cached = len(cache_ids)
    cumulative = state.cumulative_sampled + n_cached
    metrics = RoundMetrics(
        round=i,
        test_accuracy=test.accuracy,
        test_loss=test.loss,
        val_accuracy=val_acc,
        cache_size=n_cached,
        cache_precision=hits / n_cached if n_cached else 0.0,
        cache_recall=hits / stream_targets if stream_targets else 0.0,
        cumulative_sampled=cumulative,
        conf_thresh=params.conf_thresh,
        emb_thresh=params.emb_thresh,
        retrain_ms=retrain_ms,
        probe_auc=probe_auc(model, scenario, targets),
        dataset_size=len(D1),
        policy=cfg.policy,
        seed=cfg.seed,
    )
    new_state = SimState(model, params, D1, targets, state.policy, state.rng, i + 1, cumulative, tuple(train_ids))
    return new_state, metrics


def run_round(cfg: SimConfig, scenario: Scenario, state: SimState, round_samples=None):
    """One learning round. Returns ``(new_state, metrics, log_records)``."""
    i = state.round
    if round_samples is None:
        round_samples = scenario.round_samples(i)
    cache_ids, records, times = _sample_round(cfg, state, round_samples, i)
    if len(cache_ids) > cfg.n_cache:
        raise AssertionError("cache exceeded its capacity")
    new_state, metrics = _cloud_round(cfg, scenario, state, round_samples, cache_ids, i)
    if times:
        metrics.decide_us_median = statistics.median(times)
    return new_state, metrics, records


def run_simulation(cfg: SimConfig, scenario: Scenario, replicate: int = 0) -> SimResult:
    state = init_state(cfg, scenario, replicate)
    initial_eval = evaluate(state.model, scenario.X_test, scenario.y_test)
    result = SimResult(cfg.policy, cfg.seed, [], [], initial_eval,
                       probe_auc(state.model, scenario, state.targets), state.params,
                       [(0, state.params)])
    for _ in range(cfg.n_rounds):
        state, metrics, records = run_round(cfg, scenario, state)
        result.rounds.append(metrics)
        result.log.extend(records)
        result.thresholds.append((state.round, state.params))
    result.final_model = state.model
    return result


# -- replay ---------------------------------------------------------------------------

DETERMINISTIC = {"harvest_conf", "harvest_emb", "harvest_pq_conf", "harvest_pq_emb", "argmax"}


class ReplayMismatch(AssertionError):
    pass


def replay(cfg: SimConfig, scenario: Scenario, log_records: Sequence[dict]) -> list[RoundMetrics]:
    """Rebuild every round's cache from a run log and redo the cloud steps.

    For deterministic policies each logged decision is also recomputed
    against the frozen model and thresholds of its round; any difference
    raises :class:`ReplayMismatch`.
    """
    by_round: dict[int, list[dict]] = {}
    for rec in log_records:
        by_round.setdefault(int(rec["round"]), []).append(rec)
    state = init_state(cfg, scenario)
    out = []
    for i in range(cfg.n_rounds):
        recs = sorted(by_round.get(i, []), key=lambda r: r["t"])
        round_samples = scenario.round_samples(i)
        if [r["id"] for r in recs] != [s.id for s in round_samples]:
            raise ReplayMismatch(f"round {i}: logged ids do not match the manifest")
        if cfg.policy in DETERMINISTIC:
            cache = state.policy.new_cache()
            for rec, s in zip(recs, round_samples):
                dec, stored = state.policy.offer(cache, s.id, rec["t"], predict(state.model, s),
                                                 state.targets, state.params, state.rng)
                logged_score = math.nan if rec["score"] is None else rec["score"]
                if (dec.a, int(stored), dec.evicted) != (rec["a"], rec["stored"], rec["evicted"]) or not (
                    dec.score == logged_score or (math.isnan(dec.score) and math.isnan(logged_score))
                ):
                    raise ReplayMismatch(f"round {i} t={rec['t']}: decision differs from the log")
        cache_ids = []
        for rec in recs:
            if rec["evicted"] is not None:
                cache_ids.remove(rec["evicted"])
            if rec["stored"]:
                cache_ids.append(rec["id"])
        state, metrics = _cloud_round(cfg, scenario, state, round_samples, _slot_order(cfg, recs, cache_ids), i)
        out.append(metrics)
    return out


def _slot_order(cfg: SimConfig, recs, cache_ids):
    """Cache order as the live run holds it (reservoir slots are replaced in place)."""
    if cfg.policy != "random":
        if cfg.policy.startswith("harvest_pq"):
            arrival = {r["id"]: r["t"] for r in recs}
            return sorted(cache_ids, key=lambda s: arrival[s])
        return cache_ids
    slots: list[int] = []
    for rec in recs:
        if rec["stored"]:
            if rec["evicted"] is None:
                slots.append(rec["id"])
            else:
                slots[slots.index(rec["evicted"])] = rec["id"]
    return slots


# -- output formats -------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def metrics_csv(rows: Sequence[RoundMetrics], record_timing: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for m in rows:
        vals = []
        for col in METRIC_COLUMNS:
            v = getattr(m, col)
            if col in ("retrain_ms", "decide_us_median") and not record_timing:
                v = math.nan
            vals.append(_fmt(v))
        w.writerow(vals)
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        row = {}
        for k, v in r.items():
            if k == "policy":
                row[k] = v
            elif k in ("seed", "round", "cache_size", "cumulative_sampled"):
                row[k] = int(v)
            else:
                row[k] = float(v) if v != "" else math.nan
        out.append(row)
    return out


def write_run_log(path, records: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_run_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- savings and policy comparison ------------------------------------------------------

@dataclass(frozen=True)
class Savings:
    cumulative_sampled: int
    total_stream_size: int
    sampled_fraction: float
    reduction: float


def savings_report(metrics: Sequence[RoundMetrics] | int, total_stream_size: int) -> Savings:
    """Fraction of the stream uploaded, and the matching linear cost reduction."""
    if isinstance(metrics, (int, np.integer)):
        sampled = int(metrics)
    else:
        sampled = metrics[-1].cumulative_sampled if metrics else 0
    if total_stream_size <= 0:
        raise ValueError("total_stream_size must be positive")
    frac = sampled / total_stream_size
    return Savings(sampled, total_stream_size, frac, 1.0 - frac)


def savings_from_fraction(sampled_fraction: float) -> float:
    return 1.0 - sampled_fraction


@dataclass
class PolicySeedResult:
    policy: str
    seed: int
    final_accuracy: float
    curve: list[float]
    initial_auc: float
    final_auc: float
    rounds: list[RoundMetrics]
    savings: Savings


@dataclass
class CompareResult:
    runs: list[PolicySeedResult]

    def by_policy(self) -> dict[str, list[PolicySeedResult]]:
        out: dict[str, list[PolicySeedResult]] = {}
        for r in self.runs:
            out.setdefault(r.policy, []).append(r)
        return out

    def summary(self) -> dict:
        doc = {}
        for pol, runs in self.by_policy().items():
            accs = [r.final_accuracy for r in runs]
            curves = np.array([r.curve for r in runs])
            doc[pol] = {
                "n_seeds": len(runs),
                "final_accuracy_mean": float(np.mean(accs)),
                "final_accuracy_std": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
                "accuracy_curve_mean": [float(v) for v in curves.mean(axis=0)],
                "sampled_fraction_mean": float(np.mean([r.savings.sampled_fraction for r in runs])),
                "reduction_mean": float(np.mean([r.savings.reduction for r in runs])),
                "per_seed": {str(r.seed): r.final_accuracy for r in runs},
            }
        return doc

    def metrics_rows(self) -> list[RoundMetrics]:
        return [m for r in self.runs for m in r.rounds]


def seed_result(policy: str, seed: int, rows: Sequence[RoundMetrics], initial_auc: float,
                total_stream_size: int) -> PolicySeedResult:
    curve = [m.test_accuracy for m in rows]
    return PolicySeedResult(policy, seed, curve[-1], curve, initial_auc, rows[-1].probe_auc, list(rows),
                            savings_report(rows, total_stream_size))


def scenario_for_seed(base: SynthConfig | Scenario, seed: int) -> Scenario:
    if isinstance(base, Scenario):
        return base
    return Scenario.from_synth(replace(base, seed=seed))


def _run_policy_seed(args) -> PolicySeedResult:
    base, cfg = args
    scenario = scenario_for_seed(base, cfg.seed)
    reps = cfg.oracle_repeats if cfg.policy == "oracle" else 1
    results = [run_simulation(cfg, scenario, replicate=r) for r in range(reps)]
    first = results[0]
    if reps > 1:
        # average replicate curves into the reported rows
        rows = []
        for k, m in enumerate(first.rounds):
            rows.append(replace(
                m,
                test_accuracy=float(np.mean([r.rounds[k].test_accuracy for r in results])),
                test_loss=float(np.mean([r.rounds[k].test_loss for r in results])),
                val_accuracy=float(np.mean([r.rounds[k].val_accuracy for r in results])),
                probe_auc=float(np.mean([r.rounds[k].probe_auc for r in results])),
            ))
    else:
        rows = first.rounds
    return seed_result(cfg.policy, cfg.seed, rows, first.initial_auc, cfg.n_rounds * cfg.steps_per_round)


def compare_policies(base: SynthConfig | Scenario, cfg_base: SimConfig, policies: Sequence[str],
                     n_seeds: int, jobs: int = 1) -> CompareResult:
    """Run every (policy, seed) pair on shared per-seed scenarios.

    Seed ``k`` uses ``cfg_base.seed + k`` both for the simulation and, when
    ``base`` is a :class:`SynthConfig`, for generating that seed's scenario.
    """
    if n_seeds < 1:
        raise ValueError("n_seeds must be at least 1")
    for p in policies:
        if p not in POLICIES:
            raise ConfigError(f"unknown policy {p!r}; valid policies: {', '.join(POLICIES)}")
    jobs_list = [
        (base, replace(cfg_base, policy=p, seed=cfg_base.seed + k))
        for p in sorted(set(policies)) for k in range(n_seeds)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_policy_seed, jobs_list))
    else:
        runs = [_run_policy_seed(j) for j in jobs_list]
    runs.sort(key=lambda r: (r.policy, r.seed))
    return CompareResult(runs)
