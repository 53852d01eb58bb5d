import dataclasses
import math

import numpy as np
import pytest

from harvestnet.data import ConfigError, SensorSample
from harvestnet.perception import TrainHP
from harvestnet.simulate import (
    METRIC_COLUMNS,
    ReplayMismatch,
    Scenario,
    SimConfig,
    auc,
    compare_policies,
    init_state,
    metrics_csv,
    read_metrics_csv,
    read_run_log,
    replay,
    run_round,
    run_simulation,
    savings_from_fraction,
    savings_report,
    write_run_log,
)

FAST = TrainHP(epochs=60, step_size=0.1)


def cfg_for(scn_cfg, policy="harvest_conf", **kw):
    return SimConfig(n_rounds=scn_cfg.n_rounds, steps_per_round=scn_cfg.steps_per_round, n_cache=10,
                     policy=policy, train=FAST, seed=scn_cfg.seed, **kw)


def test_metric_columns_exact():
    assert METRIC_COLUMNS == ("policy", "seed", "round", "test_accuracy", "test_loss", "val_accuracy", "cache_size",
                              "cache_precision", "cache_recall", "cumulative_sampled", "conf_thresh", "emb_thresh",
                              "retrain_ms", "decide_us_median")


def test_auc_matches_pair_count(rng):
    s, y = rng.random(50), rng.random(50) < 0.3
    pos, neg = s[y], s[~y]
    pairs = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    assert auc(s, y) == pytest.approx(pairs / (len(pos) * len(neg)))
    assert auc([0.1, 0.1, 0.1], [1, 0, 1]) == 0.5


@pytest.mark.parametrize("policy", ["harvest_conf", "random", "harvest_pq_emb", "nonadaptive_emb", "oracle"])
def test_csv_is_byte_identical(small_synth, small_scenario, policy):
    cfg = cfg_for(small_synth, policy)
    a = metrics_csv(run_simulation(cfg, small_scenario).rounds)
    b = metrics_csv(run_simulation(cfg, Scenario.from_synth(small_synth)).rounds)
    assert a == b
    assert a.splitlines()[0] == ",".join(METRIC_COLUMNS)


@pytest.mark.parametrize("policy", ["harvest_conf", "harvest_emb", "argmax", "nonadaptive_conf", "random", "harvest_pq_conf"])
def test_metrics_rows_well_formed(small_synth, small_scenario, policy):
    cfg = cfg_for(small_synth, policy)
    res = run_simulation(cfg, small_scenario)
    assert len(res.rounds) == cfg.n_rounds
    prev = 0
    for i, m in enumerate(res.rounds):
        assert m.round == i and m.cache_size <= cfg.n_cache
        assert 0 <= m.cache_precision <= 1 and 0 <= m.cache_recall <= 1
        assert prev <= m.cumulative_sampled <= (i + 1) * cfg.n_cache
        assert 0 <= m.test_accuracy <= 1 and m.test_loss >= 0
        prev = m.cumulative_sampled


@pytest.mark.parametrize("policy", ["harvest_conf", "harvest_emb", "harvest_pq_conf", "harvest_pq_emb", "argmax",
                                    "random", "nonadaptive_conf", "nonadaptive_emb", "oracle"])
def test_replay_reproduces_metrics(tmp_path, small_synth, small_scenario, policy):
    cfg = cfg_for(small_synth, policy)
    res = run_simulation(cfg, small_scenario)
    write_run_log(tmp_path / "log.jsonl", res.log)
    log = read_run_log(tmp_path / "log.jsonl")
    assert log == res.log
    again = replay(cfg, small_scenario, log)
    assert metrics_csv(again) == metrics_csv(res.rounds)


def test_replay_detects_tampering(small_synth, small_scenario):
    cfg = cfg_for(small_synth)
    res = run_simulation(cfg, small_scenario)
    log = [dict(r) for r in res.log]
    k = next(j for j, r in enumerate(log) if r["a"] == 0)
    log[k]["a"] = 1
    with pytest.raises(ReplayMismatch):
        replay(cfg, small_scenario, log)


def test_thresholds_have_no_lookahead(small_synth, small_scenario):
    full = run_simulation(cfg_for(small_synth), small_scenario)
    short = run_simulation(dataclasses.replace(cfg_for(small_synth), n_rounds=2), small_scenario)
    assert full.thresholds[:3] == short.thresholds
    assert metrics_csv(full.rounds[:2]) == metrics_csv(short.rounds)


def test_oracle_round_without_targets_keeps_model(small_synth):
    base = Scenario.from_synth(small_synth)
    samples = dict(base.samples)
    for i in base.manifest.rounds[0]:
        s = samples[i]
        if s.true_label == 0:
            samples[i] = SensorSample(s.id, s.round, s.t, s.embedding, 1)
    scn = Scenario(base.header, samples, base.manifest, base.seed_ids, base.test_ids)
    cfg = cfg_for(small_synth, "oracle")
    state = init_state(cfg, scn)
    new_state, m, records = run_round(cfg, scn, state)
    assert len(records) == cfg.steps_per_round
    assert m.cache_size == 0 and len(new_state.D) == len(state.D)
    assert new_state.model.same_weights(state.model)


@pytest.mark.parametrize("policy", ["harvest_conf", "harvest_emb", "harvest_pq_conf", "random", "nonadaptive_emb", "argmax"])
def test_decisions_never_read_stream_labels(small_synth, small_scenario, policy):
    # relabel every round-0 stream sample: round-0 decisions must not change
    samples = dict(small_scenario.samples)
    for i in small_scenario.manifest.rounds[0]:
        s = samples[i]
        samples[i] = SensorSample(s.id, s.round, s.t, s.embedding, (s.true_label + 1) % 5)
    alt = Scenario(small_scenario.header, samples, small_scenario.manifest, small_scenario.seed_ids,
                   small_scenario.test_ids)
    cfg = dataclasses.replace(cfg_for(small_synth, policy), n_rounds=1)
    a = run_simulation(cfg, small_scenario).log
    b = run_simulation(cfg, alt).log
    assert a == b


def test_config_mismatch_reported_before_round_zero(small_scenario):
    with pytest.raises(ConfigError, match="steps_per_round"):
        run_simulation(SimConfig(n_rounds=3, steps_per_round=50, n_cache=5), small_scenario)
    with pytest.raises(ConfigError, match="n_rounds"):
        run_simulation(SimConfig(n_rounds=9, steps_per_round=200, n_cache=5), small_scenario)
    with pytest.raises(ConfigError, match="n_cache"):
        SimConfig(n_cache=0)


def test_compare_single_random_matches_direct_run(small_synth, small_scenario):
    cfg = cfg_for(small_synth, "random")
    res = compare_policies(small_synth, cfg, ["random"], 1)
    direct = run_simulation(cfg, small_scenario)
    assert len(res.runs) == 1
    assert metrics_csv(res.metrics_rows()) == metrics_csv(direct.rounds)


def test_compare_parallel_equals_serial(small_synth):
    cfg = cfg_for(small_synth)
    pols = ["random", "harvest_conf"]
    a = compare_policies(small_synth, cfg, pols, 2, jobs=1)
    b = compare_policies(small_synth, cfg, pols, 2, jobs=2)
    assert metrics_csv(a.metrics_rows()) == metrics_csv(b.metrics_rows())
    assert [(r.policy, r.seed) for r in a.runs] == [("harvest_conf", 11), ("harvest_conf", 12), ("random", 11), ("random", 12)]
    s = a.summary()
    assert set(s) == set(pols) and s["random"]["n_seeds"] == 2


def test_compare_rejects_unknown_policy(small_synth):
    with pytest.raises(ConfigError, match="valid policies"):
        compare_policies(small_synth, cfg_for(small_synth), ["foo"], 1)


def test_oracle_replicates_are_averaged(small_synth):
    cfg = dataclasses.replace(cfg_for(small_synth, "oracle"), oracle_repeats=3)
    res = compare_policies(small_synth, cfg, ["oracle"], 1)
    scn = Scenario.from_synth(small_synth)
    reps = [run_simulation(cfg, scn, replicate=r).accuracy_curve for r in range(3)]
    np.testing.assert_allclose(res.runs[0].curve, np.mean(reps, axis=0))


def test_savings_examples():
    assert savings_from_fraction(0.343) == pytest.approx(0.657)
    assert savings_from_fraction(0.187) == pytest.approx(0.813)
    s = savings_report(0, 1000)
    assert s.sampled_fraction == 0 and s.reduction == 1


def test_metrics_csv_round_trip(tmp_path, small_synth, small_scenario):
    res = run_simulation(cfg_for(small_synth, record_timing=True), small_scenario)
    p = tmp_path / "m.csv"
    p.write_text(metrics_csv(res.rounds, record_timing=True))
    rows = read_metrics_csv(p)
    assert [r["round"] for r in rows] == [0, 1, 2]
    assert rows[0]["test_accuracy"] == res.rounds[0].test_accuracy
    assert rows[0]["retrain_ms"] >= 0 and not math.isnan(rows[0]["decide_us_median"])
    p.write_text(metrics_csv(res.rounds))
    assert math.isnan(read_metrics_csv(p)[0]["retrain_ms"])


def test_files_scenario_matches_synthetic(tmp_path, small_synth, small_scenario):
    from harvestnet.data import gen_synthetic, write_dataset, write_manifest
    header, samples, manifest, seed_ids, test_ids = gen_synthetic(small_synth)
    write_dataset(header, samples, tmp_path / "d.hvst")
    write_manifest(tmp_path / "m.json", manifest, seed_ids, test_ids)
    scn = Scenario.from_files(tmp_path / "d.hvst", tmp_path / "m.json")
    cfg = cfg_for(small_synth)
    assert metrics_csv(run_simulation(cfg, scn).rounds) == metrics_csv(run_simulation(cfg, small_scenario).rounds)
