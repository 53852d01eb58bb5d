import math
import statistics
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from harvestnet.data import SensorSample
from harvestnet.perception import ModelOutput
from harvestnet.sampler import (
    CONFIDENCE,
    EMBEDDING,
    POLICIES,
    Cache,
    DistanceWindow,
    PriorityCache,
    SamplerParams,
    StreamPolicy,
    TargetSpec,
    argmax_decide,
    confidence_decide,
    embedding_decide,
    nonadaptive_decide,
    nonadaptive_store_probability,
    oracle_select,
    priority_offer,
    random_offer,
)

T0 = TargetSpec((0,))


def out_conf(conf, emb=None):
    conf = np.asarray(conf, dtype=float)
    emb = np.zeros(2) if emb is None else np.asarray(emb, dtype=float)
    return ModelOutput(int(np.argmax(conf)), conf, emb)


def test_params_validated():
    with pytest.raises(ValueError):
        SamplerParams(conf_thresh=1.5)
    with pytest.raises(ValueError):
        SamplerParams(emb_thresh=-1)


def test_confidence_decide_examples():
    d = confidence_decide(out_conf([0.9, 0.1]), T0, SamplerParams(0.5))
    assert (d.a, d.score) == (1, 0.9)
    assert confidence_decide(out_conf([1.0, 0.0]), T0, SamplerParams(1.0)).a == 0
    assert confidence_decide(out_conf([0.5, 0.5]), T0, SamplerParams(0.5)).a == 0


def test_multi_target_score_is_max():
    d = confidence_decide(out_conf([0.1, 0.3, 0.6]), TargetSpec((0, 1)), SamplerParams(0.2))
    assert d.score == 0.3 and d.a == 1


def _scan(scores, thresh, n, above=True):
    hits = [k for k, s in enumerate(scores) if (s > thresh if above else s < thresh)]
    return hits[:n]


@pytest.mark.parametrize("seed", range(5))
def test_confidence_cache_equals_scan_oracle(seed):
    rng = np.random.default_rng(seed)
    conf = rng.dirichlet(np.ones(3), size=1000)
    thresh = float(rng.uniform(0.2, 0.8))
    pol = StreamPolicy("harvest_conf", 20)
    cache = pol.new_cache()
    flags = []
    for t, c in enumerate(conf):
        dec, _ = pol.offer(cache, 1000 + t, t, out_conf(c), T0, SamplerParams(thresh), rng)
        flags.append(dec.a)
    oracle = [k for k, c in enumerate(conf) if c[0] > thresh]
    assert [k for k, a in enumerate(flags) if a] == oracle
    assert cache.ids() == [1000 + k for k in oracle[:20]]


def test_embedding_decide_examples():
    ex = np.array([[1.0, 2.0]])
    spec = TargetSpec((0,), ex)
    d = embedding_decide(out_conf([1, 0], emb=[1.0, 2.0]), spec, SamplerParams(emb_thresh=1e-9))
    assert (d.a, d.score) == (1, 0.0)
    # squared distances 1, 2, 3, 4 from the origin
    ex4 = np.array([[1.0, 0.0], [1.0, 1.0], [math.sqrt(3), 0], [2.0, 0.0]])
    d = embedding_decide(out_conf([1, 0], emb=[0.0, 0.0]), TargetSpec((0,), ex4), SamplerParams(emb_thresh=2.5))
    assert d.score == pytest.approx(2.5) and d.a == 0


def test_embedding_decide_needs_exemplars():
    with pytest.raises(ValueError):
        embedding_decide(out_conf([1, 0]), T0, SamplerParams(emb_thresh=1.0))


def test_embedding_matches_sort_median_oracle(rng):
    ex = rng.standard_normal((18, 16))
    spec = TargetSpec((0,), ex)
    thresh = 30.0
    for _ in range(500):
        e = rng.standard_normal(16) * 1.3
        dists = sorted(sum((e[j] - x[j]) ** 2 for j in range(16)) for x in ex)
        med = (dists[8] + dists[9]) / 2
        d = embedding_decide(out_conf([1, 0], emb=e), spec, SamplerParams(emb_thresh=thresh))
        assert d.score == pytest.approx(med, rel=1e-12)
        assert d.a == int(med < thresh)


@given(st.lists(st.floats(0, 1), min_size=2, max_size=6), st.floats(0, 1))
def test_threshold_decisions_are_pure(conf, thresh):
    o = out_conf(conf)
    p = SamplerParams(thresh)
    assert confidence_decide(o, T0, p) == confidence_decide(o, T0, p)


def test_argmax_examples():
    assert argmax_decide(out_conf([0.6, 0.4]), T0).a == 1
    assert argmax_decide(out_conf([0.4, 0.6]), T0).a == 0
    assert argmax_decide(out_conf([0.5, 0.5]), T0).a == 1


def test_reservoir_small_stream_keeps_all(rng):
    c = Cache(5)
    for t in range(4):
        assert random_offer(c, t, t, rng).a == 1
    assert c.ids() == [0, 1, 2, 3]


def test_reservoir_inclusion_frequency():
    rng = np.random.default_rng(2024)
    counts = np.zeros(4)
    trials = 100_000
    for _ in range(trials):
        c = Cache(2)
        for t in range(4):
            random_offer(c, t, t, rng)
        for sid in c.ids():
            counts[sid] += 1
    assert np.all(np.abs(counts / trials - 0.5) <= 0.01)


def test_reservoir_deterministic_and_duplicate():
    def run(seed):
        rng, c = np.random.default_rng(seed), Cache(3)
        for t in range(50):
            random_offer(c, t, t, rng)
        return c.ids()
    assert run(9) == run(9)
    c = Cache(3)
    random_offer(c, 1, 0, np.random.default_rng(0))
    with pytest.raises(ValueError, match="twice"):
        random_offer(c, 1, 1, np.random.default_rng(0))


def test_nonadaptive_confidence_frequency():
    rng = np.random.default_rng(7)
    n = 100_000
    hits = sum(nonadaptive_decide(out_conf([0.9, 0.1]), T0, CONFIDENCE, None, rng).a for _ in range(n))
    assert abs(hits / n - 0.9) <= 0.01
    assert sum(nonadaptive_decide(out_conf([0.0, 1.0]), T0, CONFIDENCE, None, rng).a for _ in range(1000)) == 0


def test_nonadaptive_embedding_window(rng):
    spec = TargetSpec((0,), np.zeros((1, 2)))
    w = DistanceWindow(size=1000, warmup=100)
    assert nonadaptive_store_probability(out_conf([1, 0], emb=[1, 0]), spec, EMBEDDING, w)[0] == 0.5
    for v in rng.uniform(1, 10, 1000):
        w.push(float(v))
    lo = min(w._sorted)
    p, score = nonadaptive_store_probability(out_conf([1, 0], emb=[math.sqrt(lo), 0]), spec, EMBEDDING, w)
    assert score == pytest.approx(lo)
    assert p >= (1000 - 1) / 1000


def test_distance_window_slides():
    w = DistanceWindow(size=3, warmup=1)
    for v in (5.0, 1.0, 2.0, 9.0):
        w.push(v)
    assert len(w) == 3 and w._sorted == [1.0, 2.0, 9.0]
    assert w.rank(2.0) == pytest.approx(1 / 3)


def test_priority_small_trace():
    c = PriorityCache(2, CONFIDENCE)
    assert priority_offer(c, 1, 0.3, CONFIDENCE, 0).evicted is None
    assert priority_offer(c, 2, 0.9, CONFIDENCE, 1).evicted is None
    d = priority_offer(c, 3, 0.5, CONFIDENCE, 2)
    assert d.a == 1 and d.evicted == 1
    assert sorted(s for _, s, _ in c.entries) == [0.5, 0.9]


def test_priority_under_capacity():
    c = PriorityCache(5, EMBEDDING)
    for k, s in enumerate([3.0, 1.0, 2.0]):
        assert priority_offer(c, k, s, EMBEDDING, k).evicted is None
    assert c.ids() == [0, 1, 2]


def _top_n(scores, n, mode):
    order = sorted(range(len(scores)), key=lambda k: ((-scores[k] if mode == CONFIDENCE else scores[k]), k))
    return set(order[:n])


@pytest.mark.parametrize("mode", [CONFIDENCE, EMBEDDING])
def test_priority_equals_sort_oracle(mode):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        # coarse rounding forces many ties
        scores = np.round(rng.random(10_000), 2).tolist()
        c = PriorityCache(20, mode)
        for k, s in enumerate(scores):
            priority_offer(c, k, s, mode, k)
            assert len(c) <= 20
        assert set(c.ids()) == _top_n(scores, 20, mode)


def test_priority_mode_mismatch():
    with pytest.raises(ValueError):
        priority_offer(PriorityCache(2, CONFIDENCE), 1, 0.1, EMBEDDING)


def _samples(labels):
    return [SensorSample(100 + k, 0, k, np.zeros(2), lab) for k, lab in enumerate(labels)]


def test_oracle_examples(rng):
    s = _samples([0, 1, 0, 2, 0, 0, 3, 0])
    assert oracle_select(s, T0, 10, rng) == [100, 102, 104, 105, 107]
    assert oracle_select(_samples([1, 2, 3]), T0, 5, rng) == []


@given(st.lists(st.integers(0, 3), max_size=60), st.integers(1, 10), st.integers(0, 1000))
def test_oracle_only_returns_targets(labels, n, seed):
    s = _samples(labels)
    ids = oracle_select(s, TargetSpec((0, 2)), n, np.random.default_rng(seed))
    lab = {x.id: x.true_label for x in s}
    assert len(ids) == min(n, sum(x in (0, 2) for x in labels))
    assert all(lab[i] in (0, 2) for i in ids)
    assert ids == sorted(ids)


def test_oracle_uniform_subset_frequency():
    rng = np.random.default_rng(3)
    s = _samples([0] * 30)
    counts = np.zeros(30)
    trials = 100_000
    for _ in range(trials):
        for i in oracle_select(s, T0, 3, rng):
            counts[i - 100] += 1
    assert np.all(np.abs(counts / trials - 0.1) <= 0.01)


@pytest.mark.parametrize("name", [p for p in POLICIES if p != "oracle"])
@given(seed=st.integers(0, 2**32 - 1), n_cache=st.integers(1, 8))
def test_cache_bound_every_policy(name, seed, n_cache):
    rng = np.random.default_rng(seed)
    spec = TargetSpec((0,), rng.standard_normal((4, 3)))
    pol = StreamPolicy(name, n_cache)
    cache = pol.new_cache()
    params = SamplerParams(0.3, 3.0)
    for t in range(60):
        o = out_conf(rng.dirichlet(np.ones(3)), emb=rng.standard_normal(3))
        pol.offer(cache, t, t, o, spec, params, rng)
        assert len(cache) <= n_cache
        assert len(set(cache.ids())) == len(cache)


def test_unknown_policy():
    with pytest.raises(ValueError, match="valid policies"):
        StreamPolicy("foo", 3)


def test_decision_latency():
    rng = np.random.default_rng(0)
    o1 = out_conf(rng.dirichlet(np.ones(5)))
    spec = TargetSpec((0,), rng.standard_normal((18, 128)))
    o2 = ModelOutput(0, o1.conf, rng.standard_normal(128))
    p = SamplerParams(0.5, 100.0)
    for fn, o in ((confidence_decide, o1), (embedding_decide, o2)):
        times = []
        for _ in range(2000):
            t = time.perf_counter()
            fn(o, spec, p)
            times.append(time.perf_counter() - t)
        assert statistics.median(times) < 1e-4
