"""On-robot sampling policies and the bounded upload cache.

Threshold policies (confidence element above a threshold, median exemplar
distance below a threshold) plus the benchmark samplers: reservoir-random,
non-adaptive probabilistic, argmax, priority queue and the label-reading
oracle. Only :func:`oracle_select` ever sees ground-truth labels.
"""
from __future__ import annotations

import bisect
import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels

CONFIDENCE = "confidence"
EMBEDDING = "embedding"


@dataclass(frozen=True)
class SamplerParams:
    conf_thresh: float = 0.5
    emb_thresh: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.conf_thresh <= 1.0:
            raise ValueError(f"conf_thresh must lie in [0, 1], got {self.conf_thresh}")
        if not self.emb_thresh >= 0.0:
            raise ValueError(f"emb_thresh must be nonnegative, got {self.emb_thresh}")


@dataclass(frozen=True, eq=False)
class TargetSpec:
    target_classes: tuple[int, ...]
    target_exemplars: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        if not self.target_classes:
            raise ValueError("target_classes must be nonempty")
        cls = tuple(sorted(set(int(c) for c in self.target_classes)))
        ex = np.ascontiguousarray(self.target_exemplars, dtype=np.float64)
        if ex.ndim != 2:
            raise ValueError("target_exemplars must be a 2-D array")
        ex.flags.writeable = False
        object.__setattr__(self, "target_classes", cls)
        object.__setattr__(self, "target_exemplars", ex)
        object.__setattr__(self, "_idx", np.asarray(cls, dtype=np.intp))

    @property
    def n_exemplars(self) -> int:
        return self.target_exemplars.shape[0]

    def with_exemplars(self, exemplars) -> "TargetSpec":
        return TargetSpec(self.target_classes, exemplars)


@dataclass(frozen=True)
class Decision:
    a: int
    score: float
    evicted: Optional[int] = None


class Cache:
    """Bounded cache of ``(id, score, arrival)`` entries kept in arrival order."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("cache capacity must be at least 1")
        self.capacity = capacity
        self.entries: list[tuple[int, float, int]] = []
        self._offered: set[int] = set()

    def __len__(self):
        return len(self.entries)

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.capacity

    def ids(self) -> list[int]:
        return [e[0] for e in self.entries]

    def append(self, sid: int, score: float, arrival: int) -> bool:
        """Append if there is room; a full cache drops the item."""
        if self.full:
            return False
        if any(e[0] == sid for e in self.entries):
            raise ValueError(f"id {sid} already cached")
        self.entries.append((sid, score, arrival))
        return True


class PriorityCache(Cache):
    """Cache that keeps the ``capacity`` best-scoring items offered so far.

    ``confidence`` mode prefers high scores, ``embedding`` mode low scores;
    equal scores favour the earlier arrival.
    """

    def __init__(self, capacity: int, mode: str = CONFIDENCE):
        super().__init__(capacity)
        if mode not in (CONFIDENCE, EMBEDDING):
            raise ValueError(f"unknown priority mode {mode!r}")
        self.mode = mode
        self._heap: list[tuple[float, int, int]] = []  # worst item on top

    def _key(self, score: float, arrival: int) -> tuple[float, int]:
        s = score if self.mode == CONFIDENCE else -score
        return (s, -arrival)

    def offer(self, sid: int, score: float, arrival: int) -> Decision:
        key = self._key(score, arrival)
        if len(self._heap) < self.capacity:
            heapq.heappush(self._heap, (key[0], key[1], sid))
            self._sync()
            return Decision(1, score)
        if key > self._heap[0][:2]:
            _, _, out = heapq.heapreplace(self._heap, (key[0], key[1], sid))
            self._sync()
            return Decision(1, score, evicted=out)
        return Decision(0, score)

    def _sync(self):
        items = sorted(self._heap, key=lambda h: -h[1])
        sign = 1.0 if self.mode == CONFIDENCE else -1.0
        self.entries = [(sid, sign * s, -negarr) for s, negarr, sid in items]


# -- threshold policies -------------------------------------------------------------

def confidence_score(out, targets: TargetSpec) -> float:
    return _kernels.target_conf(out.conf, targets._idx)


def embedding_score(out, targets: TargetSpec) -> float:
    if targets.n_exemplars == 0:
        raise ValueError("embedding policy needs a nonempty target exemplar set")
    return _kernels.median_sq_dist(targets.target_exemplars, out.emb)


def confidence_decide(out, targets: TargetSpec, params: SamplerParams) -> Decision:
    score = _kernels.target_conf(out.conf, targets._idx)
    return Decision(1 if score > params.conf_thresh else 0, score)


def embedding_decide(out, targets: TargetSpec, params: SamplerParams) -> Decision:
    score = embedding_score(out, targets)
    return Decision(1 if score < params.emb_thresh else 0, score)


def argmax_decide(out, targets: TargetSpec) -> Decision:
    return Decision(1 if out.pred in targets.target_classes else 0,
                    _kernels.target_conf(out.conf, targets._idx))


# -- benchmark samplers --------------------------------------------------------------

def random_offer(cache: Cache, sid: int, arrival_index: int, rng: np.random.Generator) -> Decision:
    """Reservoir sampling (Algorithm R) over one round's offers.

    ``arrival_index`` is the 0-based count of items offered before this one.
    """
    if sid in cache._offered:
        raise ValueError(f"id {sid} offered twice")
    cache._offered.add(sid)
    if len(cache.entries) < cache.capacity:
        cache.entries.append((sid, math.nan, arrival_index))
        return Decision(1, math.nan)
    j = int(rng.integers(0, arrival_index + 1))
    if j < cache.capacity:
        evicted = cache.entries[j][0]
        cache.entries[j] = (sid, math.nan, arrival_index)
        return Decision(1, math.nan, evicted=evicted)
    return Decision(0, math.nan)


class DistanceWindow:
    """Sliding window of recent scores answering empirical quantile ranks."""

    def __init__(self, size: int = 1000, warmup: int = 100):
        self.size = size
        self.warmup = warmup
        self._fifo: deque[float] = deque()
        self._sorted: list[float] = []

    def __len__(self):
        return len(self._fifo)

    def rank(self, score: float) -> float:
        """Fraction of window values strictly below ``score``."""
        return bisect.bisect_left(self._sorted, score) / len(self._sorted)

    def push(self, score: float) -> None:
        self._fifo.append(score)
        bisect.insort(self._sorted, score)
        if len(self._fifo) > self.size:
            old = self._fifo.popleft()
            del self._sorted[bisect.bisect_left(self._sorted, old)]


def nonadaptive_store_probability(out, targets: TargetSpec, mode: str,
                                  dist_window: DistanceWindow | None = None) -> tuple[float, float]:
    """``(probability, score)`` for the non-adaptive sampler; does not touch the window."""
    if mode == CONFIDENCE:
        score = confidence_score(out, targets)
        return min(max(score, 0.0), 1.0), score
    if mode != EMBEDDING:
        raise ValueError(f"unknown mode {mode!r}")
    score = embedding_score(out, targets)
    if dist_window is None or len(dist_window) < dist_window.warmup:
        return 0.5, score
    return 1.0 - dist_window.rank(score), score


def nonadaptive_decide(out, targets: TargetSpec, mode: str, dist_window: DistanceWindow | None,
                       rng: np.random.Generator) -> Decision:
    """Store with probability equal to the target confidence, or to one minus the
    distance's quantile rank among recent distances (embedding mode)."""
    p, score = nonadaptive_store_probability(out, targets, mode, dist_window)
    if mode == EMBEDDING and dist_window is not None:
        dist_window.push(score)
    return Decision(1 if rng.random() < p else 0, score)


def priority_offer(cache: PriorityCache, sid: int, score: float, mode: str, arrival: int | None = None) -> Decision:
    if mode != cache.mode:
        raise ValueError(f"cache mode {cache.mode!r} does not match {mode!r}")
    if arrival is None:
        arrival = len(cache._offered)
    cache._offered.add(sid)
    return cache.offer(sid, score, arrival)


def oracle_select(round_samples, targets: TargetSpec, n: int, rng: np.random.Generator) -> list[int]:
    """Uniform random subset of the round's true target samples, in arrival order."""
    hits = [k for k, s in enumerate(round_samples) if s.true_label in targets.target_classes]
    if len(hits) > n:
        chosen = rng.choice(len(hits), size=n, replace=False)
        hits = [hits[k] for k in sorted(chosen)]
    return [round_samples[k].id for k in hits]


# -- policy objects used by the round loop ------------------------------------------------

POLICIES = (
    "harvest_conf",
    "harvest_emb",
    "harvest_pq_conf",
    "harvest_pq_emb",
    "random",
    "nonadaptive_conf",
    "nonadaptive_emb",
    "argmax",
    "oracle",
)

ADAPTIVE = {"harvest_conf", "harvest_emb", "harvest_pq_conf", "harvest_pq_emb"}
NEEDS_EXEMPLARS = {"harvest_emb", "harvest_pq_emb", "nonadaptive_emb"}


class StreamPolicy:
    """Per-robot sampler state for one named policy.

    ``offer`` handles one timestep and returns ``(decision, stored)``: the
    policy's raw decision and whether the item is in the cache afterwards.
    """

    def __init__(self, name: str, n_cache: int, window: DistanceWindow | None = None):
        if name not in POLICIES:
            raise ValueError(f"unknown policy {name!r}; valid policies: {', '.join(POLICIES)}")
        self.name = name
        self.n_cache = n_cache
        self.window = window if window is not None else DistanceWindow()

    def new_cache(self) -> Cache:
        if self.name == "harvest_pq_conf":
            return PriorityCache(self.n_cache, CONFIDENCE)
        if self.name == "harvest_pq_emb":
            return PriorityCache(self.n_cache, EMBEDDING)
        return Cache(self.n_cache)

    def offer(self, cache: Cache, sid: int, t: int, out, targets: TargetSpec, params: SamplerParams,
              rng: np.random.Generator) -> tuple[Decision, bool]:
        name = self.name
        if name == "harvest_conf":
            dec = confidence_decide(out, targets, params)
        elif name == "harvest_emb":
            dec = embedding_decide(out, targets, params)
        elif name == "argmax":
            dec = argmax_decide(out, targets)
        elif name == "nonadaptive_conf":
            dec = nonadaptive_decide(out, targets, CONFIDENCE, None, rng)
        elif name == "nonadaptive_emb":
            dec = nonadaptive_decide(out, targets, EMBEDDING, self.window, rng)
        elif name == "harvest_pq_conf":
            dec = priority_offer(cache, sid, confidence_score(out, targets), CONFIDENCE, t)
            return dec, bool(dec.a)
        elif name == "harvest_pq_emb":
            dec = priority_offer(cache, sid, embedding_score(out, targets), EMBEDDING, t)
            return dec, bool(dec.a)
        elif name == "random":
            dec = random_offer(cache, sid, t, rng)
            return dec, bool(dec.a)
        else:
            raise ValueError("the oracle policy selects at round end via oracle_select")
        stored = bool(dec.a) and cache.append(sid, dec.score, t)
        return dec, stored
