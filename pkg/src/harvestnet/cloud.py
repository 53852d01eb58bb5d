"""Cloud side of the loop: annotation, dataset growth, splitting, threshold feedback."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import _kernels
from .perception import PerceptionModel, TrainHP, TrainingError, fit_softmax, predict_proba
from .sampler import SamplerParams, TargetSpec

log = logging.getLogger(__name__)

SEED_ROUND = -1

# 1-D fits run on standardized scores
THRESH_HP = TrainHP(epochs=500, step_size=1.0, l2=0.0, max_halvings=20, warm_start=False, tol=1e-9)


class DatasetIndependenceError(ValueError):
    pass


class CloudDataset:
    """Growing annotated dataset plus the immutable held-out final test set.

    Ids are only ever added. ``round_added`` is ``-1`` for the initial seed data.
    """

    def __init__(self, final_test: Iterable[int] = ()):
        self._emb: dict[int, np.ndarray] = {}
        self._label: dict[int, int] = {}
        self.round_added: dict[int, int] = {}
        self.final_test = frozenset(int(i) for i in final_test)

    def __len__(self):
        return len(self._label)

    def __contains__(self, sid):
        return sid in self._label

    @property
    def ids(self) -> list[int]:
        return list(self._label)

    def label(self, sid: int) -> int:
        return self._label[sid]

    def embedding(self, sid: int) -> np.ndarray:
        return self._emb[sid]

    def arrays(self, ids=None):
        ids = self.ids if ids is None else list(ids)
        if not ids:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        X = np.stack([self._emb[i] for i in ids])
        y = np.array([self._label[i] for i in ids], dtype=np.int64)
        return X, y

    def copy(self) -> "CloudDataset":
        new = CloudDataset(self.final_test)
        new._emb = dict(self._emb)
        new._label = dict(self._label)
        new.round_added = dict(self.round_added)
        return new


def initial_dataset(samples, final_test_ids) -> CloudDataset:
    """D^0 from the seed samples."""
    D = CloudDataset(final_test_ids)
    return dataset_update(D, [(s.id, s.true_label) for s in samples],
                          {s.id: s.embedding for s in samples}, SEED_ROUND)


def annotate(cache_ids: Iterable[int], truth: Mapping[int, int]) -> list[tuple[int, int]]:
    """Ground-truth labels for every cached id."""
    out = []
    for sid in cache_ids:
        if sid not in truth:
            raise KeyError(f"annotation oracle does not know id {sid}")
        out.append((sid, int(truth[sid])))
    return out


def dataset_update(D: CloudDataset, annotated, embeddings: Mapping[int, np.ndarray],
                   round_i: int) -> CloudDataset:
    """Union of ``D`` with the annotated uploads; known ids are left untouched."""
    for sid, _ in annotated:
        if sid in D.final_test:
            raise DatasetIndependenceError(f"id {sid} belongs to the final test set")
    new = D.copy()
    for sid, label in annotated:
        if sid in new._label:
            continue
        new._emb[sid] = np.asarray(embeddings[sid], dtype=np.float64)
        new._label[sid] = int(label)
        new.round_added[sid] = round_i
    return new


def _unit_hash(sid: int, seed: int) -> float:
    h = hashlib.blake2b(f"{seed}:{sid}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") / 2.0**64


def split(D: CloudDataset, val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Train/val assignment by a stable hash of ``(id, seed)``."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    train, val = [], []
    for sid in D.ids:
        (val if _unit_hash(sid, seed) < val_fraction else train).append(sid)
    return train, val


@dataclass(frozen=True)
class ThresholdFit:
    threshold: float | None
    slope: float
    reason: str = ""


def fit_boundary(scores, is_target, *, higher_is_target: bool, class_weight: bool = False,
                 hp: TrainHP = THRESH_HP) -> ThresholdFit:
    """Score value where a 1-D logistic regression crosses probability 0.5.

    ``threshold`` is None when the fit is degenerate: fewer than two examples
    of either class, constant scores, a non-finite fit, or a slope whose sign
    contradicts ``higher_is_target``.
    """
    s = np.asarray(scores, dtype=np.float64)
    z = np.asarray(is_target, dtype=np.int64)
    n_pos = int(z.sum())
    if n_pos < 2 or len(z) - n_pos < 2:
        return ThresholdFit(None, 0.0, "fewer than two examples of a class")
    mu, sd = float(s.mean()), float(s.std())
    if not sd > 0.0:
        return ThresholdFit(None, 0.0, "constant scores")
    x = ((s - mu) / sd)[:, None]
    weights = None
    if class_weight:
        weights = np.where(z == 1, 0.5 / n_pos, 0.5 / (len(z) - n_pos))
    try:
        W, b, _ = fit_softmax(np.zeros((2, 1)), np.zeros(2), x, z, hp, weights)
    except TrainingError as exc:
        return ThresholdFit(None, 0.0, str(exc))
    slope = float(W[1, 0] - W[0, 0])
    intercept = float(b[1] - b[0])
    if not (np.isfinite(slope) and np.isfinite(intercept)) or slope == 0.0:
        return ThresholdFit(None, slope, "fit did not converge")
    if (slope > 0) != higher_is_target:
        return ThresholdFit(None, slope, "slope has the wrong sign")
    return ThresholdFit(mu + sd * (-intercept / slope), slope)


def threshold_scores(D: CloudDataset, model: PerceptionModel, targets: TargetSpec, ids=None):
    """Per-example ``(conf_scores, dist_scores or None, is_target)`` under ``model``."""
    X, y = D.arrays(ids)
    is_target = np.isin(y, targets.target_classes).astype(np.int64)
    if len(y) == 0:
        return np.zeros(0), None, is_target
    P = predict_proba(model, X)
    conf = P[:, list(targets.target_classes)].max(axis=1)
    dist = None
    if targets.n_exemplars:
        dist = np.array([_kernels.median_sq_dist(targets.target_exemplars, np.ascontiguousarray(x)) for x in X])
    return conf, dist, is_target


def adapt_thresholds(D: CloudDataset, model: PerceptionModel, targets: TargetSpec, prev: SamplerParams,
                     *, class_weight: bool = False, window: int | None = None,
                     current_round: int | None = None) -> SamplerParams:
    """Refit both sampler thresholds on the annotated dataset under the new model.

    Each score type gets its own 1-D logistic boundary; a degenerate fit keeps
    the previous value. ``window`` restricts the fit to examples added in the
    last ``window`` rounds (seed data counts as round -1).
    """
    ids = D.ids
    if window is not None and current_round is not None:
        lo = current_round - window + 1
        ids = [i for i in ids if D.round_added[i] >= lo]
    conf, dist, is_target = threshold_scores(D, model, targets, ids)
    conf_t = prev.conf_thresh
    fit = fit_boundary(conf, is_target, higher_is_target=True, class_weight=class_weight)
    if fit.threshold is None:
        if fit.reason != "fewer than two examples of a class":
            log.warning("confidence threshold kept at %.4g: %s", prev.conf_thresh, fit.reason)
    else:
        conf_t = min(max(fit.threshold, 0.0), 1.0)
    emb_t = prev.emb_thresh
    if dist is not None:
        fit = fit_boundary(dist, is_target, higher_is_target=False, class_weight=class_weight)
        if fit.threshold is None:
            if fit.reason != "fewer than two examples of a class":
                log.warning("distance threshold kept at %.4g: %s", prev.emb_thresh, fit.reason)
        else:
            emb_t = max(fit.threshold, 0.0)
    return SamplerParams(conf_t, emb_t)


def initial_params(targets: TargetSpec) -> SamplerParams:
    """Fallback thresholds before the first fit: confidence 0.5, distance = median
    pairwise squared distance between target exemplars."""
    ex = targets.target_exemplars
    emb = 0.0
    if ex.shape[0] >= 2:
        d = [_kernels.sq_dist(ex[i], ex[j]) for i in range(len(ex)) for j in range(i + 1, len(ex))]
        emb = float(np.median(d))
    return SamplerParams(0.5, emb)


def save_state(path, D: CloudDataset, val_fraction: float, seed: int, thresholds) -> None:
    """Audit/resume checkpoint: every example's id, label, round and split, plus
    the threshold history ``[(round, SamplerParams), ...]``."""
    train, _ = split(D, val_fraction, seed)
    train = set(train)
    doc = {
        "val_fraction": val_fraction,
        "split_seed": seed,
        "final_test": sorted(D.final_test),
        "examples": [
            {"id": i, "label": D.label(i), "round_added": D.round_added[i],
             "split": "train" if i in train else "val"}
            for i in D.ids
        ],
        "thresholds": [
            {"round": r, "conf_thresh": p.conf_thresh, "emb_thresh": p.emb_thresh}
            for r, p in thresholds
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_state(path, embeddings: Mapping[int, np.ndarray]):
    """Rebuild ``(CloudDataset, thresholds)`` from :func:`save_state` output."""
    doc = json.loads(Path(path).read_text())
    D = CloudDataset(doc["final_test"])
    for ex in doc["examples"]:
        sid = int(ex["id"])
        D._emb[sid] = np.asarray(embeddings[sid], dtype=np.float64)
        D._label[sid] = int(ex["label"])
        D.round_added[sid] = int(ex["round_added"])
    thresholds = [(int(t["round"]), SamplerParams(t["conf_thresh"], t["emb_thresh"])) for t in doc["thresholds"]]
    return D, thresholds
