"""Linear softmax head over fixed embeddings.

The robot's perception model: inference (prediction, per-class confidence,
embedding passthrough), warm-started full-batch retraining and evaluation on
labelled embedding sets.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainHP:
    epochs: int = 200
    step_size: float = 0.1
    l2: float = 1e-4
    max_halvings: int = 20
    warm_start: bool = True
    tol: float = 0.0


@dataclass(frozen=True, eq=False)
class PerceptionModel:
    W: np.ndarray
    b: np.ndarray
    round_trained: int = 0

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64, order="C")
        b = np.array(self.b, dtype=np.float64)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise ValueError(f"inconsistent shapes W{W.shape} b{b.shape}")
        if not (np.isfinite(W).all() and np.isfinite(b).all()):
            raise ValueError("model parameters must be finite")
        W.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def K(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    @classmethod
    def zeros(cls, K: int, d: int) -> "PerceptionModel":
        return cls(np.zeros((K, d)), np.zeros(K), 0)

    def same_weights(self, other: "PerceptionModel") -> bool:
        return np.array_equal(self.W, other.W) and np.array_equal(self.b, other.b)


@dataclass(frozen=True, eq=False)
class ModelOutput:
    pred: int
    conf: np.ndarray
    emb: np.ndarray


@dataclass(frozen=True)
class EvalResult:
    loss: float
    accuracy: float
    per_class_accuracy: tuple[float, ...]
    n: int


def _embedding_of(x) -> np.ndarray:
    emb = getattr(x, "embedding", x)
    return np.ascontiguousarray(emb, dtype=np.float64)


def predict(model: PerceptionModel, x) -> ModelOutput:
    """Softmax prediction for one sample (a ``SensorSample`` or a raw embedding)."""
    emb = _embedding_of(x)
    if emb.shape != (model.dim,):
        raise ValueError(f"dimension mismatch: input has shape {emb.shape}, model dim={model.dim}")
    conf = _kernels.softmax_row(model.W @ emb + model.b)
    return ModelOutput(int(np.argmax(conf)), conf, emb)


def predict_proba(model: PerceptionModel, X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise ValueError(f"dimension mismatch: inputs {X.shape}, model dim={model.dim}")
    return _kernels.softmax_rows(np.ascontiguousarray(X @ model.W.T + model.b))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))


# weight counts at or below this use the fully looped kernel rather than BLAS
_NARROW = 16


def loss_and_grad(W, b, X, y, l2=0.0, sample_weight=None):
    """Mean cross-entropy plus ``0.5 * l2 * ||W||^2`` and its gradient.

    The bias is not regularized. ``sample_weight`` (optional, length n)
    turns the mean into a weighted mean.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.intp)
    n = X.shape[0]
    if sample_weight is None:
        wts = np.full(n, 1.0 / n)
    else:
        wts = np.ascontiguousarray(sample_weight, dtype=np.float64)
        wts = wts / wts.sum()
    W = np.ascontiguousarray(W, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if W.size <= _NARROW:
        gW = np.empty_like(W)
        gb = np.empty_like(b)
        loss = _kernels.xent_grad(W, b, X, y, wts, l2, gW, gb)
        return loss, gW, gb
    logits = np.ascontiguousarray(X @ W.T + b)
    resid = np.empty_like(logits)
    loss = _kernels.xent_resid(logits, y, wts, resid) + 0.5 * l2 * float(np.vdot(W, W))
    gW = resid.T @ X + l2 * W
    gb = resid.sum(axis=0)
    return loss, gW, gb


def fit_softmax(W0, b0, X, y, hp: TrainHP, sample_weight=None):
    """Full-batch gradient descent with step halving on any loss increase.

    Returns ``(W, b, losses)``; ``losses[k]`` is the objective after epoch k
    (``losses[0]`` is the starting objective). A positive ``hp.tol`` stops
    early once an epoch improves the objective by less than ``tol`` relative.
    """
    W = np.array(W0, dtype=np.float64)
    b = np.array(b0, dtype=np.float64)
    loss, gW, gb = loss_and_grad(W, b, X, y, hp.l2, sample_weight)
    if not math.isfinite(loss):
        raise TrainingError("non-finite initial loss", 0)
    losses = [loss]
    eta = hp.step_size
    for epoch in range(1, hp.epochs + 1):
        for _ in range(hp.max_halvings + 1):
            W1 = W - eta * gW
            b1 = b - eta * gb
            loss1, gW1, gb1 = loss_and_grad(W1, b1, X, y, hp.l2, sample_weight)
            if math.isfinite(loss1) and loss1 <= loss:
                break
            eta *= 0.5
        else:
            if not math.isfinite(loss1):
                raise TrainingError("non-finite loss after all step halvings", epoch)
            # no descent even at the smallest step: keep current weights
            losses.append(loss)
            continue
        done = loss - loss1 <= hp.tol * max(abs(loss), 1.0)
        W, b, loss, gW, gb = W1, b1, loss1, gW1, gb1
        losses.append(loss)
        if hp.tol > 0.0 and done:
            break
    return W, b, losses


def retrain(model: PerceptionModel, X, y, hp: TrainHP = TrainHP(), round_trained: int | None = None,
            sample_weight=None) -> PerceptionModel:
    """Return a new model trained on ``(X, y)``, warm-started from ``model`` by default."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("training set must be a nonempty 2-D array")
    if X.shape[1] != model.dim:
        raise ValueError(f"dimension mismatch: inputs {X.shape}, model dim={model.dim}")
    if y.min() < 0 or y.max() >= model.K:
        raise ValueError("training label out of range")
    if hp.warm_start:
        W0, b0 = model.W, model.b
    else:
        W0, b0 = np.zeros_like(model.W), np.zeros_like(model.b)
    W, b, _ = fit_softmax(W0, b0, X, y, hp, sample_weight)
    rt = model.round_trained + 1 if round_trained is None else round_trained
    return PerceptionModel(W, b, rt)


def evaluate(model: PerceptionModel, X, y) -> EvalResult:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty set")
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise ValueError(f"dimension mismatch: inputs {X.shape}, model dim={model.dim}")
    logp = _log_softmax(X @ model.W.T + model.b)
    pred = np.argmax(logp, axis=1)
    correct = pred == y
    # fsum makes the mean independent of evaluation order
    loss = math.fsum(-logp[np.arange(len(y)), y]) / len(y)
    per_class = []
    for c in range(model.K):
        mask = y == c
        per_class.append(float(correct[mask].mean()) if mask.any() else float("nan"))
    return EvalResult(max(loss, 0.0), float(correct.sum()) / len(y), tuple(per_class), len(y))


def embedding_distance(a, b) -> float:
    """Squared Euclidean distance between two embeddings."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return _kernels.sq_dist(a, b)


def save_model(model: PerceptionModel, path) -> None:
    doc = {
        "d": model.dim,
        "K": model.K,
        "W": model.W.reshape(-1).tolist(),
        "b": model.b.tolist(),
        "round_trained": model.round_trained,
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_model(path) -> PerceptionModel:
    doc = json.loads(Path(path).read_text())
    d, K = int(doc["d"]), int(doc["K"])
    W = np.asarray(doc["W"], dtype=np.float64)
    if W.size != K * d or len(doc["b"]) != K:
        raise ValueError("checkpoint shapes do not match d and K")
    return PerceptionModel(W.reshape(K, d), np.asarray(doc["b"]), int(doc["round_trained"]))
