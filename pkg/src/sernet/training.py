"""Weighted cross-entropy, class weighting, SGD with momentum and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, NumericError, ShapeError, UsageError
from .metrics import IGNORE_INDEX, ConfusionMatrix
from .model import Model, forward
from .seeding import rng_for
from .tensor import Tensor, detect_anomaly, no_grad, record

log = logging.getLogger(__name__)

DEFAULT_LR = 0.001
DEFAULT_BATCH = 3
DEFAULT_MOMENTUM = 0.9
DEFAULT_L2 = 1e-4
DEFAULT_EPOCHS = 80
DEFAULT_MILESTONES = (0.6, 0.85)


@dataclass
class ClassWeights:
    weights: np.ndarray
    ignore_index: int | None = IGNORE_INDEX

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1 or np.any(self.weights < 0) or not np.any(self.weights > 0):
            raise DataError(f"class weights must be a non-negative vector with a positive entry, got {self.weights}")

    @classmethod
    def uniform(cls, num_classes: int, ignore_index: int | None = IGNORE_INDEX) -> "ClassWeights":
        return cls(np.ones(num_classes), ignore_index)


def class_weights_from_frequency(
    label_maps: Iterable[np.ndarray],
    num_classes: int,
    ignore_index: int | None = IGNORE_INDEX,
    method: str = "inverse",
) -> ClassWeights:
    """Per-class loss weights from pixel frequencies.

    ``inverse``: ``N / (C * n_c)``.  ``median``: ``median(f) / f_c`` with
    ``f_c = n_c / N`` over the classes that occur.  Absent classes get 0.
    """
    counts = np.zeros(num_classes, dtype=np.int64)
    seen = False
    for lab in label_maps:
        seen = True
        v = np.asarray(lab).reshape(-1).astype(np.int64)
        if ignore_index is not None:
            v = v[v != ignore_index]
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise DataError(f"label value outside [0, {num_classes}) while counting class frequencies")
        counts += np.bincount(v, minlength=num_classes)
    total = counts.sum()
    if not seen or total == 0:
        raise DataError("cannot compute class weights from an empty dataset")
    present = counts > 0
    w = np.zeros(num_classes)
    if method == "inverse":
        w[present] = total / (num_classes * counts[present])
    elif method == "median":
        freq = counts[present] / total
        w[present] = np.median(freq) / freq
    else:
        raise ValueError(f"unknown class weighting {method!r}")
    for c in np.flatnonzero(~present):
        log.warning("class %d has no labelled pixels; its weight is 0", c)
    return ClassWeights(w, ignore_index)


def weighted_cross_entropy(logits: Tensor, labels: np.ndarray, w: ClassWeights) -> Tensor:
    """Weighted-mean pixel cross-entropy over softmax class scores.

    ``labels`` is an integer array of shape (N,1,H,W).  Pixels labelled with
    the ignore index contribute nothing.  If no pixel carries weight the loss
    is 0.
    """
    n, c, h, wd = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, 1, h, wd):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {(n, 1, h, wd)}")
    if w.weights.shape != (c,):
        raise ShapeError(f"{w.weights.shape[0]} class weights for {c} classes")
    lab = labels[:, 0].astype(np.int64)
    valid = np.ones(lab.shape, dtype=bool) if w.ignore_index is None else lab != w.ignore_index
    bad = valid & ((lab < 0) | (lab >= c))
    if bad.any():
        b, i, j = np.argwhere(bad)[0]
        raise DataError(f"label {lab[b, i, j]} at (n={b}, y={i}, x={j}) outside [0, {c})")
    safe = np.where(valid, lab, 0)

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    logp_t = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    pw = np.where(valid, w.weights[safe], 0.0)
    denom = pw.sum()
    if denom > 0:
        value = -(pw * logp_t).sum() / denom
    else:
        value = 0.0
    out = np.array(value, dtype=np.float64).reshape(1, 1, 1, 1)

    def vjp(g):
        if denom == 0:
            return (np.zeros_like(z),)
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
        grad *= (pw / denom)[:, None]
        return (grad * g.reshape(-1)[0],)

    return record("weighted_cross_entropy", out, (logits,), vjp)


# ---------------------------------------------------------------- optimiser


@dataclass
class OptimState:
    lr: float = DEFAULT_LR
    momentum: float = DEFAULT_MOMENTUM
    l2: float = DEFAULT_L2
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0 or not 0.0 <= self.momentum < 1.0 or self.l2 < 0:
            raise ValueError(f"invalid optimiser settings lr={self.lr} momentum={self.momentum} l2={self.l2}")


def sgdm_step(state: OptimState, params: Sequence[tuple[str, Tensor]]) -> None:
    """Heavy-ball update ``v = m*v - lr*(g + l2*theta); theta += v``, in place."""
    for name, t in params:
        if t.grad is None:
            raise UsageError(f"parameter {name} has no gradient; it is unreachable from the loss")
    for name, t in params:
        g = t.grad + state.l2 * t.data if state.l2 else t.grad
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(t.data)
            state.velocity[name] = v
        v *= state.momentum
        v -= state.lr * g
        t.data += v


def step_lr(base_lr: float, epoch: int, epochs: int, milestones=DEFAULT_MILESTONES, gamma: float = 0.1) -> float:
    """Piecewise-constant rate: multiplied by ``gamma`` at each milestone fraction of ``epochs``."""
    drops = sum(1 for m in milestones if epoch >= int(math.floor(m * epochs)))
    return base_lr * gamma**drops


# -------------------------------------------------------------------- loop


@dataclass
class HistoryRow:
    iter: int
    epoch: int
    loss: float
    lr: float


def history_csv(history: Sequence[HistoryRow]) -> str:
    lines = ["iter,epoch,loss,lr"]
    lines += [f"{r.iter},{r.epoch},{r.loss:.17g},{r.lr:.17g}" for r in history]
    return "\n".join(lines) + "\n"


def _batch(samples, idx, flip: bool):
    x = np.concatenate([samples[i].image.data for i in idx], axis=0)
    y = np.concatenate([samples[i].labels for i in idx], axis=0)
    if flip:
        x = x[..., ::-1]
        y = y[..., ::-1]
    return Tensor(x), np.ascontiguousarray(y)


def train(
    model: Model,
    samples: Sequence,
    epochs: int = DEFAULT_EPOCHS,
    batch_size: int = DEFAULT_BATCH,
    lr: float = DEFAULT_LR,
    momentum: float = DEFAULT_MOMENTUM,
    l2: float = DEFAULT_L2,
    milestones=DEFAULT_MILESTONES,
    gamma: float = 0.1,
    seed: int = 0,
    class_weights: ClassWeights | None = None,
    hflip: bool = False,
) -> list[HistoryRow]:
    """Train ``model`` in place on ``samples`` (objects with ``.image`` and ``.labels``).

    Sample order is reshuffled every epoch from a generator derived from
    ``seed``; the run is bit-reproducible for a given seed.
    """
    if epochs == 0:
        return []
    if not samples:
        raise DataError("training set is empty")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if class_weights is None:
        class_weights = class_weights_from_frequency((s.labels for s in samples), model.config.num_classes)
    state = OptimState(lr, momentum, l2)
    params = model.parameters()
    rng = rng_for(seed, "shuffle")
    flip_rng = rng_for(seed, "hflip")
    history: list[HistoryRow] = []
    it = 0
    for epoch in range(epochs):
        state.lr = step_lr(lr, epoch, epochs, milestones, gamma)
        order = rng.permutation(len(samples))
        epoch_loss = []
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            x, y = _batch(samples, idx, hflip and flip_rng.random() < 0.5)
            model.zero_grad()
            loss = weighted_cross_entropy(forward(model, x, training=True), y, class_weights)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(_diagnose(model, x, y, class_weights, it + 1))
            loss.backward()
            sgdm_step(state, params)
            it += 1
            history.append(HistoryRow(it, epoch, value, state.lr))
            epoch_loss.append(value)
        log.info("epoch %d/%d loss %.6f lr %g", epoch + 1, epochs, float(np.mean(epoch_loss)), state.lr)
    return history


def _diagnose(model, x, y, weights, it) -> str:
    try:
        with no_grad(), detect_anomaly():
            weighted_cross_entropy(forward(model, x, training=True), y, weights)
    except NumericError as exc:
        return f"non-finite loss at iteration {it}: {exc}"
    return f"non-finite loss at iteration {it}; all intermediate ops were finite"


# --------------------------------------------------------------- inference


def predict(model: Model, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Argmax labels (N,1,H,W); ties go to the lowest class index."""
    out = []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            logits = forward(model, Tensor(images[start : start + batch_size]), training=False).data
            out.append(np.argmax(logits, axis=1)[:, None])
    return np.concatenate(out, axis=0)


def evaluate(model: Model, samples: Sequence, batch_size: int = 8, ignore_index: int | None = IGNORE_INDEX) -> ConfusionMatrix:
    if not samples:
        raise DataError("evaluation split is empty")
    cm = ConfusionMatrix(model.config.num_classes, ignore_index)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = np.concatenate([s.image.data for s in chunk], axis=0)
        truth = np.concatenate([s.labels for s in chunk], axis=0)
        cm.accumulate(predict(model, images, batch_size), truth)
    return cm
