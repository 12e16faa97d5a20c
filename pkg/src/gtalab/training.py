"""Loss, Adam, and the training/evaluation loops."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from . import numeric_core as nc
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .model import Model
from .numeric_core import Parameter, Tape, Tensor
from .synthetic_data import VideoDataset


@dataclass(frozen=True)
class Hyper:
    epochs: int = 20
    batch: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    clip: float | None = None

    def validate(self) -> None:
        bad = []
        if self.epochs < 0:
            bad.append(f"epochs={self.epochs} must be >= 0")
        if self.batch < 1:
            bad.append(f"batch={self.batch} must be >= 1")
        for name in ("lr", "eps"):
            if not getattr(self, name) > 0:
                bad.append(f"{name}={getattr(self, name)} must be > 0")
        for name in ("beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                bad.append(f"{name}={getattr(self, name)} must lie in (0, 1)")
        if self.seed < 0:
            bad.append(f"seed={self.seed} must be >= 0")
        if self.clip is not None and not self.clip > 0:
            bad.append(f"clip={self.clip} must be > 0")
        if bad:
            raise ConfigError("; ".join(bad))

    def to_pairs(self) -> dict[str, str]:
        return {f.name: repr(getattr(self, f.name)) for f in fields(self)}


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true classes."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} do not pair with labels {labels.shape}")
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ContractError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = nc.mul(nc.log_softmax_last(logits), Tensor(onehot, _owned=True))
    return nc.scale(nc.sum_all(picked), -1.0 / labels.size)


def adam_step(params: list[Parameter], grads: dict[str, np.ndarray], state: OptimState, hyper: Hyper) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    for p in params:
        g = grads.get(p.name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient for {p.name!r} has shape {g.shape}, parameter is {p.shape}")
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros(p.shape)
            state.v[p.name] = np.zeros(p.shape)
        v = state.v[p.name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * g * g
        p.value = p.value.data - hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)


def _clip(grads: dict[str, np.ndarray], limit: float) -> None:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > limit:
        for g in grads.values():
            g *= limit / norm


def check_geometry(model: Model, ds: VideoDataset) -> None:
    s = model.spec
    want = (s.t, s.h, s.w, s.c_in)
    if len(ds) == 0:
        raise DimensionError("dataset is empty")
    if ds.geometry() != want:
        raise DimensionError(f"dataset clips are {ds.geometry()}, model expects {want}")
    labels = ds.labels()
    if labels.max() >= s.classes:
        raise DimensionError(f"dataset has label {labels.max()}, model has {s.classes} classes")


def evaluate(model: Model, ds: VideoDataset, batch: int = 256) -> tuple[float, float]:
    """(accuracy, mean loss). Ties in the argmax go to the lowest class index."""
    check_geometry(model, ds)
    correct = 0
    total_loss = 0.0
    n = len(ds)
    with nc.no_tape():
        for start in range(0, n, batch):
            idx = range(start, min(n, start + batch))
            labels = ds.labels(idx)
            logits = model(ds.frames(idx))
            total_loss += cross_entropy(logits, labels).item() * len(labels)
            correct += int((np.argmax(logits.data, axis=1) == labels).sum())
    return correct / n, total_loss / n


def train(model: Model, train_set: VideoDataset, test_set: VideoDataset | None, hyper: Hyper,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> list[EpochRecord]:
    """Adam on mini-batches; one record per epoch.

    Train loss and accuracy are averaged over the epoch's batches as they are
    seen. Shuffling draws from a generator seeded by ``hyper.seed``.
    """
    hyper.validate()
    check_geometry(model, train_set)
    if test_set is not None:
        check_geometry(model, test_set)
    rng = np.random.default_rng(hyper.seed)
    state = OptimState()
    params = model.trainable()
    history = []
    n = len(train_set)
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, hyper.batch):
            idx = order[start:start + hyper.batch]
            labels = train_set.labels(idx)
            with Tape() as tape:
                logits = model(train_set.frames(idx))
                loss = cross_entropy(logits, labels)
                tape.backward(loss)
                grads = tape.param_grads()
            if not math.isfinite(loss.item()):
                raise NumericError(f"loss diverged at epoch {epoch}")
            if hyper.clip is not None:
                _clip(grads, hyper.clip)
            adam_step(params, grads, state, hyper)
            loss_sum += loss.item() * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == labels).sum())
        test_acc, test_loss = evaluate(model, test_set) if test_set is not None else (float("nan"),) * 2
        rec = EpochRecord(epoch, loss_sum / n, correct / n, test_loss, test_acc)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return history


def write_metrics(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["epoch", "split", "loss", "accuracy"])
        for r in history:
            out.writerow([r.epoch, "train", repr(r.train_loss), repr(r.train_acc)])
            if not math.isnan(r.test_acc):
                out.writerow([r.epoch, "test", repr(r.test_loss), repr(r.test_acc)])
