"""Losses, learning-rate schedule and the training loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .model import Model
from .numerics import Adam, Tensor, functional as F, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 128
    warmup_epochs: int = 2
    final_lr_fraction: float = 0.1
    loss_kind: str = "cross_entropy"
    triplet_margin: float = 0.15
    writers_per_batch: int = 4
    samples_per_writer: int = 4
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if not 0 < self.final_lr_fraction <= 1:
            raise ConfigError(f"final_lr_fraction must be in (0, 1], got {self.final_lr_fraction}")
        if self.loss_kind not in ("cross_entropy", "triplet"):
            raise ConfigError(f"loss_kind must be cross_entropy or triplet, got {self.loss_kind!r}")
        if self.triplet_margin <= 0:
            raise ConfigError(f"triplet margin must be > 0, got {self.triplet_margin}")
        if self.writers_per_batch < 2 or self.samples_per_writer < 2:
            raise ConfigError("triplet sampler needs >= 2 writers and >= 2 samples per writer")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- losses ---------------------------------------------------------------------


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"label {labels[i]} of sample {i} outside [0, {k})")
    picked = F.take(F.log_softmax(logits, axis=1), (np.arange(n), labels.astype(np.int64)))
    return F.scale(F.mean(picked), -1.0)


def hardest_pairs(desc: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per anchor: farthest same-label and nearest other-label sample.

    Returns ``(anchors, positives, negatives)`` index arrays restricted to
    anchors that have at least one positive.
    """
    labels = np.asarray(labels)
    n = len(labels)
    anchors, pos, neg = [], [], []
    for a in range(n):
        d = np.sqrt(((desc - desc[a]) ** 2).sum(axis=1))
        same = labels == labels[a]
        same[a] = False
        other = labels != labels[a]
        if not same.any() or not other.any():
            continue
        ps = np.flatnonzero(same)
        ns = np.flatnonzero(other)
        anchors.append(a)
        pos.append(ps[np.argmax(d[ps])])
        neg.append(ns[np.argmin(d[ns])])
    return np.array(anchors, dtype=np.int64), np.array(pos, dtype=np.int64), np.array(neg, dtype=np.int64)


def _pair_distance(desc: Tensor, i: np.ndarray, j: np.ndarray) -> Tensor:
    diff = F.add(F.take(desc, i), F.scale(F.take(desc, j), -1.0))
    # clamp keeps sqrt differentiable for coincident points
    return F.sqrt(F.clamp_min(F.sum(F.square(diff), axis=1), 1e-24))


def batch_hard_triplet_loss(desc: Tensor, labels, margin: float = 0.15) -> Tensor:
    """Mean over valid anchors of ``max(0, d(a, hardest pos) - d(a, hardest neg) + margin)``.

    Distances are Euclidean on the given (l2-normalised) descriptors.
    """
    labels = np.asarray(labels)
    if margin <= 0:
        raise ConfigError(f"margin must be > 0, got {margin}")
    if len(np.unique(labels)) < 2:
        raise DataError("degenerate triplet batch: all samples share one label")
    a, p, n = hardest_pairs(desc.data, labels)
    if a.size == 0:
        raise DataError("degenerate triplet batch: no label occurs twice, so no anchor has a positive")
    d_pos = _pair_distance(desc, a, p)
    d_neg = _pair_distance(desc, a, n)
    terms = F.relu(F.add(F.add(d_pos, F.scale(d_neg, -1.0)), margin))
    return F.mean(terms)


# -- schedule -------------------------------------------------------------------


def lr_at(step: int, total_steps: int, cfg: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Linear warmup from 0, then cosine annealing down to ``lr * final_lr_fraction``."""
    if not 0 <= step < total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps})")
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return cfg.lr * step / warm
    span = total_steps - 1 - warm
    progress = 1.0 if span <= 0 else (step - warm) / span
    if progress == 0.0:
        return cfg.lr
    if progress == 1.0:
        return cfg.lr * cfg.final_lr_fraction
    f = cfg.final_lr_fraction
    return cfg.lr * (f + (1.0 - f) * 0.5 * (1.0 + math.cos(math.pi * progress)))


# -- batching -------------------------------------------------------------------


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def pq_batches(labels: np.ndarray, p: int, q: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Class-balanced batches of ``p`` writers x ``q`` samples covering ~one epoch."""
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ConfigError("triplet training needs at least two writers")
    by_class = {c: np.flatnonzero(labels == c) for c in classes}
    p = min(p, len(classes))
    nbatches = max(1, math.ceil(len(labels) / (p * q)))
    batches = []
    for _ in range(nbatches):
        chosen = rng.choice(classes, size=p, replace=False)
        idx = []
        for c in chosen:
            members = by_class[c]
            idx.extend(rng.choice(members, size=q, replace=len(members) < q))
        batches.append(np.array(idx))
    return batches


# -- loop -----------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float | None = None
    global_step: int = 0


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model.forward(images[i : i + batch_size], with_logits=True)["logits"].data)
    return np.concatenate(out)


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    return float((predict_logits(model, images).argmax(axis=1) == labels).mean())


def _batch_loss(model: Model, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, training: bool, rng) -> Tensor:
    if cfg.loss_kind == "cross_entropy":
        out = model.forward(x, training=training, rng=rng, with_logits=True)
        return cross_entropy_loss(out["logits"], y)
    out = model.forward(x, training=training)
    return batch_hard_triplet_loss(out["descriptor"], y, cfg.triplet_margin)


def validation_metric(model: Model, images, labels, cfg: TrainConfig) -> tuple[float, float]:
    """Return ``(loss, score)``; higher score is better."""
    with no_grad():
        if cfg.loss_kind == "cross_entropy":
            logits = predict_logits(model, images)
            loss = float(cross_entropy_loss(Tensor(logits), labels).data)
            return loss, float((logits.argmax(axis=1) == labels).mean())
        desc = np.concatenate(
            [model.forward(images[i : i + 64])["descriptor"].data for i in range(0, len(images), 64)]
        )
        loss = float(batch_hard_triplet_loss(Tensor(desc), labels, cfg.triplet_margin).data)
        return loss, -loss


def train(
    model: Model,
    images: np.ndarray,
    labels,
    cfg: TrainConfig,
    val_images: np.ndarray | None = None,
    val_labels=None,
    log_path=None,
    checkpoint_path=None,
    resume: dict | None = None,
    meta: dict | None = None,
) -> TrainResult:
    """Train ``model`` in place on ``images`` (N x C x H x W) with integer ``labels``.

    With validation data the best-scoring weights (identification accuracy for
    cross-entropy, negated triplet loss otherwise) are kept and, if
    ``checkpoint_path`` is given, saved there after every improvement.
    ``resume`` is the dict returned by :func:`load_training_state`; ``meta``
    is stored verbatim in every checkpoint written.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    if cfg.loss_kind == "triplet" and len(np.unique(labels)) < 2:
        raise ConfigError("triplet training needs at least two writers")
    if cfg.loss_kind == "cross_entropy":
        k = model.cfg.num_classes
        if not k:
            raise ConfigError("cross-entropy training needs a model with num_classes set")
        if labels.max() >= k:
            raise DataError(f"label {labels.max()} exceeds classifier size {k}")

    images = np.asarray(images, dtype=model.dtype)
    has_val = val_images is not None and len(val_images) > 0
    if has_val:
        val_images = np.asarray(val_images, dtype=model.dtype)
        val_labels = np.asarray(val_labels, dtype=np.int64)

    if cfg.loss_kind == "cross_entropy":
        steps_per_epoch = math.ceil(len(images) / cfg.batch_size)
    else:
        p = min(cfg.writers_per_batch, len(np.unique(labels)))
        steps_per_epoch = max(1, math.ceil(len(images) / (p * cfg.samples_per_writer)))
    total_steps = cfg.epochs * steps_per_epoch

    opt = Adam(model.parameters(), lr=cfg.lr)
    result = TrainResult()
    start_epoch = 0
    best_state = None
    if resume is not None:
        opt.state = resume["optimizer"]
        start_epoch = resume["epoch"] + 1
        result.global_step = resume["global_step"]
        result.best_metric = resume.get("best_metric")
        result.best_epoch = resume.get("best_epoch", -1)

    logf = open(log_path, "a", encoding="utf-8") if log_path else None

    def emit(rec: dict) -> None:
        result.history.append(rec)
        if logf:
            logf.write(json.dumps(rec, sort_keys=True) + "\n")
            logf.flush()

    try:
        for epoch in range(start_epoch, cfg.epochs):
            rng = np.random.default_rng([cfg.seed, epoch])
            if cfg.loss_kind == "cross_entropy":
                batches = shuffled_batches(len(images), cfg.batch_size, rng)
            else:
                batches = pq_batches(labels, cfg.writers_per_batch, cfg.samples_per_writer, rng)
            epoch_losses = []
            for idx in batches:
                step = result.global_step
                lr = lr_at(step, total_steps, cfg, steps_per_epoch)
                model.zero_grad()
                loss = _batch_loss(model, images[idx], labels[idx], cfg, True, rng)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise FloatingPointError(f"non-finite loss {value} at step {step}")
                loss.backward()
                if lr > 0:
                    opt.step(lr)
                result.lr_history.append(lr)
                result.step_losses.append(value)
                epoch_losses.append(value)
                emit({"epoch": epoch, "step": step, "lr": lr, "loss": value, "split": "train"})
                result.global_step += 1
            emit(
                {
                    "epoch": epoch,
                    "step": result.global_step,
                    "lr": result.lr_history[-1],
                    "loss": float(np.mean(epoch_losses)),
                    "split": "train_epoch",
                }
            )
            improved = False
            if has_val:
                vloss, score = validation_metric(model, val_images, val_labels, cfg)
                emit(
                    {
                        "epoch": epoch,
                        "step": result.global_step,
                        "lr": result.lr_history[-1],
                        "loss": vloss,
                        "split": "val",
                        "score": score,
                    }
                )
                if result.best_metric is None or score > result.best_metric:
                    result.best_metric, result.best_epoch = score, epoch
                    best_state = model.state_dict()
                    improved = True
            else:
                result.best_epoch = epoch
                improved = True
            if checkpoint_path and improved:
                save_training_state(checkpoint_path, model, opt, epoch, result, cfg, meta)
            if checkpoint_path:
                save_training_state(Path(checkpoint_path).with_suffix(".last"), model, opt, epoch, result, cfg, meta)
    finally:
        if logf:
            logf.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    return result


def save_training_state(
    path, model: Model, opt: Adam, epoch: int, result: TrainResult, cfg: TrainConfig, meta: dict | None = None
):
    extra = {}
    for i, (m, v) in enumerate(zip(opt.state.m, opt.state.v)):
        extra[f"optim.m.{i}"] = m
        extra[f"optim.v.{i}"] = v
    meta = {
        **(meta or {}),
        "train_config": cfg.to_dict(),
        "epoch": epoch,
        "global_step": result.global_step,
        "optimizer_step": opt.state.step,
        "best_epoch": result.best_epoch,
        "best_metric": result.best_metric,
    }
    model.save(path, extra_tensors=extra, meta=meta)


def load_training_state(path) -> tuple[Model, dict]:
    """Load a training checkpoint; returns the model and a ``resume`` dict for :func:`train`."""
    from .numerics.optim import AdamState

    model, meta, extra = Model.load(path)
    nparams = len(model.params)
    state = AdamState(step=int(meta.get("optimizer_step", 0)))
    if "optim.m.0" in extra:
        state.m = [extra[f"optim.m.{i}"].copy() for i in range(nparams)]
        state.v = [extra[f"optim.v.{i}"].copy() for i in range(nparams)]
    resume = {
        "optimizer": state,
        "epoch": int(meta.get("epoch", -1)),
        "global_step": int(meta.get("global_step", 0)),
        "best_metric": meta.get("best_metric"),
        "best_epoch": meta.get("best_epoch", -1),
        "train_config": meta.get("train_config", {}),
        "meta": meta,
    }
    return model, resume
