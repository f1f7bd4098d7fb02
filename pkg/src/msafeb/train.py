"""Training recipe and split-protocol evaluation.

Adam with a coupled L2 penalty folded into the gradient each step, seeded
shuffling and augmentation, early stopping on validation loss with
best-epoch parameter restoration, and mean-OA +- SD aggregation over
stratified random splits.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
import numpy as np

from .data import (AugmentFlags, DataError, Dataset, DatasetSplit, augment,
                   make_splits, to_batch)
from .layers import ConfigError, softmax_cross_entropy
from .model import Model, assemble_model
from .tensor import NumericalError, ShapeError, no_grad


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    weight_decay: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 5
    dropout_rate: float = 0.5
    val_fraction: float = 0.1
    seed: int = 0
    augment: AugmentFlags = field(default_factory=AugmentFlags)
    freeze_backbone: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")


class Adam:
    """Adam with bias correction; moments kept in float64 so scripted steps
    track the exact update formula to well under 1e-6."""

    def __init__(self, params, lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(p.dims, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.dims, dtype=np.float64) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is not None and p.grad.shape != p.data.shape:
                raise ShapeError(
                    f"grad shape {p.grad.shape} != param shape {p.data.shape}")
            g = (p.grad.astype(np.float64) if p.grad is not None else 0.0) \
                + self.weight_decay * p.data.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data.astype(np.float64) - update).astype(np.float32)


class EarlyStopper:
    """Stops once the run of non-improving epochs exceeds the patience.

    With patience 1 and a loss that worsens monotonically from epoch 2, the
    stop fires at epoch 3 and the best epoch stays 1.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.streak = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.streak = 0
            return False
        self.streak += 1
        return self.streak > self.patience


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_oa: float


def _carve_validation(labels: np.ndarray, train_indices: np.ndarray,
                      val_fraction: float, rng: np.random.Generator):
    """Stratified validation carve-out from a training index set."""
    train, val = [], []
    for c in np.unique(labels[train_indices]):
        idx = train_indices[labels[train_indices] == c]
        perm = rng.permutation(idx)
        n_val = min(max(1, round(val_fraction * len(idx))), len(idx) - 1) \
            if len(idx) >= 2 else 0
        val.extend(perm[:n_val])
        train.extend(perm[n_val:])
    if not train or not val:
        raise DataError("validation carve-out left train or val empty")
    return (np.sort(np.asarray(train, dtype=np.int64)),
            np.sort(np.asarray(val, dtype=np.int64)))


def _snapshot(model: Model) -> list:
    return [arr.copy() for _, arr in model.state_stages()]


def _restore(model: Model, snapshot: list) -> None:
    for (_, arr), saved in zip(model.state_stages(), snapshot):
        arr[...] = saved


def _batched_logits(model: Model, dataset: Dataset, indices: np.ndarray,
                    batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for lo in range(0, len(indices), batch_size):
            chunk = indices[lo:lo + batch_size]
            out.append(model.forward(to_batch(dataset.images[chunk]),
                                     train=False).data)
    return np.concatenate(out, axis=0)


def _val_metrics(model: Model, dataset: Dataset, indices: np.ndarray):
    logits = _batched_logits(model, dataset, indices)
    labels = dataset.labels[indices]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(labels)), labels].mean())
    oa = float((logits.argmax(axis=1) == labels).mean())
    return loss, oa


def train(model: Model, dataset: Dataset, split: DatasetSplit,
          cfg: TrainConfig) -> list:
    """Train in place; returns per-epoch history. The model ends at the
    parameters of the best-validation-loss epoch."""
    if len(split.train_indices) == 0:
        raise DataError("empty training split")
    if split.train_indices.max() >= len(dataset) or \
            split.test_indices.max() >= len(dataset):
        raise DataError("split indices outside dataset")
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = _carve_validation(dataset.labels, split.train_indices,
                                           cfg.val_fraction, rng)
    opt = Adam(model.trainable_parameters(cfg.freeze_backbone),
               cfg.learning_rate, cfg.weight_decay)
    stopper = EarlyStopper(cfg.patience)
    best = _snapshot(model)
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(train_idx)
        total_loss, total_n = 0.0, 0
        for lo in range(0, len(perm), cfg.batch_size):
            chunk = perm[lo:lo + cfg.batch_size]
            if cfg.augment.enabled:
                imgs = np.stack([augment(dataset.images[i], rng, cfg.augment)
                                 for i in chunk])
            else:
                imgs = dataset.images[chunk]
            logits = model.forward(to_batch(imgs), train=True, rng=rng)
            loss = softmax_cross_entropy(logits, dataset.labels[chunk])
            lv = loss.item()
            if not math.isfinite(lv):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += lv * len(chunk)
            total_n += len(chunk)
        val_loss, val_oa = _val_metrics(model, dataset, val_idx)
        history.append(EpochStats(epoch, total_loss / total_n, val_loss, val_oa))
        improved = val_loss < stopper.best_loss
        stop = stopper.update(epoch, val_loss)
        if improved:
            best = _snapshot(model)
        if stop:
            break
    _restore(model, best)
    return history


def evaluate(model: Model, dataset: Dataset, test_indices: np.ndarray,
             batch_size: int = 64):
    """Eval-mode overall accuracy and confusion matrix (rows = true class)."""
    test_indices = np.asarray(test_indices, dtype=np.int64)
    if len(test_indices) == 0:
        raise DataError("empty test set")
    logits = _batched_logits(model, dataset, test_indices, batch_size)
    preds = logits.argmax(axis=1)  # ties resolve to the lowest class index
    labels = dataset.labels[test_indices]
    k = model.n_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    return float(np.trace(confusion) / confusion.sum()), confusion


# -- split protocol -------------------------------------------------------------

@dataclass
class Metrics:
    per_split_oa: list
    mean_oa: float
    sd_oa: float
    confusions: list

    @classmethod
    def from_splits(cls, oas, confusions):
        oas = [float(o) for o in oas]
        return cls(oas, float(np.mean(oas)), float(np.std(oas)), list(confusions))

    def render(self) -> str:
        """Two-decimal percent mean, three-decimal SD of the fractional OAs."""
        return f"{100.0 * self.mean_oa:.2f} ± {self.sd_oa:.3f}"


@dataclass
class ProtocolResult:
    metrics: Metrics
    models: list
    histories: list
    splits: list


def _derived_cfg(cfg: TrainConfig, split_id: int) -> TrainConfig:
    return replace(cfg, seed=[cfg.seed, split_id, 1])


def _run_split(args):
    dataset, split, cfg, backbone_cfg, msafeb_cfg, n_classes, with_msafeb = args
    model = assemble_model(backbone_cfg, msafeb_cfg, n_classes, with_msafeb,
                           seed=[cfg.seed, split.split_id, 0],
                           dropout_rate=cfg.dropout_rate)
    history = train(model, dataset, split, _derived_cfg(cfg, split.split_id))
    oa, confusion = evaluate(model, dataset, split.test_indices)
    return oa, confusion, history, model


def run_protocol(dataset: Dataset, ratios, n_splits: int, cfg: TrainConfig,
                 backbone_cfg, msafeb_cfg, n_classes: int, with_msafeb: bool,
                 jobs: int = 1) -> dict:
    """Train/evaluate across stratified splits for each train ratio.

    Model and trainer seeds derive from (cfg.seed, split_id), so results are
    bit-identical whether splits run sequentially or in parallel.
    """
    results = {}
    for ratio in ratios:
        splits = make_splits(dataset, ratio, n_splits, cfg.seed)
        tasks = [(dataset, s, cfg, backbone_cfg, msafeb_cfg, n_classes,
                  with_msafeb) for s in splits]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                outcomes = list(pool.map(_run_split, tasks))
        else:
            outcomes = [_run_split(t) for t in tasks]
        oas = [o[0] for o in outcomes]
        confusions = [o[1] for o in outcomes]
        results[ratio] = ProtocolResult(
            metrics=Metrics.from_splits(oas, confusions),
            models=[o[3] for o in outcomes],
            histories=[o[2] for o in outcomes],
            splits=splits)
    return results
