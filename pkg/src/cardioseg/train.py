"""Training loop: losses, Adam, epoch scheduling, best-model checkpointing,
and k-fold cross-validation.

Everything is deterministic under a fixed seed: parameter init, shuffling,
and evaluation. The training log holds only deterministic fields so two runs
with the same seed produce bit-identical logs; timing goes to the progress
stream instead.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .data import kfold_split
from .edges import edge_pyramid
from .layers import softmax
from .metrics import evaluate
from .serialize import checkpoint_bytes
from .tensor import NumericError, Tape, Tensor

__all__ = [
    "TrainConfig",
    "Adam",
    "ce_loss",
    "dice_loss",
    "train",
    "cross_validate",
    "TrainResult",
]


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 10
    learning_rate: float = 0.01
    folds: int = 5
    seed: int = 0
    loss_mode: str = "ce"  # or "ce+dice"

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.folds < 2:
            raise ValueError("epochs, batch_size must be >= 1 and folds >= 2")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.loss_mode not in ("ce", "ce+dice"):
            raise ValueError(f"loss_mode must be 'ce' or 'ce+dice', "
                             f"got {self.loss_mode!r}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d).validate()


class Adam:
    """Adam with bias correction over a list of (name, tensor) parameters."""

    def __init__(self, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(t.data) for _, t in self.params]
        self.v = [np.zeros_like(t.data) for _, t in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, (name, p) in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"missing gradient for parameter {name!r}")
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


def _onehot(labels, num_classes):
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"labels outside [0, {num_classes}): "
            f"min {labels.min()}, max {labels.max()}"
        )
    return (labels[None, :, :] == np.arange(num_classes)[:, None, None]) \
        .astype(np.float64)


def ce_loss(logits, truth, onehot=None):
    """Mean per-pixel cross-entropy, computed via max-shifted log-sum-exp."""
    k = logits.shape[0]
    if onehot is None:
        labels = truth.labels if hasattr(truth, "labels") else np.asarray(truth)
        if labels.shape != logits.shape[1:]:
            raise ValueError(
                f"label extents {labels.shape} != logits {logits.shape[1:]}"
            )
        onehot = _onehot(labels, k)
    peak = logits.max(axis=0, keepdims=True)
    lse = (logits - peak).exp().sum(axis=0, keepdims=True).log() + peak
    picked = (logits * Tensor(onehot)).sum(axis=0, keepdims=True)
    return (lse - picked).mean()


def dice_loss(probs, truth, onehot=None, smooth=1.0):
    """One minus the mean soft-overlap ratio over foreground classes."""
    k = probs.shape[0]
    if onehot is None:
        labels = truth.labels if hasattr(truth, "labels") else np.asarray(truth)
        onehot = _onehot(labels, k)
    target = Tensor(onehot)
    inter = (probs * target).sum(axis=(1, 2))
    p_sum = probs.sum(axis=(1, 2))
    t_sum = target.sum(axis=(1, 2))
    ratio = (2.0 * inter + smooth) / (p_sum + t_sum + smooth)
    fg_weight = np.zeros(k)
    fg_weight[1:] = 1.0 / (k - 1)
    return 1.0 - (ratio * Tensor(fg_weight)).sum()


@dataclass
class TrainResult:
    log: list
    best_epoch: int
    best_val_dsc: float
    best_checkpoint: bytes


def _sample_loss(model, sample, cache, loss_mode):
    edges, onehot = cache
    logits = model(sample.image, edges)
    loss = ce_loss(logits, sample.mask, onehot)
    if loss_mode == "ce+dice":
        loss = loss + dice_loss(softmax(logits, axis=0), sample.mask, onehot)
    return loss


def _prepare_cache(samples, depth, num_classes):
    cache = []
    for s in samples:
        edges = edge_pyramid(s.image.data[0], depth + 1)
        cache.append((edges, _onehot(s.mask.labels, num_classes)))
    return cache


def mean_foreground_dsc(model, samples, caches=None):
    """Mean over samples of the mean foreground-class DSC (tape-free)."""
    if not samples:
        raise ValueError("no samples to evaluate")
    depth = model.config.depth
    scores = []
    for i, s in enumerate(samples):
        edges = caches[i][0] if caches else edge_pyramid(s.image.data[0], depth + 1)
        logits = model(s.image, edges)
        pred = model.predict_mask(logits)
        report = evaluate(pred, s.mask, num_classes=model.config.num_classes)
        scores.append(report.mean_dsc)
    return float(np.mean(scores))


def train(model, train_set, val_set, cfg: TrainConfig, checkpoint_path=None,
          log_path=None, progress=None):
    """Optimize ``model`` in place; returns the log and the best checkpoint.

    Epoch 0 is the untrained baseline (train_loss null). The checkpoint
    tracks the best mean foreground validation DSC; epoch 0's weights seed
    it so a checkpoint always exists.
    """
    cfg.validate()
    if not train_set:
        raise ValueError("training set is empty")
    if cfg.batch_size > len(train_set):
        raise ValueError(
            f"batch_size {cfg.batch_size} exceeds dataset size {len(train_set)}"
        )
    depth = model.config.depth
    k = model.config.num_classes
    train_cache = _prepare_cache(train_set, depth, k)
    val_cache = _prepare_cache(val_set, depth, k) if val_set else None

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.named_params(), lr=cfg.learning_rate)

    def emit(line):
        if progress is not None:
            print(line, file=progress, flush=True)

    log = []
    best_val = mean_foreground_dsc(model, val_set, val_cache) if val_set else None
    best_epoch = 0
    best_ckpt = checkpoint_bytes(model)
    log.append({"epoch": 0, "train_loss": None, "val_dsc": best_val})
    emit(f"epoch 0 baseline: val_dsc={best_val}")

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.monotonic()
        order = rng.permutation(len(train_set))
        batch_losses = []
        for bi in range(0, len(order), cfg.batch_size):
            batch = order[bi:bi + cfg.batch_size]
            with Tape():
                total = None
                for idx in batch:
                    loss = _sample_loss(model, train_set[idx],
                                        train_cache[idx], cfg.loss_mode)
                    total = loss if total is None else total + loss
                total = total / float(len(batch))
                if not np.isfinite(total.data):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}, batch "
                        f"{bi // cfg.batch_size} (samples {batch.tolist()})"
                    )
                total.backward()
            opt.step()
            opt.zero_grad()
            batch_losses.append(total.item())

        train_loss = float(np.mean(batch_losses))
        val_dsc = mean_foreground_dsc(model, val_set, val_cache) if val_set else None
        log.append({"epoch": epoch, "train_loss": train_loss, "val_dsc": val_dsc})
        emit(f"epoch {epoch}: loss={train_loss:.6f} val_dsc={val_dsc} "
             f"({time.monotonic() - t0:.1f}s)")

        if val_set and val_dsc > best_val:
            best_val = val_dsc
            best_epoch = epoch
            best_ckpt = checkpoint_bytes(model)
            if checkpoint_path:
                with open(checkpoint_path, "wb") as fh:
                    fh.write(best_ckpt)

    if checkpoint_path and best_epoch == 0:
        with open(checkpoint_path, "wb") as fh:
            fh.write(best_ckpt)
    if log_path:
        with open(log_path, "w") as fh:
            for entry in log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return TrainResult(log=log, best_epoch=best_epoch,
                       best_val_dsc=best_val, best_checkpoint=best_ckpt)


def cross_validate(net_config, samples, cfg: TrainConfig, out_dir=None,
                   progress=None):
    """Per-fold training with fresh seeded init; returns fold results and
    a summary (mean and min/max range of fold best DSCs)."""
    from .model import EdgeAttentionUNet

    cfg.validate()
    folds = kfold_split(list(range(len(samples))), cfg.folds, cfg.seed)
    fold_seeds = np.random.default_rng(cfg.seed).integers(2 ** 31, size=len(folds))
    results = []
    for i, (train_ids, val_ids) in enumerate(folds):
        seed = int(fold_seeds[i])
        model = EdgeAttentionUNet(net_config, np.random.default_rng(seed))
        fold_cfg = replace(cfg, seed=seed)
        ckpt = f"{out_dir}/fold{i}.ckpt" if out_dir else None
        log = f"{out_dir}/fold{i}_log.jsonl" if out_dir else None
        if progress is not None:
            print(f"fold {i}: {len(train_ids)} train / {len(val_ids)} val, "
                  f"seed {seed}", file=progress, flush=True)
        result = train(model, [samples[j] for j in train_ids],
                       [samples[j] for j in val_ids], fold_cfg,
                       checkpoint_path=ckpt, log_path=log, progress=progress)
        results.append(result)
    scores = [r.best_val_dsc for r in results]
    summary = {
        "fold_dsc": scores,
        "mean_dsc": float(np.mean(scores)),
        "min_dsc": float(np.min(scores)),
        "max_dsc": float(np.max(scores)),
    }
    return results, summary
