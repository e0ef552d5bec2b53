"""Joint weakly-supervised training of the bag and patch branches.

Instances inherit their bag's label (weak supervision); the joint loss is
bag cross-entropy plus a weighted mean of per-instance cross-entropies.
Optimization is Adam with a step-decayed learning rate. Everything is
seed-deterministic: same seed, same data, same bytes in the checkpoint.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .checkpoint import save_checkpoint
from .model import Bag, ToyBagNet, mil_forward, sil_forward

LOG_HEADER = ["epoch", "lr", "loss", "bag_acc", "inst_acc"]


class AblationMode(enum.Enum):
    SIL_ONLY = "sil"    # instance loss only
    MIL_ONLY = "mil"    # bag loss only
    JOINT = "joint"     # both branches

    @classmethod
    def from_name(cls, name: str) -> "AblationMode":
        for mode in cls:
            if mode.value == name.lower():
                return mode
        raise ValueError(f"unknown mode {name!r}; expected one of {[m.value for m in cls]}")


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    decay: float = 0.5
    decay_interval: int = 10      # epochs between learning-rate steps
    epochs: int = 30
    bags_per_step: int = 1
    lambda_sil: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.2     # held-out share of bags, split before epoch 1

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if self.lambda_sil < 0:
            raise ValueError(f"lambda_sil must be non-negative, got {self.lambda_sil}")
        if self.epochs < 0 or self.decay_interval < 1 or self.bags_per_step < 1:
            raise ValueError("epochs must be >= 0, decay_interval and bags_per_step >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """lr(epoch) = lr0 * decay^floor(epoch / interval), exactly."""
    return config.lr0 * config.decay ** (epoch // config.decay_interval)


def joint_loss(model: ToyBagNet, bag: Bag, lambda_sil: float = 1.0,
               mode: AblationMode = AblationMode.JOINT) -> Tensor:
    """Scalar training loss for one bag under the given ablation mode.

    Weak labels: every instance is assigned the bag label. The decomposition
    JOINT == MIL_ONLY + lambda_sil * SIL_ONLY holds for fixed parameters.
    """
    y = bag.bag_label
    if mode is AblationMode.SIL_ONLY:
        losses = [ad.softmax_cross_entropy(sil_forward(model, patch)[1], y) for patch in bag.instances]
        return ad.mean_stack(losses)
    if mode is AblationMode.MIL_ONLY:
        _, bag_logits, _ = mil_forward(model, bag)
        return ad.softmax_cross_entropy(bag_logits, y)
    _, bag_logits, instance_logits = mil_forward(model, bag)
    mil_term = ad.softmax_cross_entropy(bag_logits, y)
    sil_term = ad.mean_stack([ad.softmax_cross_entropy(lg, y) for lg in instance_logits])
    return ad.add(mil_term, ad.scale(sil_term, lambda_sil))


@dataclass
class AdamState:
    """First/second moment buffers and the shared timestep."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_model(cls, model: ToyBagNet) -> "AdamState":
        names = dict(model.named_parameters())
        return cls(
            m={name: np.zeros_like(p.data) for name, p in names.items()},
            v={name: np.zeros_like(p.data) for name, p in names.items()},
        )


def adam_step(named_params: Sequence, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over (name, tensor) pairs, in place.

    Validates every gradient before mutating anything, so a non-finite
    gradient aborts the whole step.
    """
    for name, p in named_params:
        if p.grad is None:
            raise NonFiniteError(f"missing gradient for parameter '{name}'")
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
    state.t += 1
    bias1 = 1.0 - beta1 ** state.t
    bias2 = 1.0 - beta2 ** state.t
    for name, p in named_params:
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def predict_bag(model: ToyBagNet, bag: Bag) -> int:
    _, bag_logits, _ = mil_forward(model, bag)
    return int(np.argmax(bag_logits.data))


def predict_instances(model: ToyBagNet, bag: Bag) -> list:
    return [int(np.argmax(sil_forward(model, patch)[1].data)) for patch in bag.instances]


def _split_indices(n: int, val_fraction: float, rng: np.random.Generator):
    order = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    return list(order[n_val:]), list(order[:n_val])


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss: float
    bag_acc: float
    inst_acc: float


@dataclass
class TrainResult:
    metrics: list = field(default_factory=list)
    best_bag_acc: float = 0.0
    best_epoch: int = -1
    train_indices: list = field(default_factory=list)
    val_indices: list = field(default_factory=list)


def _bag_and_instance_accuracy(model: ToyBagNet, bags: Sequence[Bag]):
    """Accuracy of bag predictions and of instance predictions vs weak labels."""
    bag_hits = 0
    inst_hits = 0
    inst_total = 0
    for bag in bags:
        _, bag_logits, instance_logits = mil_forward(model, bag)
        if int(np.argmax(bag_logits.data)) == bag.bag_label:
            bag_hits += 1
        for logits in instance_logits:
            inst_hits += int(np.argmax(logits.data)) == bag.bag_label
            inst_total += 1
    return bag_hits / len(bags), inst_hits / inst_total


def train(model: ToyBagNet, bags: Sequence[Bag], config: TrainConfig,
          mode: AblationMode = AblationMode.JOINT,
          out_dir: Optional[Path] = None, progress=None) -> TrainResult:
    """Run the full optimization loop; returns per-epoch metrics.

    When ``out_dir`` is given, appends one row per epoch to train_log.csv
    (bag_acc and inst_acc are measured on the held-out validation split),
    rewrites last.ckpt every epoch, and writes best.ckpt whenever validation
    bag accuracy reaches a new maximum.
    """
    if len(bags) == 0:
        raise ValueError("train: empty dataset")
    rng = np.random.default_rng(config.seed)
    train_idx, val_idx = _split_indices(len(bags), config.val_fraction, rng)
    if not train_idx:
        raise ValueError("train: validation split consumed every bag")
    result = TrainResult(train_indices=train_idx, val_indices=val_idx)

    log_fh = None
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.csv", "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(LOG_HEADER)
        save_checkpoint(model, out_dir / "last.ckpt")
    try:
        state = AdamState.for_model(model)
        named = model.named_parameters()
        for epoch in range(config.epochs):
            lr = learning_rate(config, epoch)
            order = [train_idx[i] for i in rng.permutation(len(train_idx))]
            loss_sum = 0.0
            for start in range(0, len(order), config.bags_per_step):
                group = order[start:start + config.bags_per_step]
                model.zero_grad()
                for idx in group:
                    with ad.record() as graph:
                        loss = ad.scale(
                            joint_loss(model, bags[idx], config.lambda_sil, mode),
                            1.0 / len(group),
                        )
                    graph.backward(loss)
                    loss_sum += loss.item() * len(group)
                adam_step(named, state, lr, config.beta1, config.beta2, config.eps)
            eval_bags = [bags[i] for i in val_idx] if val_idx else [bags[i] for i in train_idx]
            bag_acc, inst_acc = _bag_and_instance_accuracy(model, eval_bags)
            row = EpochMetrics(epoch, lr, loss_sum / len(order), bag_acc, inst_acc)
            result.metrics.append(row)
            if progress is not None:
                progress(row)
            if writer is not None:
                writer.writerow([row.epoch, f"{row.lr:.10g}", f"{row.loss:.6f}",
                                 f"{row.bag_acc:.6f}", f"{row.inst_acc:.6f}"])
                log_fh.flush()
                save_checkpoint(model, out_dir / "last.ckpt")
            if bag_acc > result.best_bag_acc or result.best_epoch < 0:
                result.best_bag_acc = bag_acc
                result.best_epoch = epoch
                if out_dir is not None:
                    save_checkpoint(model, out_dir / "best.ckpt")
    finally:
        if log_fh is not None:
            log_fh.close()
    return result
