"""Joint training of all experts under their expertise-guided losses.

One optimizer step per mini-batch: forward once through the shared backbone,
compute each expert's loss on its own logits, sum them unweighted, and push
the exact gradients back through heads and backbone. SGD with optional
Nesterov momentum and coupled weight decay.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import IO, Literal

import numpy as np

from .data import ClassPrior, Dataset
from .errors import ContractError, NumericError, TrainingDiverged
from .losses import expert_adjustments, guided_loss
from .model import ExpertModel, backward, forward, iter_arrays
from .numkit import Rng

Schedule = Literal["linear", "cosine", "constant"]


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 128
    lr0: float = 0.1
    schedule: Schedule = "linear"
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    lam: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.lr0 < 0:
            raise ContractError("lr0 must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.lam < 0:
            raise ContractError("weight_decay and lambda must be >= 0")
        if self.schedule not in ("linear", "cosine", "constant"):
            raise ContractError(f"unknown schedule {self.schedule!r}")


@dataclass
class OptState:
    """Per-parameter velocity buffers, zero-initialized."""

    velocity: list[np.ndarray]


def init_opt(m: ExpertModel) -> OptState:
    return OptState(velocity=[np.zeros_like(a) for a in iter_arrays(m)])


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate at the start of `epoch` (0-based)."""
    if epoch >= cfg.epochs:
        raise ContractError(f"epoch {epoch} out of range for {cfg.epochs} epochs")
    if cfg.schedule == "linear":
        return cfg.lr0 * (1.0 - epoch / cfg.epochs)
    if cfg.schedule == "cosine":
        return cfg.lr0 * (1.0 + np.cos(np.pi * epoch / cfg.epochs)) / 2.0
    return cfg.lr0


def sgd_update(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    velocity: list[np.ndarray],
    lr: float,
    momentum: float,
    nesterov: bool,
    weight_decay: float,
) -> None:
    """In-place SGD step.

    v <- mu*v + g + wd*theta; then theta <- theta - lr*(g + wd*theta + mu*v)
    with Nesterov, theta <- theta - lr*v otherwise.
    """
    for p, g, v in zip(params, grads, velocity):
        d = g + weight_decay * p
        v *= momentum
        v += d
        if nesterov:
            p -= lr * (d + momentum * v)
        else:
            p -= lr * v


def sgd_step(m: ExpertModel, grads, opt: OptState, lr: float, cfg: TrainConfig) -> None:
    sgd_update(
        list(iter_arrays(m)),
        list(iter_arrays(grads)),
        opt.velocity,
        lr=lr,
        momentum=cfg.momentum,
        nesterov=cfg.nesterov,
        weight_decay=cfg.weight_decay,
    )


@dataclass
class EpochStats:
    epoch: int
    lr: float
    expert_losses: tuple[float, ...]
    wall_ms: float

    # named accessors for the canonical three-expert configuration
    @property
    def loss_ce(self) -> float:
        return self.expert_losses[0]

    @property
    def loss_bal(self) -> float:
        return self.expert_losses[1]

    @property
    def loss_inv(self) -> float:
        return self.expert_losses[-1]

    def to_json_line(self) -> str:
        rec: dict = {"epoch": self.epoch, "lr": self.lr}
        if len(self.expert_losses) == 3:
            rec["loss_ce"] = self.expert_losses[0]
            rec["loss_bal"] = self.expert_losses[1]
            rec["loss_inv"] = self.expert_losses[2]
        else:
            rec["expert_losses"] = list(self.expert_losses)
        rec["wall_ms"] = self.wall_ms
        return json.dumps(rec, sort_keys=True)


def train_epoch(
    m: ExpertModel,
    data: Dataset,
    prior: ClassPrior,
    cfg: TrainConfig,
    opt: OptState,
    rng: Rng,
    epoch: int,
) -> EpochStats:
    """One pass over shuffled mini-batches, mutating model and optimizer."""
    if cfg.batch_size > data.n:
        raise ContractError("batch_size exceeds dataset size")
    adjustments = expert_adjustments(m.n_experts, cfg.lam)
    lr = lr_at(cfg, epoch)
    order = rng.permutation(data.n)
    loss_sums = np.zeros(m.n_experts)
    t0 = time.perf_counter()
    for b, start in enumerate(range(0, data.n, cfg.batch_size)):
        idx = order[start : start + cfg.batch_size]
        xb, yb = data.features[idx], data.labels[idx]
        try:
            logits, trace = forward(m, xb)
            grad_list = []
            for k, adj in enumerate(adjustments):
                lv = guided_loss(logits[k], yb, prior, adj)
                if not np.isfinite(lv.value):
                    raise TrainingDiverged(epoch=epoch, batch=b)
                loss_sums[k] += lv.value * idx.size
                grad_list.append(lv.grad_logits)
            grads = backward(m, trace, grad_list)
        except NumericError as e:
            # parameters blew up to non-finite values mid-step
            raise TrainingDiverged(epoch=epoch, batch=b) from e
        sgd_step(m, grads, opt, lr, cfg)
    wall_ms = (time.perf_counter() - t0) * 1e3
    return EpochStats(
        epoch=epoch,
        lr=float(lr),
        expert_losses=tuple(float(s / data.n) for s in loss_sums),
        wall_ms=wall_ms,
    )


def train(
    m: ExpertModel,
    data: Dataset,
    prior: ClassPrior,
    cfg: TrainConfig,
    rng: Rng | None = None,
    stats_stream: IO[str] | None = None,
) -> list[EpochStats]:
    """Full training loop; emits one JSON line per epoch when a stream is given."""
    if rng is None:
        rng = Rng(cfg.seed).child("train")
    opt = init_opt(m)
    history = []
    for epoch in range(cfg.epochs):
        stats = train_epoch(m, data, prior, cfg, opt, rng.child(epoch), epoch)
        history.append(stats)
        if stats_stream is not None:
            stats_stream.write(stats.to_json_line() + "\n")
    return history
