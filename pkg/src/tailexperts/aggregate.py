"""Test-time self-supervised expert aggregation.

With the trained model frozen, expert weights w = softmax(raw) are learned by
gradient ascent on prediction stability: the mean dot product between the
softmax predictions of two stochastic views of each unlabeled test sample.
Adaptation halts early once any weight drops to the stop threshold.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from .data import Dataset, ViewConfig, gen_view_batch
from .errors import AdaptationDiverged, ContractError
from .model import ExpertModel, forward
from .numkit import Array, Rng, softmax
from .train import sgd_update

STOP_THRESHOLD_DEFAULT = 0.05


@dataclass
class AggregationState:
    """Unconstrained weight parameters plus bookkeeping. The simplex weights
    are always the softmax of `raw`, so they stay positive and sum to one."""

    raw: Array
    stop_threshold: float = STOP_THRESHOLD_DEFAULT
    epoch: int = 0
    stopped: bool = False

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64).reshape(-1)

    @property
    def w(self) -> Array:
        return softmax(self.raw)

    @property
    def n_experts(self) -> int:
        return self.raw.shape[0]


@dataclass
class StabilityReport:
    """Mean view-prediction dot product; always within [0, 1]."""

    S: float
    per_batch: list[float] = field(default_factory=list)


@dataclass
class AdaptConfig:
    epochs: int = 5
    batch_size: int = 128
    lr: float = 0.1
    schedule: str = "linear"
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 0.0
    stop_threshold: float = STOP_THRESHOLD_DEFAULT
    views: ViewConfig = field(default_factory=ViewConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be >= 0")
        if self.schedule not in ("linear", "cosine", "constant"):
            raise ContractError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "linear":
            return self.lr * (1.0 - epoch / self.epochs)
        if self.schedule == "cosine":
            return self.lr * (1.0 + np.cos(np.pi * epoch / self.epochs)) / 2.0
        return self.lr


@dataclass
class AdaptEpoch:
    """One row of the adaptation trace (what the JSON-lines stream carries)."""

    epoch: int
    S: float
    w: tuple[float, ...]
    stopped: bool

    def to_json_line(self) -> str:
        return json.dumps(
            {"epoch": self.epoch, "S": self.S, "w": list(self.w), "stopped": self.stopped},
            sort_keys=True,
        )


@dataclass
class AdaptResult:
    state: AggregationState
    trace: list[AdaptEpoch]


def stability_from_views(
    logits1: list[Array], logits2: list[Array], raw: Array
) -> tuple[float, Array]:
    """Stability S and its exact gradient w.r.t. the raw weight parameters,
    for fixed per-view expert logits.

    S = mean_i p1_i . p2_i with p = softmax(sum_k w_k v_k), w = softmax(raw).
    The gradient composes the prediction softmax Jacobians with the weight
    softmax Jacobian.
    """
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    K = raw.shape[0]
    if len(logits1) != K or len(logits2) != K:
        raise ContractError("need one logits matrix per expert and view")
    w = softmax(raw)
    v1 = np.stack([np.asarray(v, dtype=np.float64) for v in logits1])  # (K,n,C)
    v2 = np.stack([np.asarray(v, dtype=np.float64) for v in logits2])
    n = v1.shape[1]

    p1 = softmax(np.tensordot(w, v1, axes=1), axis=1)  # (n,C)
    p2 = softmax(np.tensordot(w, v2, axes=1), axis=1)
    s = np.sum(p1 * p2, axis=1)  # (n,)
    S = float(s.mean())

    # dS/dz1[i,c] = p1[i,c] * (p2[i,c] - s_i) / n, symmetric for view 2
    dz1 = p1 * (p2 - s[:, None]) / n
    dz2 = p2 * (p1 - s[:, None]) / n
    grad_w = np.tensordot(v1, dz1, axes=((1, 2), (0, 1))) + np.tensordot(
        v2, dz2, axes=((1, 2), (0, 1))
    )  # (K,)
    grad_raw = w * grad_w - w * float(w @ grad_w)
    return S, grad_raw


def _batch_views_logits(
    m: ExpertModel, xb: Array, view_cfg: ViewConfig, rng: Rng
) -> tuple[list[Array], list[Array]]:
    x1, x2 = gen_view_batch(xb, view_cfg, rng)
    l1, _ = forward(m, x1)
    l2, _ = forward(m, x2)
    return l1, l2


def stability(
    m: ExpertModel,
    X: Array,
    state: AggregationState,
    view_cfg: ViewConfig,
    rng: Rng,
    batch_size: int | None = None,
) -> StabilityReport:
    """Stability of the weighted ensemble on a feature matrix, batched."""
    X = np.asarray(X, dtype=np.float64)
    step = batch_size or X.shape[0]
    per_batch = []
    total = 0.0
    for start in range(0, X.shape[0], step):
        xb = X[start : start + step]
        l1, l2 = _batch_views_logits(m, xb, view_cfg, rng)
        S, _ = stability_from_views(l1, l2, state.raw)
        per_batch.append(float(S))
        total += S * xb.shape[0]
    return StabilityReport(S=float(total / X.shape[0]), per_batch=per_batch)


def stability_grad_w(
    m: ExpertModel,
    X: Array,
    state: AggregationState,
    view_cfg: ViewConfig,
    rng: Rng,
) -> Array:
    """Gradient of S over the raw weight parameters for one view draw.

    Pairs with `stability` when given an identically positioned rng, since
    views are fixed within a step.
    """
    l1, l2 = _batch_views_logits(m, np.asarray(X, dtype=np.float64), view_cfg, rng)
    _, grad = stability_from_views(l1, l2, state.raw)
    return grad


def adapt(
    m: ExpertModel,
    test: Dataset | Array,
    cfg: AdaptConfig,
    rng: Rng,
    trace_stream: IO[str] | None = None,
) -> AdaptResult:
    """Learn aggregation weights on unlabeled test features (Algorithm-2 style).

    raw starts at zero (uniform weights); each batch redraws fresh views and
    ascends S, updating only raw. After each epoch, if min(w) has reached the
    stop threshold, adaptation halts and the state from the end of that epoch
    is returned. Labels are never read.
    """
    X = test.features if isinstance(test, Dataset) else np.asarray(test, dtype=np.float64)
    state = AggregationState(
        raw=np.zeros(m.n_experts), stop_threshold=cfg.stop_threshold
    )
    velocity = [np.zeros_like(state.raw)]
    trace: list[AdaptEpoch] = []
    n = X.shape[0]
    step = min(cfg.batch_size, n)

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.child(epoch).permutation(n)
        view_rng = rng.child(epoch).child("views")
        s_sum = 0.0
        for b, start in enumerate(range(0, n, step)):
            idx = order[start : start + step]
            l1, l2 = _batch_views_logits(m, X[idx], cfg.views, view_rng)
            S, grad_raw = stability_from_views(l1, l2, state.raw)
            if not np.isfinite(S):
                raise AdaptationDiverged(epoch=epoch, batch=b)
            s_sum += S * idx.size
            # ascent: feed the negated gradient to the descent stepper; the
            # weight-decay term pulls raw toward 0, i.e. toward uniform
            # weights, damping drift on distribution-neutral data
            sgd_update(
                [state.raw],
                [-grad_raw],
                velocity,
                lr=lr,
                momentum=cfg.momentum,
                nesterov=cfg.nesterov,
                weight_decay=cfg.weight_decay,
            )
        state.epoch = epoch + 1
        state.stopped = bool(np.min(state.w) <= cfg.stop_threshold)
        row = AdaptEpoch(
            epoch=epoch + 1,
            S=float(s_sum / n),
            w=tuple(float(x) for x in state.w),
            stopped=state.stopped,
        )
        trace.append(row)
        if trace_stream is not None:
            trace_stream.write(row.to_json_line() + "\n")
        if state.stopped:
            break
    return AdaptResult(state=state, trace=trace)
