"""Expertise-guided losses and their analytic logit gradients.

All three losses are the mean cross-entropy of prior-adjusted logits,
computed in log-space for stability under extreme priors:

    cross-entropy    : offsets = 0
    balanced softmax : offsets = log(pi)
    inverse softmax  : offsets = log(pi) - lambda * log(pi_bar)

The (alpha, beta) adjustment family generalizes this to any expert count:
offsets = alpha * log(pi) - beta * log(pi_bar).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClassPrior
from .errors import DomainError
from .numkit import Array, log_softmax, softmax


@dataclass(frozen=True)
class ExpertAdjustment:
    """Coefficients on the log-prior offsets. (0,0) is plain cross-entropy,
    (1,0) the balanced softmax loss, (1,lambda) the inverse softmax loss."""

    alpha: float
    beta: float


@dataclass
class LossValue:
    """Batch-mean loss plus its gradient with respect to the raw logits."""

    value: float
    grad_logits: Array


def expert_adjustments(n_experts: int, lam: float) -> tuple[ExpertAdjustment, ...]:
    """Adjustment schedule for K experts spanning forward-to-backward skew.

    Expert 1 trains on raw cross-entropy; experts 2..K use alpha=1 with beta
    linearly spaced from 0 to lam. K=3 recovers the (ce, balanced, inverse)
    triple.
    """
    if n_experts < 2:
        raise DomainError("need at least two experts")
    if lam < 0:
        raise DomainError("lambda must be >= 0")
    betas = np.linspace(0.0, lam, n_experts - 1)
    return (ExpertAdjustment(0.0, 0.0),) + tuple(
        ExpertAdjustment(1.0, float(b)) for b in betas
    )


def _offsets(prior: ClassPrior, adj: ExpertAdjustment) -> Array:
    pi = np.asarray(prior.pi, dtype=np.float64)
    pi_bar = np.asarray(prior.pi_bar, dtype=np.float64)
    if np.any(pi <= 0) or np.any(pi_bar <= 0):
        raise DomainError("prior entries must be strictly positive")
    return adj.alpha * np.log(pi) - adj.beta * np.log(pi_bar)


def adjusted_probs(v: Array, prior: ClassPrior, adj: ExpertAdjustment) -> Array:
    """softmax(v + alpha*log(pi) - beta*log(pi_bar)) along the last axis."""
    return softmax(np.asarray(v, dtype=np.float64) + _offsets(prior, adj))


def guided_loss(
    v: Array, y: Array, prior: ClassPrior | None, adj: ExpertAdjustment
) -> LossValue:
    """Mean adjusted cross-entropy over a batch with its logit gradient.

    Gradient rows are softmax(adjusted) - onehot(y), scaled by 1/batch, so
    they sum to zero per sample.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        v = v[None, :]
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    n, C = v.shape
    if y.shape[0] != n:
        raise DomainError("labels and logits disagree on batch size")
    if y.size and (y.min() < 0 or y.max() >= C):
        raise IndexError(f"label outside [0, {C})")

    if adj.alpha == 0.0 and adj.beta == 0.0:
        z = v
    else:
        if prior is None:
            raise DomainError("prior required for adjusted losses")
        z = v + _offsets(prior, adj)

    logp = log_softmax(z, axis=1)
    rows = np.arange(n)
    value = float(-logp[rows, y].mean())
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad /= n
    return LossValue(value=value, grad_logits=grad)


def ce_loss(v: Array, y: Array) -> LossValue:
    """Softmax cross-entropy (the forward expert's objective)."""
    return guided_loss(v, y, None, ExpertAdjustment(0.0, 0.0))


def bal_loss(v: Array, y: Array, prior: ClassPrior) -> LossValue:
    """Balanced softmax loss: cross-entropy of v + log(pi)."""
    return guided_loss(v, y, prior, ExpertAdjustment(1.0, 0.0))


def inv_loss(v: Array, y: Array, prior: ClassPrior, lam: float) -> LossValue:
    """Inverse softmax loss: cross-entropy of v + log(pi) - lam*log(pi_bar)."""
    if lam < 0:
        raise DomainError("lambda must be >= 0")
    return guided_loss(v, y, prior, ExpertAdjustment(1.0, float(lam)))
