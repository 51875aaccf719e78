"""Evaluation protocol and theory diagnostics: top-1 accuracy overall and per
class group, prediction confidence, plug-in mutual information and entropy of
hard predictions, prediction stability, and the algebraic tightness identity
behind the stability/mutual-information connection.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .aggregate import AggregationState, stability
from .data import ClassGroups, Dataset, ViewConfig
from .errors import ContractError, DomainError
from .model import ExpertModel, check_weights, predict_probs
from .numkit import Array, Rng

CSV_FIELDS = (
    "split",
    "direction",
    "rho",
    "variant",
    "n",
    "top1",
    "acc_many",
    "acc_medium",
    "acc_few",
    "confidence",
    "mi_nats",
    "entropy_nats",
    "stability",
    "weights",
)


def top1(preds: Array, labels: Array) -> float:
    """Fraction of rows whose argmax matches the label; argmax ties break to
    the lowest class index."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape[0] != labels.shape[0]:
        raise DomainError("predictions and labels disagree on sample count")
    if preds.shape[0] == 0:
        raise DomainError("empty batch")
    return float(np.mean(np.argmax(preds, axis=1) == labels))


def group_accuracy(
    preds: Array, labels: Array, groups: ClassGroups
) -> dict[str, float | None]:
    """top1 restricted to samples of each group's classes; groups with no
    samples are reported as absent (None), not zero."""
    labels = np.asarray(labels, dtype=np.int64)
    out: dict[str, float | None] = {}
    for name, members in (("many", groups.many), ("medium", groups.medium), ("few", groups.few)):
        mask = np.isin(labels, np.asarray(members, dtype=np.int64))
        out[name] = top1(preds[mask], labels[mask]) if mask.any() else None
    return out


def confidence(preds: Array) -> float:
    """Mean over rows of the highest predicted probability."""
    preds = np.asarray(preds, dtype=np.float64)
    if preds.shape[0] == 0:
        raise DomainError("empty batch")
    return float(preds.max(axis=1).mean())


def mi_and_entropy(
    pred_labels: Array, labels: Array, n_classes: int | None = None
) -> tuple[float, float]:
    """Plug-in estimates (nats) of I(pred; label) and H(pred) from the joint
    count matrix, with the 0*log(0) := 0 convention."""
    pred_labels = np.asarray(pred_labels, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if pred_labels.shape != labels.shape or pred_labels.size == 0:
        raise DomainError("need equal-length, non-empty label vectors")
    C = n_classes or int(max(pred_labels.max(), labels.max())) + 1
    joint = np.zeros((C, C))
    np.add.at(joint, (pred_labels, labels), 1.0)
    joint /= joint.sum()

    p_pred = joint.sum(axis=1)
    p_true = joint.sum(axis=0)

    def _h(p):
        nz = p[p > 0]
        return float(-(nz * np.log(nz)).sum())

    h_pred = _h(p_pred)
    # H(pred | true) = sum_y p(y) H(pred | Y=y)
    h_cond = 0.0
    for j in range(C):
        if p_true[j] > 0:
            h_cond += p_true[j] * _h(joint[:, j] / p_true[j])
    mi = h_pred - h_cond
    return float(max(mi, 0.0)), h_pred


@dataclass
class IdentityCheck:
    """Both sides of the class-tightness decomposition and their residual."""

    lhs: float
    rhs: float
    residual: float


def identity_check(preds: Array, labels: Array) -> IdentityCheck:
    """Verify the exact algebraic identity used by the stability analysis:

        sum_k [ sum_{j in Z_k} ||y_j||^2 - |Z_k| * ||c_k||^2 ]
            = sum_k sum_{j in Z_k} ||y_j - c_k||^2

    where c_k is the hard mean of the class-k prediction vectors. The
    derivation assumes unit-L2-norm vectors, so that precondition is enforced
    here rather than assumed.
    """
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.ndim != 2 or preds.shape[0] != labels.shape[0]:
        raise DomainError("predictions and labels disagree on sample count")
    norms = np.linalg.norm(preds, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-12):
        raise ContractError("identity_check requires unit-L2-norm input vectors")

    lhs = 0.0
    rhs = 0.0
    for k in np.unique(labels):
        block = preds[labels == k]
        c_k = block.mean(axis=0)
        sq = np.sum(block * block, axis=1)
        lhs += float(sq.sum() - block.shape[0] * float(c_k @ c_k))
        diff = block - c_k
        rhs += float(np.sum(diff * diff))
    return IdentityCheck(lhs=lhs, rhs=rhs, residual=abs(lhs - rhs))


@dataclass
class EvalReport:
    top1: float
    group_acc: dict[str, float | None]
    confidence: float
    mi_nats: float
    entropy_nats: float
    stability: float
    weights_used: tuple[float, ...]
    n: int
    split: str = ""
    direction: str = ""
    rho: float = 1.0
    variant: str = ""

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "direction": self.direction,
            "rho": self.rho,
            "variant": self.variant,
            "n": self.n,
            "top1": self.top1,
            "group_acc": dict(self.group_acc),
            "confidence": self.confidence,
            "mi_nats": self.mi_nats,
            "entropy_nats": self.entropy_nats,
            "stability": self.stability,
            "weights_used": list(self.weights_used),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def csv_row(self) -> list[str]:
        def fmt(x):
            return "" if x is None else repr(float(x))

        return [
            self.split,
            self.direction,
            repr(float(self.rho)),
            self.variant,
            str(self.n),
            fmt(self.top1),
            fmt(self.group_acc.get("many")),
            fmt(self.group_acc.get("medium")),
            fmt(self.group_acc.get("few")),
            fmt(self.confidence),
            fmt(self.mi_nats),
            fmt(self.entropy_nats),
            fmt(self.stability),
            "|".join(repr(float(w)) for w in self.weights_used),
        ]


def evaluate(
    m: ExpertModel,
    test: Dataset,
    w,
    view_cfg: ViewConfig,
    rng: Rng,
    groups: ClassGroups | None = None,
) -> EvalReport:
    """Assemble the full metric panel for one test split under weights w."""
    w = check_weights(w, m.n_experts)
    probs = predict_probs(m, test.features, w)
    hard = np.argmax(probs, axis=1)
    mi, ent = mi_and_entropy(hard, test.labels, n_classes=m.n_classes)
    if groups is None:
        group_acc: dict[str, float | None] = {"many": None, "medium": None, "few": None}
    else:
        group_acc = group_accuracy(probs, test.labels, groups)
    rep = stability_at_weights(m, test.features, w, view_cfg, rng)
    return EvalReport(
        top1=top1(probs, test.labels),
        group_acc=group_acc,
        confidence=confidence(probs),
        mi_nats=mi,
        entropy_nats=ent,
        stability=rep.S,
        weights_used=tuple(float(x) for x in w),
        n=test.n,
        direction=test.profile.direction,
        rho=test.profile.rho,
    )


def stability_at_weights(m, X, w, view_cfg, rng, batch_size=None):
    """Stability report at an explicit simplex weight vector.

    The aggregation state is parameterized by raw pre-softmax values, so the
    weights are mapped through log; zero entries get a -inf-free floor.
    """
    w = check_weights(w, m.n_experts)
    raw = np.log(np.maximum(w, 1e-300))
    state = AggregationState(raw=raw)
    return stability(m, X, state, view_cfg, rng, batch_size=batch_size)
