"""Shared-backbone multi-expert MLP with hand-derived backpropagation.

The backbone is a stack of ReLU dense layers shared by all experts; each
expert head is an optional ReLU hidden layer followed by a linear classifier
over C classes. Gradients are exact; the backbone gradient accumulates the
contributions flowing back from every head.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ContractError, InvalidInputError, ShapeError
from .numkit import Array, Rng, matmul, softmax

_CKPT_MAGIC = b"TDEM"
_CKPT_VERSION = 1


@dataclass
class Dense:
    """One dense layer: w is (fan_in, fan_out), b is (fan_out,)."""

    w: Array
    b: Array


@dataclass
class ExpertModel:
    backbone: list[Dense]
    experts: list[list[Dense]]
    input_dim: int
    n_classes: int
    hidden: tuple[int, ...]
    head_hidden: int
    seed: int

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim


@dataclass
class ParamGrads:
    """Gradient arrays mirroring the model's parameter structure."""

    backbone: list[Dense]
    experts: list[list[Dense]]


@dataclass
class ForwardTrace:
    """Cached activations from one forward pass; consumed by backward()."""

    x: Array
    backbone_pre: list[Array] = field(default_factory=list)
    backbone_act: list[Array] = field(default_factory=list)
    head_pre: list[list[Array]] = field(default_factory=list)
    head_act: list[list[Array]] = field(default_factory=list)


def _glorot(rng: Rng, fan_in: int, fan_out: int) -> Array:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_model(
    input_dim: int,
    hidden: tuple[int, ...],
    n_experts: int,
    n_classes: int,
    rng: Rng,
    head_hidden: int | None = None,
) -> ExpertModel:
    """Glorot-uniform weights, zero biases, deterministic per rng stream.

    head_hidden defaults to half the backbone feature width; with an empty
    backbone it defaults to 0, making each head a bare linear classifier.
    """
    if n_experts < 2:
        raise ContractError("need at least two experts")
    if n_classes < 2:
        raise ContractError("need at least two classes")
    hidden = tuple(int(h) for h in hidden)
    if head_hidden is None:
        head_hidden = hidden[-1] // 2 if hidden else 0
    head_hidden = int(head_hidden)

    backbone = []
    width = input_dim
    for h in hidden:
        backbone.append(Dense(w=_glorot(rng, width, h), b=np.zeros(h)))
        width = h

    experts = []
    for _ in range(n_experts):
        layers = []
        in_w = width
        if head_hidden > 0:
            layers.append(Dense(w=_glorot(rng, in_w, head_hidden), b=np.zeros(head_hidden)))
            in_w = head_hidden
        layers.append(Dense(w=_glorot(rng, in_w, n_classes), b=np.zeros(n_classes)))
        experts.append(layers)

    return ExpertModel(
        backbone=backbone,
        experts=experts,
        input_dim=int(input_dim),
        n_classes=int(n_classes),
        hidden=hidden,
        head_hidden=head_hidden,
        seed=rng.seed,
    )


def forward(m: ExpertModel, x: Array) -> tuple[list[Array], ForwardTrace]:
    """Per-expert logits for a batch, plus the activation cache for backward."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != m.input_dim:
        raise ShapeError(f"expected (n, {m.input_dim}) input, got {x.shape}")
    trace = ForwardTrace(x=x)

    h = x
    trace.backbone_act.append(h)
    for layer in m.backbone:
        z = matmul(h, layer.w) + layer.b
        trace.backbone_pre.append(z)
        h = np.maximum(z, 0.0)
        trace.backbone_act.append(h)

    logits = []
    for head in m.experts:
        pres, acts = [], [h]
        a = h
        for i, layer in enumerate(head):
            z = matmul(a, layer.w) + layer.b
            pres.append(z)
            a = np.maximum(z, 0.0) if i < len(head) - 1 else z
            acts.append(a)
        trace.head_pre.append(pres)
        trace.head_act.append(acts)
        logits.append(a)
    return logits, trace


def backward(
    m: ExpertModel, trace: ForwardTrace, grad_logits: list[Array]
) -> ParamGrads:
    """Exact parameter gradients of the summed per-expert scalar losses.

    grad_logits[k] is dL/d(logits_k); the shared backbone receives the sum of
    all head contributions.
    """
    if len(grad_logits) != m.n_experts:
        raise ShapeError("one logit gradient per expert required")

    head_grads: list[list[Dense]] = []
    d_feat = np.zeros_like(trace.backbone_act[-1])
    for k, head in enumerate(m.experts):
        g = np.asarray(grad_logits[k], dtype=np.float64)
        if g.shape != trace.head_act[k][-1].shape:
            raise ShapeError(f"expert {k}: gradient shape {g.shape} mismatches logits")
        layer_grads: list[Dense] = [None] * len(head)  # type: ignore[list-item]
        for i in range(len(head) - 1, -1, -1):
            a_in = trace.head_act[k][i]
            layer_grads[i] = Dense(w=matmul(a_in.T, g), b=g.sum(axis=0))
            g = matmul(g, head[i].w.T)
            if i > 0:
                g = g * (trace.head_pre[k][i - 1] > 0)
        d_feat += g
        head_grads.append(layer_grads)

    backbone_grads: list[Dense] = [None] * len(m.backbone)  # type: ignore[list-item]
    g = d_feat
    for i in range(len(m.backbone) - 1, -1, -1):
        g = g * (trace.backbone_pre[i] > 0)
        a_in = trace.backbone_act[i]
        backbone_grads[i] = Dense(w=matmul(a_in.T, g), b=g.sum(axis=0))
        if i > 0:
            g = matmul(g, m.backbone[i].w.T)

    return ParamGrads(backbone=backbone_grads, experts=head_grads)


def check_weights(w, n_experts: int) -> Array:
    """Validate an aggregation weight vector: length K, >= 0, sums to 1."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != n_experts:
        raise ContractError(f"expected {n_experts} weights, got {w.shape[0]}")
    if np.any(w < 0):
        raise ContractError("weights must be non-negative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ContractError(f"weights must sum to 1, got {w.sum()!r}")
    return w


def ensemble_logits(expert_logits: list[Array], w) -> Array:
    """Convex combination sum_k w_k * v_k of per-expert logits."""
    w = check_weights(w, len(expert_logits))
    out = np.zeros_like(np.asarray(expert_logits[0], dtype=np.float64))
    for wk, vk in zip(w, expert_logits):
        out += wk * np.asarray(vk, dtype=np.float64)
    return out


def predict_probs(m: ExpertModel, x: Array, w) -> Array:
    """Row-wise softmax of the weighted expert ensemble."""
    logits, _ = forward(m, x)
    return softmax(ensemble_logits(logits, w), axis=1)


def iter_layers(obj: ExpertModel | ParamGrads) -> Iterator[tuple[str, Dense]]:
    """Deterministic traversal order shared by checkpoints and the optimizer."""
    for i, layer in enumerate(obj.backbone):
        yield f"backbone.{i}", layer
    for k, head in enumerate(obj.experts):
        for i, layer in enumerate(head):
            yield f"expert.{k}.{i}", layer


def iter_arrays(obj: ExpertModel | ParamGrads) -> Iterator[Array]:
    for _, layer in iter_layers(obj):
        yield layer.w
        yield layer.b


def n_params(m: ExpertModel) -> int:
    return int(sum(a.size for a in iter_arrays(m)))


def params_vector(m: ExpertModel) -> Array:
    return np.concatenate([a.ravel() for a in iter_arrays(m)])


def set_params_vector(m: ExpertModel, vec: Array) -> None:
    vec = np.asarray(vec, dtype=np.float64)
    pos = 0
    for a in iter_arrays(m):
        a.flat[:] = vec[pos : pos + a.size]
        pos += a.size
    if pos != vec.size:
        raise ShapeError(f"parameter vector size {vec.size} != model size {pos}")


def grads_vector(g: ParamGrads) -> Array:
    return np.concatenate([a.ravel() for a in iter_arrays(g)])


def save_checkpoint(m: ExpertModel, path: str | Path) -> None:
    """JSON header (dims, expert count, seed, layer order) followed by a
    little-endian f64 parameter blob."""
    header = {
        "version": _CKPT_VERSION,
        "input_dim": m.input_dim,
        "hidden": list(m.hidden),
        "head_hidden": m.head_hidden,
        "n_experts": m.n_experts,
        "n_classes": m.n_classes,
        "seed": m.seed,
        "layers": [
            {"name": name, "w_shape": list(layer.w.shape), "b_shape": list(layer.b.shape)}
            for name, layer in iter_layers(m)
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(params_vector(m).astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> ExpertModel:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise InvalidInputError(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    if header.get("version") != _CKPT_VERSION:
        raise InvalidInputError(f"{path}: unsupported checkpoint version")
    m = init_model(
        input_dim=header["input_dim"],
        hidden=tuple(header["hidden"]),
        n_experts=header["n_experts"],
        n_classes=header["n_classes"],
        rng=Rng(header["seed"]),
        head_hidden=header["head_hidden"],
    )
    vec = np.frombuffer(raw, dtype="<f8", offset=8 + hlen)
    if vec.size != n_params(m):
        raise InvalidInputError(f"{path}: parameter blob size mismatch")
    set_params_vector(m, vec.copy())
    return m
