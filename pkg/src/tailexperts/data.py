"""Synthetic long-tailed datasets, class priors, skewed test-split construction,
and the stochastic feature-space view family used for test-time adaptation.

Label convention: in-memory labels are 0-based numpy int64; the on-disk
container stores them 1-based (class indices 1..C) per the file contract.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import CapacityError, DomainError, InvalidInputError
from .numkit import Array, Rng

Direction = Literal["forward", "uniform", "backward"]

_MAGIC = b"TADE"
_FORMAT_VERSION = 1

# §5.1-style group bounds on raw per-class training counts
PAPER_MANY_THRESH = 100
PAPER_FEW_THRESH = 20


@dataclass(frozen=True)
class LongTailProfile:
    """Per-class sample counts with a named skew direction.

    counts are non-increasing for forward profiles, non-decreasing for
    backward, constant for uniform; every count is >= 1.
    """

    class_count: int
    counts: tuple[int, ...]
    rho: float
    direction: Direction
    max_count: int

    def __post_init__(self):
        if len(self.counts) != self.class_count:
            raise DomainError("counts length must equal class_count")
        if any(c < 1 for c in self.counts):
            raise DomainError("every class needs at least one sample")

    @property
    def total(self) -> int:
        return int(sum(self.counts))

    def to_dict(self) -> dict:
        return {
            "class_count": self.class_count,
            "counts": list(self.counts),
            "rho": self.rho,
            "direction": self.direction,
            "max_count": self.max_count,
        }

    @staticmethod
    def from_dict(d: dict) -> "LongTailProfile":
        return LongTailProfile(
            class_count=int(d["class_count"]),
            counts=tuple(int(c) for c in d["counts"]),
            rho=float(d["rho"]),
            direction=d["direction"],
            max_count=int(d["max_count"]),
        )


@dataclass
class Dataset:
    """Feature matrix (n x d), 0-based integer labels, and the generating profile."""

    features: Array
    labels: Array
    profile: LongTailProfile

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise DomainError("features and labels disagree on sample count")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> Array:
        return np.bincount(self.labels, minlength=self.profile.class_count)


@dataclass(frozen=True)
class ClassPrior:
    """Training label frequencies and their order-flipped inverse."""

    pi: Array
    pi_bar: Array

    def __post_init__(self):
        if np.any(np.asarray(self.pi) <= 0) or np.any(np.asarray(self.pi_bar) <= 0):
            raise DomainError("priors must be strictly positive")


@dataclass(frozen=True)
class ViewConfig:
    """Parametric stochastic perturbation family for two-view generation."""

    noise_sigma: float = 0.0
    mask_prob: float = 0.0
    scale_jitter: float = 0.0

    def __post_init__(self):
        if self.noise_sigma < 0 or self.scale_jitter < 0:
            raise DomainError("noise_sigma and scale_jitter must be >= 0")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise DomainError("mask_prob must lie in [0, 1]")


def _round_half_up(x: Array) -> Array:
    # np.round is banker's rounding; the profile contract is round-half-up
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def make_profile(
    class_count: int, max_count: int, rho: float, direction: Direction
) -> LongTailProfile:
    """Geometric long-tail profile: forward counts N * rho^(-(j-1)/(C-1)).

    Class 1 holds max_count samples and the max/min ratio is exactly rho
    before integer rounding; backward is the index flip; uniform is constant.
    Fractional counts are rounded half-up and clamped to >= 1.
    """
    if class_count < 2:
        raise DomainError("need at least two classes")
    if max_count < 1:
        raise DomainError("max_count must be >= 1")
    if rho < 1.0:
        raise DomainError(f"imbalance ratio must be >= 1, got {rho}")
    if direction not in ("forward", "uniform", "backward"):
        raise DomainError(f"unknown direction {direction!r}")

    if direction == "uniform" or rho == 1.0:
        counts = np.full(class_count, max_count, dtype=np.int64)
    else:
        j = np.arange(class_count, dtype=np.float64)
        raw = max_count * rho ** (-j / (class_count - 1))
        counts = np.maximum(_round_half_up(raw), 1)
        if direction == "backward":
            counts = counts[::-1]
    return LongTailProfile(
        class_count=class_count,
        counts=tuple(int(c) for c in counts),
        rho=float(rho),
        direction=direction,
        max_count=int(max_count),
    )


def class_means(class_count: int, dim: int, separation: float) -> Array:
    """Deterministic class-mean layout: equally spaced points on the unit
    circle slice of the d-sphere, scaled by `separation`, in class order."""
    if dim < 2:
        raise DomainError("need dim >= 2 for the circular layout")
    means = np.zeros((class_count, dim))
    angles = 2.0 * np.pi * np.arange(class_count) / class_count
    means[:, 0] = np.cos(angles)
    means[:, 1] = np.sin(angles)
    return separation * means


def gen_gaussian_mixture(
    profile: LongTailProfile, dim: int, separation: float, rng: Rng
) -> Dataset:
    """Sample a dataset with unit isotropic Gaussians at the deterministic
    class-mean layout; exactly profile.counts[k] samples for class k."""
    if separation < 0:
        raise DomainError("separation must be >= 0")
    means = class_means(profile.class_count, dim, separation)
    feats = []
    labels = []
    for k, n_k in enumerate(profile.counts):
        feats.append(means[k] + rng.normal(size=(n_k, dim)))
        labels.append(np.full(n_k, k, dtype=np.int64))
    return Dataset(np.vstack(feats), np.concatenate(labels), profile)


def make_test_split(
    pool: Dataset, rho: float, direction: Direction, rng: Rng
) -> Dataset:
    """Subsample a balanced pool (N per class) without replacement down to
    make_profile(C, N, rho, direction). The uniform direction returns the
    pool's samples unchanged."""
    counts = pool.class_counts()
    if counts.min() != counts.max():
        raise DomainError("test pool must be balanced across classes")
    per_class = int(counts[0])
    target = make_profile(pool.profile.class_count, per_class, rho, direction)
    if direction == "uniform" or rho == 1.0:
        return Dataset(pool.features.copy(), pool.labels.copy(), target)

    keep_feats = []
    keep_labels = []
    for k, want in enumerate(target.counts):
        idx = np.flatnonzero(pool.labels == k)
        if want > idx.size:
            raise CapacityError(
                f"class {k}: requested {want} samples, pool has {idx.size}"
            )
        chosen = idx[rng.permutation(idx.size)[:want]]
        chosen.sort()
        keep_feats.append(pool.features[chosen])
        keep_labels.append(pool.labels[chosen])
    return Dataset(np.vstack(keep_feats), np.concatenate(keep_labels), target)


def prior_from_counts(counts) -> ClassPrior:
    """Plug-in prior pi_k = n_k / n with the order flip pi_bar_j = pi_{C+1-j}.

    The exact (fsum) total is nudged onto 1.0 via the smallest entry, whose
    ulp is far below the residual, so the correctly-rounded sum of both pi
    and its flip is exactly 1.0.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 1:
        raise DomainError("counts must be a non-empty vector")
    if np.any(counts <= 0):
        raise DomainError("every class needs at least one sample")
    pi = counts / counts.sum()
    residual = 1.0 - math.fsum(pi)
    if residual != 0.0:
        k = int(np.argmin(pi))
        if pi[k] + residual > 0:
            pi[k] += residual
    pi_bar = pi[::-1].copy()
    return ClassPrior(pi=pi, pi_bar=pi_bar)


def empirical_prior(train: Dataset) -> ClassPrior:
    """Class prior from a training set's observed label counts."""
    counts = train.class_counts()
    if np.any(counts == 0):
        raise DomainError("empirical prior undefined: some class has no samples")
    return prior_from_counts(counts)


def _one_view(x: Array, cfg: ViewConfig, rng: Rng) -> Array:
    """x * (1 + jitter) + N(0, sigma^2), then coordinates zeroed w.p. mask_prob.

    Draw order per view is fixed: jitter, noise, mask. jitter is a single
    scale factor per sample, uniform on [-scale_jitter, scale_jitter].
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    jitter = rng.uniform(-cfg.scale_jitter, cfg.scale_jitter, size=(n, 1))
    view = x * (1.0 + jitter)
    if cfg.noise_sigma > 0:
        view = view + rng.normal(0.0, cfg.noise_sigma, size=(n, d))
    if cfg.mask_prob > 0:
        keep = rng.random(size=(n, d)) >= cfg.mask_prob
        view = view * keep
    return view


def gen_views(x: Array, cfg: ViewConfig, rng: Rng) -> tuple[Array, Array]:
    """Two independently perturbed views of one feature vector."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    v1 = _one_view(x, cfg, rng)
    v2 = _one_view(x, cfg, rng)
    if squeeze:
        return v1[0], v2[0]
    return v1, v2


def gen_view_batch(X: Array, cfg: ViewConfig, rng: Rng) -> tuple[Array, Array]:
    """Vectorized two-view generation for a batch (rows perturbed independently)."""
    return _one_view(X, cfg, rng), _one_view(X, cfg, rng)


@dataclass(frozen=True)
class ClassGroups:
    """Partition of class indices into many/medium/few shot groups."""

    many: tuple[int, ...]
    medium: tuple[int, ...]
    few: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"many": list(self.many), "medium": list(self.medium), "few": list(self.few)}

    @staticmethod
    def from_dict(d: dict) -> "ClassGroups":
        return ClassGroups(
            many=tuple(int(k) for k in d["many"]),
            medium=tuple(int(k) for k in d["medium"]),
            few=tuple(int(k) for k in d["few"]),
        )


def class_groups(
    profile: LongTailProfile, many_thresh: float, few_thresh: float
) -> ClassGroups:
    """many = counts > many_thresh, few = counts < few_thresh, medium = rest."""
    if many_thresh <= few_thresh:
        raise DomainError("many_thresh must exceed few_thresh")
    counts = np.asarray(profile.counts)
    many = tuple(int(k) for k in np.flatnonzero(counts > many_thresh))
    few = tuple(int(k) for k in np.flatnonzero(counts < few_thresh))
    medium = tuple(
        int(k) for k in range(profile.class_count) if k not in many and k not in few
    )
    return ClassGroups(many=many, medium=medium, few=few)


def percentile_thresholds(profile: LongTailProfile) -> tuple[float, float]:
    """Desk-scale group bounds: 60th / 20th percentiles of the profile counts.

    The raw 100/20 image-count bounds can leave groups empty on small
    synthetic profiles, so the benchmark derives them from the counts instead.
    """
    counts = np.asarray(profile.counts, dtype=np.float64)
    return float(np.percentile(counts, 60)), float(np.percentile(counts, 20))


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Binary container: magic "TADE", u32 version, u32 n/d/C, u32 labels
    (1-based on the wire), f64 row-major features; all little-endian.
    A JSON sidecar `<path>.json` carries the profile."""
    path = Path(path)
    n, d = ds.features.shape
    C = ds.profile.class_count
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIII", _FORMAT_VERSION, n, d, C))
        fh.write((ds.labels + 1).astype("<u4").tobytes())
        fh.write(ds.features.astype("<f8").tobytes())
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(ds.profile.to_dict(), indent=2, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    """Inverse of save_dataset, validating magic, version, and payload size."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != _MAGIC:
        raise InvalidInputError(f"{path}: bad magic bytes")
    version, n, d, C = struct.unpack("<IIII", blob[4:20])
    if version != _FORMAT_VERSION:
        raise InvalidInputError(f"{path}: unsupported container version {version}")
    want = 20 + 4 * n + 8 * n * d
    if len(blob) != want:
        raise InvalidInputError(f"{path}: payload size {len(blob)} != expected {want}")
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=20).astype(np.int64) - 1
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise InvalidInputError(f"{path}: label outside 1..{C}")
    feats = np.frombuffer(blob, dtype="<f8", count=n * d, offset=20 + 4 * n)
    sidecar = path.with_suffix(path.suffix + ".json")
    if not sidecar.exists():
        raise InvalidInputError(f"{path}: missing profile sidecar {sidecar.name}")
    profile = LongTailProfile.from_dict(json.loads(sidecar.read_text()))
    if profile.class_count != C:
        raise InvalidInputError(f"{path}: sidecar class count disagrees with header")
    return Dataset(feats.reshape(n, d).copy(), labels, profile)
