"""Shared test utilities for gradient checks.

ReLU is non-differentiable at 0 and freshly initialized biases are exactly 0,
so finite differences straddle kinks on unlucky instances. These builders
perturb all parameters and walk seeds until every pre-activation clears a
margin, keeping central differences valid while the instances stay random.
"""
import numpy as np

from tailexperts.model import forward, init_model, iter_arrays
from tailexperts.numkit import Rng

KINK_MARGIN = 1e-3  # >> the 1e-5 finite-difference step


def perturbed_model(seed, input_dim=3, hidden=(5,), K=3, C=3, head_hidden=2):
    m = init_model(input_dim, hidden, K, C, Rng(seed), head_hidden=head_hidden)
    noise = Rng(seed).child("perturb")
    for a in iter_arrays(m):
        a += noise.uniform(-0.3, 0.3, size=a.shape)
    return m


def _min_preactivation(m, x):
    _, trace = forward(m, x)
    margins = [np.abs(p).min() for p in trace.backbone_pre]
    for pres in trace.head_pre:
        margins.extend(np.abs(p).min() for p in pres[:-1])  # last layer is linear
    return min(margins) if margins else np.inf


def model_instance_with_margin(seed, n=6, margin=KINK_MARGIN, **model_kw):
    """(model, x, y) whose ReLU pre-activations all clear `margin`."""
    for attempt in range(50):
        s = seed + 1000 * attempt
        m = perturbed_model(s, **model_kw)
        data_rng = Rng(s).child("data")
        x = data_rng.normal(size=(n, m.input_dim))
        y = data_rng.integers(0, m.n_classes, size=n)
        if _min_preactivation(m, x) > margin:
            return m, x, y
    raise AssertionError("no kink-free instance found; widen the search")


def assert_close_to_fd(analytic, fd, rtol, floor):
    analytic = np.asarray(analytic).ravel()
    fd = np.asarray(fd).ravel()
    err = np.abs(analytic - fd)
    tol = np.maximum(floor, rtol * np.maximum(np.abs(analytic), np.abs(fd)))
    worst = float((err - tol).max())
    assert np.all(err <= tol), f"gradient mismatch, worst excess {worst:.3e}"
