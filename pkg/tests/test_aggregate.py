import io
import json

import numpy as np
import pytest

from tailexperts.aggregate import (
    AdaptConfig,
    AggregationState,
    adapt,
    stability,
    stability_from_views,
    stability_grad_w,
)
from tailexperts.data import ViewConfig, empirical_prior, gen_gaussian_mixture, make_profile
from tailexperts.errors import ContractError
from tailexperts.model import init_model, iter_arrays
from tailexperts.numkit import Rng, finite_diff_grad, softmax
from tailexperts.train import TrainConfig, train


def trained_tiny_model(seed=0, C=3, dim=4, epochs=15):
    profile = make_profile(C, 80, 20.0, "forward")
    data = gen_gaussian_mixture(profile, dim, 3.0, Rng(seed).child("data"))
    prior = empirical_prior(data)
    model = init_model(dim, (12,), 3, C, Rng(seed).child("init"))
    cfg = TrainConfig(epochs=epochs, batch_size=32, lr0=0.2, seed=seed)
    train(model, data, prior, cfg, Rng(seed).child("train"))
    return model, data


class TestStabilityValue:
    def test_identical_confident_views_give_one(self):
        # identical views + near-one-hot predictions => dot products ~ 1
        v = np.array([[30.0, 0.0, 0.0], [0.0, 30.0, 0.0]])
        logits = [v, v.copy(), v.copy()]
        S, _ = stability_from_views(logits, [v.copy() for v in logits], np.zeros(3))
        assert S == pytest.approx(1.0, abs=1e-10)

    def test_orthogonal_one_hot_views_give_zero(self):
        va = np.array([[40.0, -40.0]])
        vb = np.array([[-40.0, 40.0]])
        S, _ = stability_from_views([va, va], [vb, vb], np.zeros(2))
        assert S == pytest.approx(0.0, abs=1e-30)

    def test_matches_double_loop_reference(self):
        rng = np.random.default_rng(3)
        K, n, C = 3, 8, 4
        l1 = [rng.normal(size=(n, C)) for _ in range(K)]
        l2 = [rng.normal(size=(n, C)) for _ in range(K)]
        raw = rng.normal(size=K)
        S, _ = stability_from_views(l1, l2, raw)

        # brute-force oracle: explicit per-sample loops
        w = np.exp(raw) / np.exp(raw).sum()
        total = 0.0
        for i in range(n):
            z1 = sum(w[k] * l1[k][i] for k in range(K))
            z2 = sum(w[k] * l2[k][i] for k in range(K))
            p1 = np.exp(z1 - z1.max()); p1 /= p1.sum()
            p2 = np.exp(z2 - z2.max()); p2 /= p2.sum()
            total += float(p1 @ p2)
        assert S == pytest.approx(total / n, abs=1e-12)

    def test_always_in_unit_interval(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            l1 = [rng.normal(size=(5, 3)) * 10 for _ in range(2)]
            l2 = [rng.normal(size=(5, 3)) * 10 for _ in range(2)]
            S, _ = stability_from_views(l1, l2, rng.normal(size=2))
            assert 0.0 <= S <= 1.0

    def test_batched_report_consistent(self):
        model, data = trained_tiny_model()
        state = AggregationState(raw=np.zeros(3))
        cfg = ViewConfig(noise_sigma=0.3)
        a = stability(model, data.features, state, cfg, Rng(7).child("v"))
        assert 0.0 <= a.S <= 1.0
        assert len(a.per_batch) == 1
        b = stability(model, data.features, state, cfg, Rng(7).child("v"), batch_size=32)
        assert len(b.per_batch) == int(np.ceil(data.n / 32))
        assert b.S == pytest.approx(
            np.average(b.per_batch, weights=[min(32, data.n - i * 32) for i in range(len(b.per_batch))]),
            abs=1e-12,
        )


class TestStabilityGradient:
    def test_identical_expert_logits_zero_gradient(self):
        rng = np.random.default_rng(5)
        v1 = rng.normal(size=(6, 4))
        v2 = rng.normal(size=(6, 4))
        _, grad = stability_from_views([v1, v1, v1], [v2, v2, v2], rng.normal(size=3))
        np.testing.assert_allclose(grad, 0.0, atol=1e-15)

    def test_two_expert_closed_form_via_sympy(self):
        import sympy as sp

        r1, r2 = sp.symbols("r1 r2")
        v1 = [[1.3, -0.4], [0.2, 0.9]]   # expert 1 logits, view 1 rows
        v2 = [[-0.5, 0.8], [1.1, -0.2]]  # expert 2 logits, view 1 rows
        u1 = [[0.6, 0.1], [-0.3, 0.5]]   # expert 1 logits, view 2
        u2 = [[0.9, -1.0], [0.4, 0.2]]   # expert 2 logits, view 2

        e1, e2 = sp.exp(r1), sp.exp(r2)
        w1, w2 = e1 / (e1 + e2), e2 / (e1 + e2)

        def softmax2(a, b):
            ea, eb = sp.exp(a), sp.exp(b)
            return ea / (ea + eb), eb / (ea + eb)

        S = 0
        for i in range(2):
            z1 = [w1 * v1[i][c] + w2 * v2[i][c] for c in range(2)]
            z2 = [w1 * u1[i][c] + w2 * u2[i][c] for c in range(2)]
            p1 = softmax2(*z1)
            p2 = softmax2(*z2)
            S += p1[0] * p2[0] + p1[1] * p2[1]
        S = S / 2
        raw_vals = {r1: 0.4, r2: -0.2}
        expected = [float(sp.diff(S, r).evalf(subs=raw_vals)) for r in (r1, r2)]

        _, grad = stability_from_views(
            [np.array(v1), np.array(v2)],
            [np.array(u1), np.array(u2)],
            np.array([0.4, -0.2]),
        )
        np.testing.assert_allclose(grad, expected, atol=1e-10)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        for trial in range(10):
            K, n, C = 3, 5, 4
            l1 = [rng.normal(size=(n, C)) * 3 for _ in range(K)]
            l2 = [rng.normal(size=(n, C)) * 3 for _ in range(K)]
            raw = rng.normal(size=K)
            _, analytic = stability_from_views(l1, l2, raw)
            fd = finite_diff_grad(lambda r: stability_from_views(l1, l2, r)[0], raw.copy())
            err = np.abs(analytic - fd)
            tol = np.maximum(1e-8, 1e-6 * np.maximum(np.abs(analytic), np.abs(fd)))
            assert np.all(err <= tol)

    def test_grad_w_pairs_with_stability(self):
        model, data = trained_tiny_model(seed=1)
        state = AggregationState(raw=np.array([0.1, -0.2, 0.05]))
        cfg = ViewConfig(noise_sigma=0.4)
        g1 = stability_grad_w(model, data.features[:32], state, cfg, Rng(9).child("x"))
        g2 = stability_grad_w(model, data.features[:32], state, cfg, Rng(9).child("x"))
        np.testing.assert_array_equal(g1, g2)
        assert g1.shape == (3,)

    def test_fixed_view_ascent_is_monotone(self):
        # with views frozen and a small step, plain gradient ascent on S must
        # not decrease (within 1e-6) at any step
        model, data = trained_tiny_model(seed=2)
        from tailexperts.data import gen_view_batch

        x1, x2 = gen_view_batch(data.features[:48], ViewConfig(noise_sigma=0.5), Rng(11))
        from tailexperts.model import forward

        l1, _ = forward(model, x1)
        l2, _ = forward(model, x2)
        raw = np.zeros(3)
        prev, _ = stability_from_views(l1, l2, raw)
        for _ in range(50):
            _, grad = stability_from_views(l1, l2, raw)
            raw = raw + 0.5 * grad
            cur, _ = stability_from_views(l1, l2, raw)
            assert cur >= prev - 1e-6
            prev = cur


class TestAdapt:
    def test_zero_epochs_returns_uniform(self):
        model, data = trained_tiny_model(seed=3)
        cfg = AdaptConfig(epochs=0, views=ViewConfig(noise_sigma=0.3))
        result = adapt(model, data, cfg, Rng(0))
        np.testing.assert_allclose(result.state.w, 1 / 3, atol=0)
        assert result.trace == [] and not result.state.stopped

    def test_label_blindness(self):
        model, data = trained_tiny_model(seed=4)
        cfg = AdaptConfig(epochs=2, batch_size=64, lr=0.3, views=ViewConfig(noise_sigma=0.5))
        from tailexperts.data import Dataset

        with_labels = adapt(model, data, cfg, Rng(13))
        scrambled = Dataset(data.features.copy(), np.zeros_like(data.labels), data.profile)
        without = adapt(model, scrambled, cfg, Rng(13))
        raw_only = adapt(model, data.features.copy(), cfg, Rng(13))
        np.testing.assert_array_equal(with_labels.state.raw, without.state.raw)
        np.testing.assert_array_equal(with_labels.state.raw, raw_only.state.raw)

    def test_weights_stay_on_simplex_through_training(self):
        model, data = trained_tiny_model(seed=5)
        cfg = AdaptConfig(epochs=4, batch_size=32, lr=1.0, views=ViewConfig(noise_sigma=0.5))
        result = adapt(model, data, cfg, Rng(14))
        for row in result.trace:
            w = np.array(row.w)
            assert np.all(w > 0)
            assert abs(w.sum() - 1.0) <= 1e-12

    def test_trace_stream_json_lines(self):
        model, data = trained_tiny_model(seed=6)
        buf = io.StringIO()
        cfg = AdaptConfig(epochs=2, batch_size=64, views=ViewConfig(noise_sigma=0.3))
        result = adapt(model, data, cfg, Rng(15), trace_stream=buf)
        lines = [json.loads(l) for l in buf.getvalue().strip().split("\n")]
        assert len(lines) == len(result.trace)
        assert set(lines[0]) == {"epoch", "S", "w", "stopped"}

    def test_deterministic(self):
        model, data = trained_tiny_model(seed=7)
        cfg = AdaptConfig(epochs=3, batch_size=32, views=ViewConfig(noise_sigma=0.4))
        a = adapt(model, data, cfg, Rng(16))
        b = adapt(model, data, cfg, Rng(16))
        np.testing.assert_array_equal(a.state.raw, b.state.raw)
        assert a.trace == b.trace

    def test_noise_expert_is_downweighted_until_stop(self):
        # replace one head with a down-scaled fresh-random head: it emits
        # diffuse noise logits that dilute ensemble agreement, so its weight
        # must fall epoch over epoch and trip the 0.05 stopping rule
        model, data = trained_tiny_model(seed=1, epochs=40)
        fresh = init_model(4, (12,), 3, 3, Rng(1001).child("fresh"))
        for layer in fresh.experts[0]:
            layer.w *= 0.3
        model.experts[2] = fresh.experts[0]
        cfg = AdaptConfig(
            epochs=80, batch_size=64, lr=4.0, momentum=0.9,
            views=ViewConfig(noise_sigma=0.4),
        )
        result = adapt(model, data, cfg, Rng(18))
        w3 = [row.w[2] for row in result.trace]
        assert all(b <= a + 0.005 for a, b in zip(w3, w3[1:])), w3
        assert w3[-1] < w3[0]
        assert result.state.stopped
        assert int(np.argmin(result.state.w)) == 2
        assert min(result.state.w) <= cfg.stop_threshold
        assert result.state.epoch <= cfg.epochs
        assert result.trace[-1].stopped

    def test_stopping_preserves_state_at_epoch_end(self):
        model, data = trained_tiny_model(seed=9)
        # K experts with 1/K below threshold stops right after epoch 1
        cfg = AdaptConfig(epochs=5, batch_size=64, stop_threshold=0.40,
                          views=ViewConfig(noise_sigma=0.2))
        result = adapt(model, data, cfg, Rng(18))
        assert result.state.stopped and result.state.epoch == 1
        assert len(result.trace) == 1
