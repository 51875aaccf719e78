import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailexperts.errors import NumericError, ShapeError
from tailexperts.numkit import Rng, finite_diff_grad, log_softmax, matmul, softmax

finite_vec = st.lists(
    st.floats(min_value=-50, max_value=50, allow_nan=False), min_size=2, max_size=8
)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(a, np.eye(2)), a)

    def test_orthogonal_vectors(self):
        out = matmul(np.array([[1.0, 0.0]]), np.array([[0.0], [1.0]]))
        assert out.shape == (1, 1) and out[0, 0] == 0.0

    def test_against_triple_loop_reference(self):
        rng = np.random.default_rng(42)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        # independent oracle: explicit triple loop
        ref = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    ref[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(matmul(a, b), ref, rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_rejects_non_2d(self):
        with pytest.raises(ShapeError):
            matmul(np.ones(3), np.ones((3, 1)))

    def test_associativity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = rng.normal(size=(3, 4))
            b = rng.normal(size=(4, 5))
            c = rng.normal(size=(5, 2))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            np.testing.assert_allclose(left, right, atol=1e-10)


class TestSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5], atol=1e-15)

    def test_extreme_logits_no_overflow(self):
        out = softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(out))
        assert out[0] > 1 - 1e-12 and out[1] < 1e-12

    def test_extended_precision_oracle(self):
        # frozen from a 50-digit mpmath evaluation of exp(v)/sum(exp(v))
        expected = [0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953]
        np.testing.assert_allclose(softmax(np.array([1.0, 2.0, 3.0])), expected, atol=1e-15)

    @given(finite_vec)
    def test_sums_to_one_and_positive(self, v):
        out = softmax(np.array(v))
        assert abs(out.sum() - 1.0) <= 1e-12
        assert np.all(out > 0)

    @given(finite_vec, st.floats(min_value=-30, max_value=30, allow_nan=False))
    def test_shift_invariance(self, v, c):
        v = np.array(v)
        np.testing.assert_allclose(softmax(v), softmax(v + c), atol=1e-12)
        # argmax comparison only makes sense when the top-two gap survives
        # the rounding of v + c itself (sub-ulp gaps become ties)
        top2 = np.sort(v)[-2:]
        if top2[1] - top2[0] > 1e-9:
            assert np.argmax(softmax(v)) == np.argmax(softmax(v + c))

    def test_rowwise_on_matrix(self):
        out = softmax(np.array([[0.0, 0.0], [1000.0, 0.0]]), axis=1)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


class TestLogSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_allclose(
            log_softmax(np.array([0.0, 0.0])), [-np.log(2), -np.log(2)], atol=1e-15
        )

    @given(finite_vec, st.floats(min_value=-30, max_value=30, allow_nan=False))
    def test_shift_invariance(self, v, c):
        v = np.array(v)
        np.testing.assert_allclose(log_softmax(v), log_softmax(v + c), atol=1e-12)

    def test_extended_precision_oracle(self):
        expected = [-2.4076059644443803045, -1.4076059644443803045, -0.40760596444438030448]
        np.testing.assert_allclose(log_softmax(np.array([1.0, 2.0, 3.0])), expected, atol=1e-14)

    def test_matches_log_of_softmax(self):
        v = np.array([3.0, -1.0, 0.5, 2.0])
        np.testing.assert_allclose(log_softmax(v), np.log(softmax(v)), atol=1e-12)

    @given(finite_vec)
    def test_nonpositive(self, v):
        assert np.all(log_softmax(np.array(v)) <= 0)

    def test_no_overflow_on_huge_inputs(self):
        out = log_softmax(np.array([1e300, 0.0]) / 1e297)  # ~(1000, 0)
        assert np.all(np.isfinite(out))


class TestFiniteDiffGrad:
    def test_square(self):
        g = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]))
        assert abs(g[0] - 6.0) < 1e-6

    def test_constant(self):
        g = finite_diff_grad(lambda x: 7.0, np.array([1.0, -2.0, 0.5]))
        np.testing.assert_array_equal(g, np.zeros(3))

    @given(
        st.lists(st.floats(min_value=-3, max_value=3, allow_nan=False), min_size=1, max_size=4),
        st.lists(st.floats(min_value=-2, max_value=2, allow_nan=False), min_size=3, max_size=3),
    )
    @settings(max_examples=50)
    def test_polynomial_matches_symbolic(self, x, coeffs):
        # f(x) = sum_i a*x_i^3 + b*x_i^2 + c*x_i ; f' = 3a*x^2 + 2b*x + c
        a, b, c = coeffs
        x = np.array(x)
        f = lambda v: float(np.sum(a * v**3 + b * v**2 + c * v))
        sym = 3 * a * x**2 + 2 * b * x + c
        np.testing.assert_allclose(finite_diff_grad(f, x), sym, atol=1e-6)

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda x: 0.0, np.zeros(1), eps=0.0)

    def test_non_finite_objective(self):
        with pytest.raises(NumericError):
            finite_diff_grad(lambda x: float("nan"), np.zeros(2))

    def test_matches_ce_loss_gradient(self):
        # cross-module check against the analytic cross-entropy gradient
        from tailexperts.losses import ce_loss

        rng = np.random.default_rng(7)
        v = rng.normal(size=(4, 5))
        y = rng.integers(0, 5, size=4)
        analytic = ce_loss(v, y).grad_logits
        fd = finite_diff_grad(lambda z: ce_loss(z.reshape(4, 5), y).value, v.ravel())
        np.testing.assert_allclose(analytic.ravel(), fd, atol=1e-6)


class TestRng:
    def test_same_seed_same_sequence(self):
        a = Rng(123).normal(size=10)
        b = Rng(123).normal(size=10)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(1).normal(size=10), Rng(2).normal(size=10))

    def test_children_are_independent_streams(self):
        root = Rng(5)
        a = root.child("data").normal(size=8)
        b = root.child("train").normal(size=8)
        assert not np.array_equal(a, b)
        # identical path reproduces
        np.testing.assert_array_equal(a, Rng(5).child("data").normal(size=8))

    def test_child_by_index(self):
        np.testing.assert_array_equal(
            Rng(9).child(3).random(5), Rng(9).child(3).random(5)
        )
        assert not np.array_equal(Rng(9).child(3).random(5), Rng(9).child(4).random(5))

    def test_parent_draws_do_not_disturb_children(self):
        r1 = Rng(11)
        r1.normal(size=100)
        c1 = r1.child("x").random(4)
        c2 = Rng(11).child("x").random(4)
        np.testing.assert_array_equal(c1, c2)
