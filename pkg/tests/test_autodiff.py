import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unlearnbench import autodiff as ad

N_INSTANCES = 20
TOL = 1e-4


def _away_from_zero(rng, shape, gap=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-30) * gap * 2, x)


class TestForwardExamples:
    def test_matmul_identity(self):
        out = ad.matmul(ad.Tensor([[1.0, 0.0], [0.0, 1.0]]), ad.Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [4.0]])

    def test_matmul_dot(self):
        out = ad.matmul(ad.Tensor([[1.0, 2.0]]), ad.Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))

    def test_l2_normalize_examples(self):
        out = ad.l2_normalize(ad.Tensor([[3.0, 4.0], [1.0, 0.0], [0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8], [1.0, 0.0], [0.0, 0.0]], atol=1e-15)

    def test_cosine_examples(self):
        a = ad.Tensor([[1.0, 0.0]])
        b = ad.Tensor([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        np.testing.assert_array_equal(ad.cosine_matrix(a, b).data, [[1.0, 0.0, -1.0]])

    def test_cosine_dim_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.cosine_matrix(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 4))))

    def test_hinge_examples(self):
        x = ad.Tensor([-0.5, 1.2, 0.0], requires_grad=True)
        y = ad.hinge(x)
        np.testing.assert_array_equal(y.data, [0.0, 1.2, 0.0])
        ad.backward(ad.sum(y))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_cross_entropy_uniform(self):
        assert ad.log_sum_exp_ce(ad.Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_cross_entropy_closed_form(self):
        expected = -math.log(math.e / (math.e + 1))
        assert ad.log_sum_exp_ce(ad.Tensor([[1.0, 0.0]]), [0]).item() == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.31326, abs=1e-5)

    def test_cross_entropy_no_overflow(self):
        v = ad.log_sum_exp_ce(ad.Tensor([[1000.0, 0.0, 0.0]]), [0]).item()
        assert np.isfinite(v) and v == pytest.approx(0.0, abs=1e-12)

    def test_cross_entropy_bad_label(self):
        with pytest.raises(IndexError):
            ad.log_sum_exp_ce(ad.Tensor([[0.0, 0.0]]), [2])


class TestBackward:
    def test_sum_gives_ones(self):
        x = ad.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ad.backward(ad.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_quadratic(self):
        x = ad.Tensor([[1.0, 2.0]], requires_grad=True)
        ad.backward(ad.sum(x * x))
        np.testing.assert_array_equal(x.grad, [[2.0, 4.0]])

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError):
            ad.backward(ad.Tensor(np.ones(3), requires_grad=True) * 2.0)

    def test_accumulates_without_reset(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        ad.backward(ad.sum(x * x))
        ad.backward(ad.sum(x * x))
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_empty_graph_gives_zero_grads(self):
        w = ad.Tensor(np.ones((2, 2)), requires_grad=True)
        ad.backward(ad.sum(ad.Tensor(np.ones(3))))
        np.testing.assert_array_equal(w.grad, np.zeros((2, 2)))

    def test_shared_subexpression_visited_once(self):
        x = ad.Tensor([3.0], requires_grad=True)
        y = x * 2.0
        ad.backward(ad.sum(y * y + y))
        # d/dx (4x^2 + 2x) = 8x + 2
        np.testing.assert_allclose(x.grad, [26.0])

    def test_grad_check_sum_exact(self, rng):
        assert ad.grad_check(lambda t: ad.sum(t), rng.standard_normal((3, 4))) < 1e-8

    def test_forward_is_deterministic(self, rng):
        a, b = rng.standard_normal((5, 4)), rng.standard_normal((6, 4))
        f = lambda: ad.cosine_matrix(ad.l2_normalize(ad.Tensor(a)), ad.l2_normalize(ad.Tensor(b))).data  # noqa: E731
        assert f().tobytes() == f().tobytes()


class TestGradientChecks:
    """Each op against central differences on 20 random small instances."""

    def test_matmul(self, rng):
        for _ in range(N_INSTANCES):
            m, k, n = rng.integers(1, 5, size=3)
            a, b, w = rng.standard_normal((m, k)), rng.standard_normal((k, n)), rng.standard_normal((m, n))
            assert ad.grad_check(lambda t: ad.sum(ad.matmul(t, ad.Tensor(b)) * w), a) < TOL
            assert ad.grad_check(lambda t: ad.sum(ad.matmul(ad.Tensor(a), t) * w), b) < TOL

    def test_l2_normalize(self, rng):
        for _ in range(N_INSTANCES):
            x = rng.standard_normal((rng.integers(1, 5), rng.integers(2, 6)))
            w = rng.standard_normal(x.shape)
            assert ad.grad_check(lambda t: ad.sum(ad.l2_normalize(t) * w), x) < TOL

    def test_l2_normalize_then_sum(self, rng):
        assert ad.grad_check(lambda t: ad.sum(ad.l2_normalize(t)), rng.standard_normal((4, 3))) < 1e-5

    def test_cosine(self, rng):
        for _ in range(N_INSTANCES):
            d = int(rng.integers(2, 6))
            a, b = rng.standard_normal((3, d)), rng.standard_normal((4, d))
            w = rng.standard_normal((3, 4))
            assert ad.grad_check(lambda t: ad.sum(ad.cosine_matrix(ad.l2_normalize(t), ad.l2_normalize(ad.Tensor(b))) * w), a) < TOL
            # self-similarity path
            ws = rng.standard_normal((3, 3))
            assert ad.grad_check(lambda t: ad.sum(ad.cosine_matrix(ad.l2_normalize(t), ad.l2_normalize(t)) * ws), a) < TOL

    def test_hinge(self, rng):
        for _ in range(N_INSTANCES):
            x = _away_from_zero(rng, (3, 4))
            w = rng.standard_normal(x.shape)
            assert ad.grad_check(lambda t: ad.sum(ad.hinge(t) * w), x) < TOL

    def test_cross_entropy(self, rng):
        for _ in range(N_INSTANCES):
            n, k = rng.integers(1, 5), rng.integers(2, 6)
            logits = rng.standard_normal((n, k))
            labels = rng.integers(0, k, size=n)
            assert ad.grad_check(lambda t: ad.log_sum_exp_ce(t, labels), logits) < TOL

    def test_elementwise_and_reductions(self, rng):
        for _ in range(N_INSTANCES):
            x = rng.uniform(0.5, 2.0, size=(3, 4))
            w = rng.standard_normal(x.shape)
            assert ad.grad_check(lambda t: ad.sum(ad.tanh(t) * w), x) < TOL
            assert ad.grad_check(lambda t: ad.sum(ad.exp(t) * w), x) < TOL
            assert ad.grad_check(lambda t: ad.sum(ad.log(t) * w), x) < TOL
            assert ad.grad_check(lambda t: ad.sum((ad.Tensor(w) / t)), x) < TOL
            assert ad.grad_check(lambda t: ad.sum(ad.mean(t, axis=0) * w[0]), x) < TOL
            assert ad.grad_check(lambda t: ad.sum(ad.row_norm(t) * w[:, 0]), x) < TOL
            assert ad.grad_check(lambda t: ad.sum(ad.index_rows(t, [2, 0, 2]) * w[:3]), x) < TOL

    def test_masked_logsumexp(self, rng):
        for _ in range(N_INSTANCES):
            # unit-scale logits keep every gradient entry well above finite-difference roundoff
            x = rng.standard_normal((4, 5))
            mask = rng.random((4, 5)) < 0.5
            mask[:, 0] = True
            w = rng.standard_normal(4)
            assert ad.grad_check(lambda t: ad.sum(ad.masked_logsumexp(t, mask) * w), x) < TOL


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
                  elements=st.floats(-1e3, 1e3, allow_nan=False)))
    def test_normalized_rows_are_unit(self, x):
        out = ad.l2_normalize(ad.Tensor(x)).data
        norms = np.linalg.norm(x, axis=1)
        big = norms >= 1e-6
        np.testing.assert_allclose(np.linalg.norm(out[big], axis=1), 1.0, atol=1e-9)
        assert np.isfinite(out).all()

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 3), elements=st.floats(-10, 10, allow_nan=False)),
           arrays(np.float64, (5, 3), elements=st.floats(-10, 10, allow_nan=False)))
    def test_cosine_is_bounded(self, a, b):
        c = ad.cosine_matrix(ad.l2_normalize(ad.Tensor(a)), ad.l2_normalize(ad.Tensor(b))).data
        assert (c >= -1 - 1e-9).all() and (c <= 1 + 1e-9).all()

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-60, 60, allow_nan=False)),
           st.lists(st.integers(0, 3), min_size=3, max_size=3))
    def test_cross_entropy_matches_naive(self, logits, labels):
        z = logits - logits.max(axis=1, keepdims=True)
        naive = np.mean(np.log(np.exp(z).sum(axis=1)) - z[np.arange(3), labels])
        assert ad.log_sum_exp_ce(ad.Tensor(logits), labels).item() == pytest.approx(naive, abs=1e-10)
