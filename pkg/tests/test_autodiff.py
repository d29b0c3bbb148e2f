"""Graph primitives against hand values and finite differences."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from etcbound import autodiff as ad
from etcbound.autodiff import DiffValue, DomainError, backward, grad_check


def scalar(x):
    return DiffValue(float(x))


class TestPrimitiveValues:
    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(scalar(0.0)).value == 0.5

    def test_stop_gradient_passes_value(self):
        x = scalar(3.0)
        y = ad.stop_gradient(x)
        assert y.value == 3.0
        root = ad.mul(y, scalar(2.0))
        backward(root)
        assert x.adjoint == 0.0

    def test_cosine_self_is_one(self):
        u = np.array([0.3, -1.2, 2.0])
        assert ad.cosine(u, u).value == pytest.approx(1.0, abs=1e-15)

    def test_cosine_zero_vector_is_zero(self):
        u = np.zeros(3)
        v = np.array([1.0, 2.0, 3.0])
        node = ad.cosine(DiffValue(u), DiffValue(v))
        assert node.value == 0.0
        backward(ad.mul(node, scalar(2.0)))

    def test_arithmetic_forward(self):
        a, b = scalar(2.0), scalar(8.0)
        assert ad.add(a, b).value == 10.0
        assert ad.sub(a, b).value == -6.0
        assert ad.mul(a, b).value == 16.0
        assert ad.div(b, a).value == 4.0
        assert ad.square(b).value == 64.0
        assert ad.exp(scalar(0.0)).value == 1.0
        assert ad.log(scalar(1.0)).value == 0.0
        assert ad.sqrt(scalar(9.0)).value == 3.0
        assert ad.tanh(scalar(0.0)).value == 0.0

    def test_vector_reductions(self):
        v = DiffValue(np.array([1.0, 2.0, 3.0]))
        assert ad.vsum(v).value == 6.0
        assert ad.vmean(v).value == 2.0
        assert ad.dot(v, np.array([1.0, 1.0, 1.0])).value == 6.0

    def test_weighted_sum(self):
        items = [scalar(1.0), scalar(2.0), scalar(3.0)]
        out = ad.wsum([0.5, 0.25, 0.25], items)
        assert out.value == 0.5 + 0.5 + 0.75

    def test_matvec_and_param_matvec(self):
        A = np.array([[1.0, 2.0], [3.0, 4.0]])
        x = DiffValue(np.array([1.0, 1.0]))
        np.testing.assert_allclose(ad.matvec(A, x).value, [3.0, 7.0])
        W = DiffValue(A)
        np.testing.assert_allclose(ad.param_matvec(W, np.array([1.0, 1.0])).value, [3.0, 7.0])

    def test_vget(self):
        v = DiffValue(np.array([5.0, 7.0]))
        out = ad.vget(v, 1)
        assert out.value == 7.0
        backward(out)
        np.testing.assert_allclose(v.adjoint, [0.0, 1.0])


class TestDomainErrors:
    def test_div_by_zero_names_op(self):
        with pytest.raises(DomainError, match="div"):
            ad.div(scalar(1.0), scalar(0.0))

    def test_log_non_positive_names_op(self):
        with pytest.raises(DomainError, match="log"):
            ad.log(scalar(0.0))
        with pytest.raises(DomainError, match="log"):
            ad.log(scalar(-1.0))

    def test_sqrt_negative_names_op(self):
        with pytest.raises(DomainError, match="sqrt"):
            ad.sqrt(scalar(-1.0))


class TestHinge:
    def test_derivative_above_below_and_at_kink(self):
        for x0, expected in [(2.0, 1.0), (0.5, 0.0), (1.0, 0.0)]:
            x = scalar(x0)
            backward(ad.maximum(x, 1.0))
            assert x.adjoint == expected, f"max(x,1) at x={x0}"

    def test_floor_value(self):
        assert ad.maximum(scalar(-3.0), 0.15).value == 0.15
        assert ad.maximum(scalar(0.5), 0.15).value == 0.5


class TestBackward:
    def test_square_gradient(self):
        x = scalar(3.0)
        backward(ad.square(x))
        assert x.adjoint == 6.0

    def test_fan_out_accumulates(self):
        x = scalar(2.0)
        # y = x*x + x  => dy/dx = 2x + 1
        backward(ad.add(ad.mul(x, x), x))
        assert x.adjoint == 5.0

    def test_deterministic_adjoints(self):
        def build():
            x = DiffValue(np.array([0.3, -0.7, 1.1]))
            y = scalar(0.4)
            root = ad.mul(ad.vmean(ad.sigmoid(x * y)), ad.exp(y))
            backward(root)
            return root.value, np.array(x.adjoint), float(y.adjoint)

        v1, gx1, gy1 = build()
        v2, gx2, gy2 = build()
        assert v1 == v2
        assert np.array_equal(gx1, gx2)
        assert gy1 == gy2

    def test_vector_root_rejected(self):
        with pytest.raises(ValueError):
            backward(DiffValue(np.array([1.0, 2.0])))


class TestGradCheck:
    def test_quadratic_passes(self):
        def f(p):
            leaf = scalar(p[0])
            return ad.square(leaf), [leaf]

        report = grad_check(f, np.array([3.0]))
        assert report.passed
        assert report.max_rel_error < 1e-6

    def test_broken_gradient_reports_failure_not_exception(self):
        # op with a deliberately wrong backward: value x^2 but gradient 1
        def f(p):
            leaf = scalar(p[0])
            out = DiffValue(leaf.value * leaf.value, (leaf,))
            out._bw = lambda g: ad._acc(leaf, g)
            return out, [leaf]

        report = grad_check(f, np.array([3.0]))
        assert not report.passed
        assert report.failures[0].index == 0

    @given(st.integers(min_value=0, max_value=10_000))
    def test_chain_rule_random_composition(self, seed):
        """Composed sigmoid/exp/mul/dot graphs match finite differences."""
        rng = np.random.default_rng(seed)
        x0 = rng.uniform(-1.5, 1.5, size=4)
        c = rng.uniform(-1.0, 1.0, size=4)

        def f(p):
            v = DiffValue(p.copy())
            s = ad.sigmoid(v * 1.3)
            root = ad.mul(ad.dot(s, c), ad.tanh(ad.vmean(v)))
            root = ad.add(root, ad.exp(ad.vmean(s) * 0.5))
            return root, [v]

        report = grad_check(f, x0)
        assert report.passed, report.failures[:3]

    def test_sig_window_matches_finite_differences(self):
        t = (np.arange(16) + 0.5) / 16

        def f(p):
            c, w = scalar(p[0]), scalar(p[1])
            mask = ad.sig_window(c, w, t, 80.0, -0.5, 0.5)
            return ad.vmean(ad.mul(mask, mask)), [c, w]

        report = grad_check(f, np.array([0.45, 0.3]))
        assert report.passed, report.failures


class TestStopGradientContract:
    def test_symmetric_mse_gradient_flows_one_side_only(self):
        """d(MSE(a, detach(b)))/db == 0 while d/da is live."""
        a, b = scalar(0.3), scalar(0.7)
        loss = ad.square(ad.sub(a, ad.stop_gradient(b)))
        backward(loss)
        assert b.adjoint == 0.0
        assert a.adjoint == pytest.approx(2 * (0.3 - 0.7))
