"""Tape autodiff: analytic examples, finite-difference properties, invariants."""

import numpy as np
import pytest

import cardioemu.numerics.autodiff as ad
from cardioemu.errors import ConfigurationError
from cardioemu.numerics import Tape, grad


def central_diff(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


class TestGradExamples:
    def test_square(self):
        assert grad(lambda xs: xs[0] * xs[0], [3.0]) == [6.0]

    def test_exp_at_zero(self):
        assert grad(lambda xs: ad.exp(xs[0]), [0.0]) == [1.0]

    def test_product_plus_log(self):
        g = grad(lambda xs: xs[0] * xs[1] + ad.log(xs[1]), [2.0, 1.0])
        assert g == [1.0, 3.0]

    def test_unused_input_gets_zero(self):
        g = grad(lambda xs: xs[0] * xs[0], [3.0, 5.0])
        assert g == [6.0, 0.0]

    def test_non_node_output_rejected(self):
        with pytest.raises(ConfigurationError):
            grad(lambda xs: 1.0, [3.0])


class TestTapeInvariants:
    def test_topological_order(self):
        tape = Tape()
        x = tape.var(2.0)
        y = ad.exp(x) * x + 1.0
        for node in tape.nodes:
            for parent in node.parents:
                assert parent.index < node.index
        assert y.tape is tape

    def test_constant_gradient_is_exactly_zero(self):
        tape = Tape()
        x = tape.var(1.5)
        c = tape.const(4.0)
        out = x * c
        gx, gc = tape.gradient(out, [x, c])
        assert float(gc) == 0.0
        assert float(gx) == 4.0

    def test_seed_gradient_is_exactly_one(self):
        tape = Tape()
        x = tape.var(1.5)
        out = x * 2.0
        grads = tape.backward(out)
        assert float(grads[out.index]) == 1.0

    def test_backward_requires_scalar(self):
        tape = Tape()
        x = tape.var(np.array([1.0, 2.0]))
        with pytest.raises(ConfigurationError):
            tape.backward(x)


ELEMENTWISE_OPS = [
    ("add", lambda x: x[0] + x[1], 2, (-2.0, 2.0)),
    ("sub", lambda x: x[0] - x[1], 2, (-2.0, 2.0)),
    ("mul", lambda x: x[0] * x[1], 2, (-2.0, 2.0)),
    ("div", lambda x: x[0] / x[1], 2, (0.2, 2.0)),
    ("pow", lambda x: x[0] ** 2.5, 1, (0.2, 2.0)),
    ("exp", lambda x: ad.exp(x[0]), 1, (-2.0, 2.0)),
    ("log", lambda x: ad.log(x[0]), 1, (0.2, 2.0)),
    ("tanh", lambda x: ad.tanh(x[0]), 1, (-2.0, 2.0)),
    ("softplus", lambda x: ad.softplus(x[0]), 1, (-2.0, 2.0)),
    ("sqrt", lambda x: ad.sqrt(x[0]), 1, (0.2, 2.0)),
    ("dot", lambda x: x[0] * x[1] + x[1] * x[2], 3, (-2.0, 2.0)),
]


@pytest.mark.parametrize("name,f,arity,box", ELEMENTWISE_OPS, ids=[o[0] for o in ELEMENTWISE_OPS])
def test_elementary_op_matches_finite_differences(name, f, arity, box):
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(10):
        x = rng.uniform(*box, size=arity)
        got = np.array(grad(lambda xs: f(xs), list(x)))
        want = central_diff(lambda v: float(ad.value_of(f(list(v)))), x)
        denom = max(np.abs(want).max(), 1e-8)
        assert np.abs(got - want).max() / denom <= 1e-6


class TestArrayOps:
    def test_sum_axis_and_mean(self):
        tape = Tape()
        x = tape.var(np.arange(6.0).reshape(2, 3))
        out = ad.asum(ad.mean(x, axis=0))
        (g,) = tape.gradient(out, [x])
        np.testing.assert_allclose(g, np.full((2, 3), 0.5))

    def test_broadcast_bias_gradient(self):
        tape = Tape()
        w = tape.var(np.ones((4, 3)))
        b = tape.var(np.zeros(3))
        out = ad.asum(w + b)
        gw, gb = tape.gradient(out, [w, b])
        np.testing.assert_allclose(gw, np.ones((4, 3)))
        np.testing.assert_allclose(gb, np.full(3, 4.0))

    def test_matmul_gradient(self):
        rng = np.random.default_rng(3)
        a0 = rng.normal(size=(3, 4))
        b0 = rng.normal(size=(4, 2))
        tape = Tape()
        a, b = tape.var(a0), tape.var(b0)
        out = ad.asum(ad.square(ad.dot(a, b)))
        ga, gb = tape.gradient(out, [a, b])

        def f(aflat):
            return float(np.sum((aflat.reshape(3, 4) @ b0) ** 2))

        np.testing.assert_allclose(ga.flatten(), central_diff(f, a0.flatten()), rtol=1e-6)

        def fb(bflat):
            return float(np.sum((a0 @ bflat.reshape(4, 2)) ** 2))

        np.testing.assert_allclose(gb.flatten(), central_diff(fb, b0.flatten()), rtol=1e-6)

    def test_clip_passes_gradient_inside_only(self):
        tape = Tape()
        x = tape.var(np.array([-3.0, 0.5, 4.0]))
        out = ad.asum(ad.clip(x, -1.0, 1.0) * 2.0)
        (g,) = tape.gradient(out, [x])
        np.testing.assert_allclose(g, [0.0, 2.0, 0.0])

    def test_column_extraction(self):
        tape = Tape()
        x = tape.var(np.arange(6.0).reshape(3, 2))
        out = ad.asum(ad.square(ad.column(x, 1)))
        (g,) = tape.gradient(out, [x])
        expected = np.zeros((3, 2))
        expected[:, 1] = 2 * np.arange(6.0).reshape(3, 2)[:, 1]
        np.testing.assert_allclose(g, expected)


class TestLinalgOps:
    def test_cholesky_logdet_gradient(self):
        rng = np.random.default_rng(11)
        m = rng.normal(size=(4, 4))
        a0 = m @ m.T + 4 * np.eye(4)

        tape = Tape()
        a = tape.var(a0)
        out = 2.0 * ad.asum(ad.log(ad.diagonal(ad.cholesky(a))))
        (g,) = tape.gradient(out, [a])

        def f(aflat):
            mat = 0.5 * (aflat.reshape(4, 4) + aflat.reshape(4, 4).T)
            return float(np.linalg.slogdet(mat)[1])

        fd = central_diff(f, a0.flatten()).reshape(4, 4)
        np.testing.assert_allclose(0.5 * (g + g.T), 0.5 * (fd + fd.T), rtol=1e-6, atol=1e-9)

    def test_quadratic_form_gradient_through_solve(self):
        rng = np.random.default_rng(12)
        m = rng.normal(size=(5, 5))
        a0 = m @ m.T + 5 * np.eye(5)
        y = rng.normal(size=5)

        tape = Tape()
        a = tape.var(a0)
        alpha = ad.solve_lower(ad.cholesky(a), y)
        out = ad.asum(ad.square(alpha))
        (g,) = tape.gradient(out, [a])

        def f(aflat):
            mat = 0.5 * (aflat.reshape(5, 5) + aflat.reshape(5, 5).T)
            return float(y @ np.linalg.solve(mat, y))

        fd = central_diff(f, a0.flatten()).reshape(5, 5)
        np.testing.assert_allclose(0.5 * (g + g.T), 0.5 * (fd + fd.T), rtol=1e-5, atol=1e-9)

    def test_outer_sq_diff_values(self):
        u = np.array([0.0, 1.0, 3.0])
        d = ad.outer_sq_diff(u)
        np.testing.assert_allclose(d, (u[:, None] - u[None, :]) ** 2)

    def test_add_diag_scalar_gradient(self):
        tape = Tape()
        s = tape.var(0.3)
        k = ad.add_diag(tape.const(np.zeros((3, 3))), s)
        out = ad.asum(ad.diagonal(k))
        (g,) = tape.gradient(out, [s])
        assert float(g) == pytest.approx(3.0)
