import numpy as np
import pytest
import scipy.sparse as sp

from gcsntk.data_io import SBMSpec, sbm_generate
from gcsntk.errors import ConfigError, NumericalOverflowError
from gcsntk.grad import correlation_margin, finite_diff, grad_check, loss_and_grad, loss_value, relative_errors
from gcsntk.graph import CondensedGraph, one_hot, prepare_target
from gcsntk.kernel import KernelConfig
from gcsntk.tape import Tape, check_finite


def check_primitive(build, inputs, seed=0, rtol=1e-7):
    """Gradient of ``sum(W * build(...))`` from the tape vs central differences."""
    rng = np.random.default_rng(seed)
    out = build(Tape(enabled=False), *[np.array(a) for a in inputs])
    outs = out if isinstance(out, tuple) else (out,)
    weights = [rng.standard_normal(np.shape(o.value)) for o in outs]

    def scalar(values):
        res = build(Tape(enabled=False), *values)
        res = res if isinstance(res, tuple) else (res,)
        return float(sum(np.sum(w * r.value) for w, r in zip(weights, res)))

    # Reverse sweep seeded with every output's weight at once.
    t = Tape()
    leaves = [t.leaf(a) for a in inputs]
    res = build(t, *leaves)
    res = res if isinstance(res, tuple) else (res,)
    adj = {r._id: w for r, w in zip(res, weights)}
    for node in reversed(t.nodes):
        g_out = [adj.pop(o._id, None) for o in node.outputs]
        if all(g is None for g in g_out):
            continue
        for x, g in zip(node.inputs, node.backward(g_out)):
            if g is not None and getattr(x, "requires_grad", False):
                adj[x._id] = adj.get(x._id, 0.0) + g
    grads = [adj.get(leaf._id, np.zeros_like(leaf.value)) for leaf in leaves]
    for i, a in enumerate(inputs):
        def f(v, i=i):
            vals = [np.array(b) for b in inputs]
            vals[i] = v
            return scalar(vals)

        np.testing.assert_allclose(grads[i], finite_diff(f, np.array(a, dtype=float), 1e-6), rtol=rtol, atol=1e-8)


RNG = np.random.default_rng(42)


class TestPrimitives:
    def test_matmul(self):
        check_primitive(lambda t, a, b: t.matmul(a, b), [RNG.standard_normal((3, 4)), RNG.standard_normal((4, 2))])

    def test_sparse_left_matmul(self):
        s = sp.random(5, 3, density=0.5, random_state=1, format="csr")
        check_primitive(lambda t, b: t.matmul(s, b), [RNG.standard_normal((3, 2))])

    def test_matmul_nt(self):
        check_primitive(lambda t, a, b: t.matmul_nt(a, b), [RNG.standard_normal((3, 4)), RNG.standard_normal((2, 4))])

    def test_gram(self):
        check_primitive(lambda t, x: t.gram(x), [RNG.standard_normal((3, 2))])

    def test_scale(self):
        check_primitive(
            lambda t, y, r, c: t.scale(y, r, c),
            [RNG.standard_normal((3, 2)), RNG.standard_normal(3), RNG.standard_normal(2)],
        )

    def test_rsqrt_diag(self):
        m = RNG.standard_normal((3, 3))
        check_primitive(lambda t, m: t.rsqrt_diag(m), [m @ m.T + np.eye(3)])

    def test_symmetrize(self):
        check_primitive(lambda t, y: t.symmetrize(y), [RNG.standard_normal((3, 3))])

    def test_row_norms(self):
        check_primitive(lambda t, x: t.row_norms(x), [RNG.standard_normal((4, 3))])

    def test_mul_scalar(self):
        check_primitive(lambda t, x: t.mul_scalar(x, 2.5), [RNG.standard_normal((2, 2))])

    def test_take_rows_with_repeats(self):
        check_primitive(lambda t, x: t.take_rows(x, np.array([2, 0, 2])), [RNG.standard_normal((3, 2))])

    @pytest.mark.parametrize("literal", [False, True])
    def test_kappa_layer(self, literal):
        x = RNG.standard_normal((4, 5))
        y = RNG.standard_normal((3, 5))
        sig = 0.3 * (x @ y.T) if literal else x @ y.T
        u, v = np.linalg.norm(x, axis=1), np.linalg.norm(y, axis=1)
        check_primitive(
            lambda t, s, th, u, v: t.kappa_layer(s, th, u, v, 2.0, literal),
            [sig, RNG.standard_normal((4, 3)), u, v],
        )

    def test_kappa_layer_clipped_correlations(self):
        # Correlations pushed past +-1 are clipped, so only the scale path carries gradient.
        u, v = np.array([1.0, 2.0]), np.array([1.5, 0.5])
        sig = np.array([[1.8, -0.3], [0.4, -1.3]])
        check_primitive(
            lambda t, s, th, u, v: t.kappa_layer(s, th, u, v, 2.0, False),
            [sig, RNG.standard_normal((2, 2)), u, v],
        )

    def test_krr_solve(self):
        # The factorization reads one triangle, so perturb K symmetrically.
        a = RNG.standard_normal((4, 4))
        check_primitive(
            lambda t, k, y: t.krr_solve(t.symmetrize(k), y, 0.5), [a @ a.T, RNG.standard_normal((4, 2))]
        )

    def test_half_sq_error(self):
        target = RNG.standard_normal((3, 2))
        check_primitive(lambda t, p: t.half_sq_error(p, target), [RNG.standard_normal((3, 2))])

    def test_logistic_adjacency(self):
        p = RNG.standard_normal((4, 4))
        check_primitive(lambda t, p: t.logistic_adjacency(p), [p])


@pytest.fixture(scope="module")
def sbm40():
    return prepare_target(sbm_generate(SBMSpec(block_sizes=(20, 20), d=8, seed=3)))


def random_point(target, m, variant, seed=0, logit_shift=0.0):
    rng = np.random.default_rng(seed)
    p = rng.standard_normal((m, m))
    adj = 0.5 * (p + p.T) + logit_shift if variant == "XA" else None
    labels = np.arange(m) % target.num_classes
    return CondensedGraph(rng.standard_normal((m, target.operand.x.shape[1])), one_hot(labels, target.num_classes), adj)


class TestLossGradient:
    @pytest.mark.parametrize("kind", ["dot", "ntk", "sntk"])
    @pytest.mark.parametrize("mode", ["normalized", "paper_literal"])
    @pytest.mark.parametrize("variant", ["X", "XA"])
    def test_finite_difference_example(self, sbm40, kind, mode, variant):
        rep = grad_check(sbm40, random_point(sbm40, 4, variant), KernelConfig(kind, 1, 1, 2.0, mode), 1.0, variant)
        assert rep["max_rel_error"] < 1e-5, rep

    def test_directional_derivative(self, sbm40):
        # Negative logits keep the condensed graph sparse; a dense one smooths
        # the condensed nodes onto nearly parallel directions.
        cfg = KernelConfig("sntk", 2, 1)
        pt = random_point(sbm40, 4, "XA", seed=1, logit_shift=-3.0)
        assert correlation_margin(sbm40, pt, cfg, 1.0, "XA") > 1e-3
        rep = loss_and_grad(sbm40, pt, cfg, 1.0, "XA")
        rng = np.random.default_rng(7)
        dx, da = rng.standard_normal(pt.x_s.shape), rng.standard_normal(pt.adj_param.shape)
        da = 0.5 * (da + da.T)
        h = 1e-6

        def f(s):
            return loss_value(sbm40, pt.x_s + s * dx, pt.y_s, pt.adj_param + s * da, cfg, 1.0, "XA")

        fd = (f(h) - f(-h)) / (2 * h)
        np.testing.assert_allclose(np.sum(rep.grad_x * dx) + np.sum(rep.grad_adj * da), fd, rtol=1e-6)

    def test_bit_identical_reruns(self, sbm40):
        pt = random_point(sbm40, 4, "XA")
        a = loss_and_grad(sbm40, pt, KernelConfig(), 1.0, "XA")
        b = loss_and_grad(sbm40, pt, KernelConfig(), 1.0, "XA")
        np.testing.assert_array_equal(a.grad_x, b.grad_x)
        np.testing.assert_array_equal(a.grad_adj, b.grad_adj)
        assert a.loss == b.loss

    def test_stopping_coefficient_gradient_changes_result(self, sbm40):
        pt = random_point(sbm40, 4, "X")
        full = loss_and_grad(sbm40, pt, KernelConfig("sntk", 1, 1), 1.0)
        stopped = loss_and_grad(sbm40, pt, KernelConfig("sntk", 1, 1), 1.0, stop_coef_grad=True)
        assert full.loss == stopped.loss
        assert not np.allclose(full.grad_x, stopped.grad_x)

    def test_loss_rows(self, sbm40):
        pt = random_point(sbm40, 4, "X")
        cfg = KernelConfig("dot")
        assert loss_value(sbm40, pt.x_s, pt.y_s, None, cfg, 1.0, "X", "labeled") > loss_value(
            sbm40, pt.x_s, pt.y_s, None, cfg, 1.0
        )
        with pytest.raises(ConfigError):
            loss_value(sbm40, pt.x_s, pt.y_s, None, cfg, 1.0, "X", "all")

    def test_xa_needs_parameter(self, sbm40):
        with pytest.raises(ConfigError):
            loss_and_grad(sbm40, random_point(sbm40, 3, "X"), KernelConfig(), 1.0, "XA")

    def test_overflow_names_stage(self, sbm40):
        pt = random_point(sbm40, 3, "X")
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NumericalOverflowError) as err:
                loss_value(sbm40, pt.x_s * 1e200, pt.y_s, None, KernelConfig("dot"), 1.0)
        assert err.value.stage == "kernel"

    def test_dot_kernel_has_no_correlations(self, sbm40):
        assert correlation_margin(sbm40, random_point(sbm40, 3, "X"), KernelConfig("dot"), 1.0) == np.inf


class TestFiniteDifferences:
    def test_exact_on_quadratic(self):
        a = np.array([[2.0, 1.0], [1.0, 3.0]])
        x = np.array([0.5, -1.0])
        np.testing.assert_allclose(finite_diff(lambda v: 0.5 * v @ a @ v, x), a @ x, rtol=1e-9)

    def test_non_finite_raises(self):
        with pytest.raises(NumericalOverflowError):
            finite_diff(lambda v: np.inf, np.zeros(2))

    def test_relative_error_floor(self):
        err = relative_errors(np.array([1.0, 1e-9]), np.array([1.1, 3e-9]))
        np.testing.assert_allclose(err, [0.1, 2e-9])

    def test_check_finite(self):
        with pytest.raises(NumericalOverflowError):
            check_finite(np.array([np.nan]), "x")
