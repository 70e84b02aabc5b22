import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from gcsntk import _kappa_py
from gcsntk.errors import DegenerateAggregationError, DimensionError
from gcsntk.graph import Operand, add_self_loops
from gcsntk.kernel import (
    KernelConfig,
    aggregate,
    aggregation_coefficients,
    cross_and_self,
    kappa_pair,
    kappa_pair_derivs,
    kernel_matrix,
    ntk,
    operand_coefficients,
    sntk,
    trace_self,
)
from gcsntk.tape import Tape

from oracles import _self_history, ntk_oracle, sntk_oracle

try:
    from gcsntk import _kappa_ext
except ImportError:
    _kappa_ext = None

MODES = ("normalized", "paper_literal")


def random_graph(rng, n, p=0.4):
    """Random graph whose closed neighborhoods are pairwise distinct.

    Nodes with identical neighborhoods have correlation exactly one, where
    rounding is amplified by the square-root singularity of arccos.
    """
    while True:
        a = np.triu((rng.random((n, n)) < p).astype(float), 1)
        a = a + a.T
        closed = a + np.eye(n)
        if np.unique(closed, axis=0).shape[0] == n:
            return a


def operand(x, a):
    return Operand(np.asarray(x, dtype=float), add_self_loops(sp.csr_matrix(a)))


def oracle_tolerance(op, cfg):
    """Stacked layers contract correlations towards one; once a pair sits
    within ~1e-12 of it, rounding is amplified to about sqrt(eps)."""
    t = Tape(enabled=False, watch_correlations=True)
    trace_self(t, op.x, op.adj_hat, cfg)
    return 1e-11 if min(t.correlation_margins) > 1e-12 else 1e-7


class TestKappa:
    @pytest.mark.parametrize(
        "rho, expected",
        [(1.0, (0.5, 0.5)), (-1.0, (0.0, 0.0)), (0.0, (0.25, 0.25 + 1.0 / (2.0 * math.pi)))],
    )
    def test_anchor_values(self, rho, expected):
        np.testing.assert_allclose(kappa_pair(rho, 1.0), expected, rtol=0, atol=1e-12)

    def test_alpha_scales_both(self):
        np.testing.assert_allclose(kappa_pair(0.3, 2.0), 2.0 * np.asarray(kappa_pair(0.3, 1.0)), rtol=1e-15)

    def test_monotone_on_grid(self):
        kd, kh = kappa_pair(np.linspace(-1.0, 1.0, 2001), 1.0)
        assert np.all(np.diff(kd) >= 0) and np.all(np.diff(kh) >= 0)

    @given(st.floats(-0.99, 0.99))
    @settings(max_examples=50, deadline=None)
    def test_derivatives_match_finite_differences(self, rho):
        h = 1e-6
        fd = (np.asarray(kappa_pair(rho + h, 1.5)) - np.asarray(kappa_pair(rho - h, 1.5))) / (2 * h)
        np.testing.assert_allclose(kappa_pair_derivs(rho, 1.5), fd, rtol=1e-6)


class TestNTK:
    def test_unit_input_one_layer(self):
        np.testing.assert_allclose(ntk(np.array([[0.6, 0.8]]), L=1, alpha=2.0), [[2.0]], rtol=1e-15)

    @pytest.mark.parametrize("mode", MODES)
    @pytest.mark.parametrize("L", [1, 2, 3])
    def test_matches_oracle(self, mode, L):
        rng = np.random.default_rng(L)
        x1, x2 = 0.6 * rng.standard_normal((6, 4)), 0.6 * rng.standard_normal((5, 4))
        literal = mode == "paper_literal"
        np.testing.assert_allclose(ntk(x1, x2, L, 2.0, mode), ntk_oracle(x1, x2, L, 2.0, literal), atol=1e-13)
        np.testing.assert_allclose(ntk(x1, None, L, 2.0, mode), ntk_oracle(x1, None, L, 2.0, literal), atol=1e-13)

    def test_normalized_is_degree_two_homogeneous(self):
        x = np.random.default_rng(0).standard_normal((5, 3))
        np.testing.assert_allclose(ntk(3.0 * x, L=2), 9.0 * ntk(x, L=2), rtol=1e-13)


class TestSNTK:
    def test_single_node_hand_value(self):
        k = sntk(operand([[0.3, -1.2]], np.zeros((1, 1))), config=KernelConfig("sntk", 1, 1, 1.0))
        np.testing.assert_allclose(k, [[1.0]], rtol=0, atol=1e-15)

    @pytest.mark.parametrize("mode", MODES)
    @pytest.mark.parametrize("K,L", [(1, 1), (1, 2), (2, 1), (2, 2), (3, 1)])
    @pytest.mark.parametrize("alpha", [1.0, 2.0])
    def test_matches_oracle(self, mode, K, L, alpha):
        rng = np.random.default_rng(100 * K + 10 * L + int(alpha))
        a1, a2 = random_graph(rng, 7), random_graph(rng, 5, 0.5)
        x1, x2 = rng.standard_normal((7, 3)), rng.standard_normal((5, 3))
        cfg = KernelConfig("sntk", K, L, alpha, mode)
        literal = mode == "paper_literal"
        o1, o2 = operand(x1, a1), operand(x2, a2)
        tol = max(oracle_tolerance(o1, cfg), oracle_tolerance(o2, cfg))
        want = sntk_oracle(x1, a1 + np.eye(7), x2, a2 + np.eye(5), K, L, alpha, literal)
        np.testing.assert_allclose(sntk(o1, o2, cfg), want, rtol=tol, atol=tol)
        want_self = sntk_oracle(x1, a1 + np.eye(7), None, None, K, L, alpha, literal)
        np.testing.assert_allclose(sntk(o1, None, cfg), want_self, rtol=tol, atol=tol)

    @pytest.mark.parametrize("K", [1, 2, 3, 4])
    def test_sparse_coefficients_match_dense_recursion(self, K):
        rng = np.random.default_rng(K)
        a = random_graph(rng, 12, 0.25)
        x = rng.standard_normal((12, 4))
        op = operand(x, a)
        cfg = KernelConfig("sntk", K, 2)
        dense, _, _ = _self_history(x.tolist(), (a + np.eye(12)).tolist(), K, 2, 2.0, False)
        for got, want in zip(operand_coefficients(op, cfg), dense):
            np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_aggregation_gives_unit_diagonal(self):
        rng = np.random.default_rng(3)
        a = add_self_loops(sp.csr_matrix(random_graph(rng, 9))).toarray()
        x = rng.standard_normal((9, 4))
        g = x @ x.T
        c = aggregation_coefficients(g, a)
        np.testing.assert_allclose(np.diag(aggregate(g, a, a, c, c)), np.ones(9), rtol=1e-14)

    @pytest.mark.parametrize("mode", MODES)
    def test_self_kernel_exactly_symmetric(self, mode):
        rng = np.random.default_rng(5)
        k = sntk(operand(rng.standard_normal((10, 3)), random_graph(rng, 10)), config=KernelConfig(mode=mode))
        np.testing.assert_array_equal(k, k.T)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_first_round_kernels_are_psd(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 40))
        op = operand(rng.standard_normal((n, 5)), random_graph(rng, n, 0.2))
        for kind in ("dot", "ntk", "sntk"):
            k = kernel_matrix(op, None, KernelConfig(kind, 1, 2))
            assert np.linalg.eigvalsh(k).min() >= -1e-8 * np.trace(k)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(11)
        a, x = random_graph(rng, 8), rng.standard_normal((8, 3))
        perm = rng.permutation(8)
        cfg = KernelConfig("sntk", 2, 2)
        k = sntk(operand(x, a), config=cfg)
        kp = sntk(operand(x[perm], a[np.ix_(perm, perm)]), config=cfg)
        np.testing.assert_allclose(kp, k[np.ix_(perm, perm)], rtol=1e-11)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        o1 = operand(rng.standard_normal((9, 3)), random_graph(rng, 9))
        o2 = operand(rng.standard_normal((4, 3)), random_graph(rng, 4, 0.6))
        cfg = KernelConfig("sntk", 2, 2)
        np.testing.assert_array_equal(sntk(o1, o2, cfg), sntk(o1, o2, cfg))


class TestIdentityAdjacency:
    @pytest.mark.parametrize("L", [1, 2])
    def test_one_round_equals_ntk_on_unit_rows(self, L):
        x = np.random.default_rng(L).standard_normal((7, 4))
        unit = x / np.linalg.norm(x, axis=1, keepdims=True)
        k = sntk(operand(x, np.zeros((7, 7))), config=KernelConfig("sntk", 1, L))
        np.testing.assert_allclose(k, ntk(unit, L=L), rtol=0, atol=1e-12)

    def test_rounds_compose_layers(self):
        # Aggregation by the identity is a no-op and alpha=2 keeps unit diagonals,
        # so K rounds of L layers act like one stack of K*L layers.
        x = np.random.default_rng(9).standard_normal((6, 3))
        unit = x / np.linalg.norm(x, axis=1, keepdims=True)
        k = sntk(operand(x, np.zeros((6, 6))), config=KernelConfig("sntk", 2, 2))
        np.testing.assert_allclose(k, ntk(unit, L=4), rtol=0, atol=1e-12)


class TestTracedKernels:
    def test_cross_and_self_agree_with_public_kernels(self):
        rng = np.random.default_rng(4)
        target = operand(rng.standard_normal((10, 3)), random_graph(rng, 10))
        x_s = rng.standard_normal((3, 3))
        cfg = KernelConfig("sntk", 2, 2)
        k_ts, k_ss = cross_and_self(target, x_s, None, cfg)
        cond = Operand(x_s, sp.identity(3, format="csr"))
        np.testing.assert_allclose(k_ts, sntk(target, cond, cfg), rtol=1e-13)
        np.testing.assert_allclose(k_ss, sntk(cond, None, cfg), rtol=1e-13)

    def test_dense_condensed_adjacency(self):
        rng = np.random.default_rng(8)
        a_t = random_graph(rng, 8)
        x_t, x_s = rng.standard_normal((8, 3)), rng.standard_normal((4, 3))
        w = rng.uniform(0.1, 0.9, (4, 4))
        w = 0.5 * (w + w.T)
        np.fill_diagonal(w, 1.0)
        cfg = KernelConfig("sntk", 2, 1)
        k_ts, k_ss = cross_and_self(operand(x_t, a_t), x_s, w, cfg)
        np.testing.assert_allclose(k_ts, sntk_oracle(x_t, a_t + np.eye(8), x_s, w, 2, 1), rtol=1e-11)
        np.testing.assert_allclose(k_ss, sntk_oracle(x_s, w, None, None, 2, 1), rtol=1e-11)

    def test_zero_feature_row_is_degenerate(self):
        with pytest.raises(DegenerateAggregationError):
            sntk(operand([[0.0, 0.0], [1.0, 0.0]], np.zeros((2, 2))))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            sntk(operand(np.ones((2, 2)), np.zeros((2, 2))), operand(np.ones((2, 3)), np.zeros((2, 2))))


@pytest.mark.skipif(_kappa_ext is None, reason="compiled extension not built")
class TestBackends:
    @pytest.mark.parametrize("literal", [False, True])
    @pytest.mark.parametrize("pin", [False, True])
    def test_forward_and_adjoint_agree(self, literal, pin):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((6, 4))
        u = np.linalg.norm(x, axis=1)
        sig = x @ x.T
        sig = 0.5 * (sig + sig.T) if literal is False else np.clip(sig / 4.0, -1.5, 1.5)
        theta = rng.standard_normal((6, 6))
        outs_py = _kappa_py.layer_forward(sig, theta, u, u, 2.0, literal, pin)
        outs_c = _kappa_ext.layer_forward(sig, theta, u, u, 2.0, literal, pin)
        for a, b in zip(outs_py, outs_c):
            np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-15)
        gs, gt = rng.standard_normal((6, 6)), rng.standard_normal((6, 6))
        rho = outs_py[2]
        back_py = _kappa_py.layer_backward(gs, gt, rho, theta, u, u, 2.0, literal, 1e-7, pin)
        back_c = _kappa_ext.layer_backward(gs, gt, rho, theta, u, u, 2.0, literal, 1e-7, pin)
        for a, b in zip(back_py, back_c):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
