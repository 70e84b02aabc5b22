"""Minimal reverse-mode tape over the fixed set of primitives used by the
condensation pipeline.

Every op computes its value eagerly. When at least one input requires a
gradient (and the tape is enabled) the op appends a node holding a closure
that maps output adjoints to input adjoints. :meth:`Tape.backward` walks the
nodes in reverse order of recording, which is a valid reverse topological
order because nodes are only ever appended after their inputs exist.
"""
from __future__ import annotations

import numpy as np

from . import _backend
from .errors import DegenerateAggregationError, NumericalOverflowError

BACKWARD_EPS = 1e-7


class Var:
    __slots__ = ("value", "requires_grad", "_id")

    def __init__(self, value, requires_grad, _id):
        self.value = value
        self.requires_grad = requires_grad
        self._id = _id

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(id={self._id}, shape={getattr(self.value, 'shape', ())}, grad={self.requires_grad})"


def _val(x):
    return x.value if isinstance(x, Var) else x


def _needs(x):
    return isinstance(x, Var) and x.requires_grad


class _Node:
    __slots__ = ("name", "inputs", "outputs", "backward")

    def __init__(self, name, inputs, outputs, backward):
        self.name = name
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


class Tape:
    """Records primitive ops for reverse-mode differentiation.

    With ``watch_correlations`` set, every kappa layer also logs the smallest
    distance ``|1 - |rho||`` in :attr:`correlation_margins`. Pinned diagonals
    and entries at exactly ``|rho| = 1`` (saturated by an upstream clip, hence
    locally constant) are left out.
    """

    def __init__(self, enabled=True, watch_correlations=False):
        self.enabled = enabled
        self.nodes: list[_Node] = []
        self._count = 0
        self.correlation_margins = [] if watch_correlations else None

    # -- bookkeeping -------------------------------------------------------

    def _new(self, value, requires_grad):
        self._count += 1
        return Var(value, requires_grad, self._count)

    def leaf(self, value):
        """A learnable input."""
        return self._new(np.array(value, dtype=np.float64, copy=True), self.enabled)

    def const(self, value):
        return self._new(value, False)

    def _emit(self, name, inputs, values, backward):
        track = self.enabled and any(_needs(x) for x in inputs)
        outs = [self._new(v, track) for v in values]
        if track:
            self.nodes.append(_Node(name, inputs, outs, backward))
        return outs

    def op_names(self):
        return [node.name for node in self.nodes]

    def backward(self, output, seed=None, wrt=()):
        """Accumulate adjoints from ``output`` and return them for ``wrt``.

        Leaves without a path to the output receive a zero adjoint.
        """
        adj = {output._id: np.ones_like(output.value) if seed is None else np.asarray(seed, dtype=np.float64)}
        for node in reversed(self.nodes):
            g_out = [adj.pop(o._id, None) for o in node.outputs]
            if all(g is None for g in g_out):
                continue
            g_in = node.backward(g_out)
            for x, g in zip(node.inputs, g_in):
                if g is None or not _needs(x):
                    continue
                if x._id in adj:
                    adj[x._id] = adj[x._id] + g
                else:
                    adj[x._id] = g
        return [adj.get(w._id, np.zeros_like(w.value)) for w in wrt]

    # -- primitives --------------------------------------------------------

    def matmul(self, a, b):
        """``a @ b``; either side may be a constant sparse matrix."""
        av, bv = _val(a), _val(b)
        out = np.asarray(av @ bv)

        def backward(g):
            (g,) = g
            ga = np.asarray(g @ bv.T) if _needs(a) else None
            gb = np.asarray(av.T @ g) if _needs(b) else None
            return ga, gb

        return self._emit("matmul", (a, b), (out,), backward)[0]

    def matmul_nt(self, a, b):
        """``a @ b.T``."""
        av, bv = _val(a), _val(b)
        out = np.asarray(av @ bv.T)

        def backward(g):
            (g,) = g
            ga = np.asarray(g @ bv) if _needs(a) else None
            gb = np.asarray(g.T @ av) if _needs(b) else None
            return ga, gb

        return self._emit("matmul_nt", (a, b), (out,), backward)[0]

    def gram(self, x):
        """``x @ x.T``, exactly symmetric."""
        xv = _val(x)
        out = xv @ xv.T
        out = 0.5 * (out + out.T)

        def backward(g):
            (g,) = g
            return ((g + g.T) @ xv,)

        return self._emit("gram", (x,), (out,), backward)[0]

    def scale(self, y, r=None, c=None):
        """``diag(r) @ y @ diag(c)``; ``None`` means no scaling on that side."""
        yv, rv, cv = _val(y), _val(r), _val(c)
        out = yv
        if rv is not None:
            out = rv[:, None] * out
        if cv is not None:
            out = out * cv[None, :]

        def backward(g):
            (g,) = g
            gy = gr = gc = None
            if _needs(y):
                gy = g
                if rv is not None:
                    gy = rv[:, None] * gy
                if cv is not None:
                    gy = gy * cv[None, :]
            if _needs(r):
                t = g * yv
                if cv is not None:
                    t = t * cv[None, :]
                gr = t.sum(axis=1)
            if _needs(c):
                t = g * yv
                if rv is not None:
                    t = rv[:, None] * t
                gc = t.sum(axis=0)
            return gy, gr, gc

        return self._emit("scale", (y, r, c), (out,), backward)[0]

    def rsqrt_diag(self, m):
        """Aggregation coefficients ``diag(m) ** -1/2``."""
        mv = _val(m)
        dg = np.diagonal(mv).copy()
        if not np.all(np.isfinite(dg)):
            raise NumericalOverflowError("aggregation")
        if np.any(dg <= 0):
            bad = int(np.flatnonzero(dg <= 0)[0])
            raise DegenerateAggregationError(f"aggregated self-kernel entry {bad} is {dg[bad]:.3e}")
        out = 1.0 / np.sqrt(dg)

        def backward(g):
            (g,) = g
            gm = np.zeros_like(mv)
            np.fill_diagonal(gm, -0.5 * g * out / dg)
            return (gm,)

        return self._emit("rsqrt_diag", (m,), (out,), backward)[0]

    def stop_gradient(self, x):
        return self.const(_val(x))

    def symmetrize(self, y):
        yv = _val(y)
        out = 0.5 * (yv + yv.T)

        def backward(g):
            (g,) = g
            return (0.5 * (g + g.T),)

        return self._emit("symmetrize", (y,), (out,), backward)[0]

    def row_norms(self, x):
        xv = _val(x)
        out = np.sqrt(np.einsum("ij,ij->i", xv, xv))
        if np.any(out == 0):
            raise DegenerateAggregationError("feature row with zero norm")

        def backward(g):
            (g,) = g
            return ((g / out)[:, None] * xv,)

        return self._emit("row_norms", (x,), (out,), backward)[0]

    def mul_scalar(self, x, s):
        out = _val(x) * s

        def backward(g):
            (g,) = g
            return (g * s,)

        return self._emit("mul_scalar", (x,), (out,), backward)[0]

    def take_rows(self, x, rows):
        xv = _val(x)
        out = xv[rows]

        def backward(g):
            (g,) = g
            gx = np.zeros_like(xv)
            np.add.at(gx, rows, g)
            return (gx,)

        return self._emit("take_rows", (x,), (out,), backward)[0]

    def kappa_layer(self, sig, theta, u, v, alpha, literal, unit_diag=False):
        """One arc-cosine layer; returns ``(sigma_next, theta_next)``.

        ``u``/``v`` are square roots of the left/right self diagonals.
        ``unit_diag`` marks a self-kernel whose diagonal correlation is
        identically 1; it is pinned there so rounding cannot move it onto the
        steep side of ``arccos``.
        """
        sv, tv, uv, vv = _val(sig), _val(theta), _val(u), _val(v)
        s_out, t_out, rho = _backend.layer_forward(sv, tv, uv, vv, alpha, literal, unit_diag)
        if self.correlation_margins is not None:
            r = np.abs(rho)
            if unit_diag:
                r = r.copy()
                np.fill_diagonal(r, 0.0)
            gap = np.abs(1.0 - r[r != 1.0])
            self.correlation_margins.append(float(gap.min()) if gap.size else float("inf"))

        def backward(g):
            g_s, g_t = g
            if g_t is None:
                g_t = np.zeros_like(t_out)
            g_sig, g_theta, g_u, g_v = _backend.layer_backward(
                g_s, g_t, rho, tv, uv, vv, alpha, literal, BACKWARD_EPS, unit_diag
            )
            return g_sig, g_theta, (g_u if _needs(u) else None), (g_v if _needs(v) else None)

        s_var, t_var = self._emit("kappa_layer", (sig, theta, u, v), (s_out, t_out), backward)
        return s_var, t_var

    def krr_solve(self, k, y, lam):
        """``W = (K + lam I)^-1 Y`` through a symmetric factorization."""
        from .krr import solve_regularized_factor

        kv, yv = _val(k), _val(y)
        w, fac = solve_regularized_factor(kv, lam, yv)

        def backward(g):
            (g,) = g
            z = fac.solve(g)
            gk = -z @ w.T if _needs(k) else None
            gy = z if _needs(y) else None
            return gk, gy

        return self._emit("krr_solve", (k, y), (w,), backward)[0]

    def half_sq_error(self, pred, target):
        """``0.5 * ||target - pred||_F^2`` as a 0-d array."""
        pv, tv = _val(pred), _val(target)
        r = pv - tv
        out = np.asarray(0.5 * np.sum(r * r))

        def backward(g):
            (g,) = g
            return (g * r, None)

        return self._emit("half_sq_error", (pred, target), (out,), backward)[0]

    def logistic_adjacency(self, p):
        """Symmetric weights ``sigmoid((P + P^T)/2)`` off the diagonal, ones on it."""
        pv = _val(p)
        s = 0.5 * (pv + pv.T)
        a = 0.5 * (1.0 + np.tanh(0.5 * s))
        np.fill_diagonal(a, 1.0)

        def backward(g):
            (g,) = g
            gs = g * a * (1.0 - a)
            np.fill_diagonal(gs, 0.0)
            return (0.5 * (gs + gs.T),)

        return self._emit("logistic_adjacency", (p,), (a,), backward)[0]


def check_finite(x, stage):
    if not np.all(np.isfinite(_val(x))):
        raise NumericalOverflowError(stage)
    return x

