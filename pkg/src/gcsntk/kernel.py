"""Dot-product, NTK and structure-aware NTK (SNTK) kernel matrices.

All three kinds are expressed in terms of the primitives of
:class:`gcsntk.tape.Tape`, so the exact same code path computes plain kernel
values (tape disabled) and the traced forward pass used for gradients.

Correlation handling
--------------------
``normalized`` mode divides each entry by the geometric mean of the tracked
left/right self diagonals before the arc-cosine maps and multiplies the
covariance output back by it. After an SNTK aggregation every self diagonal
equals one, so the tracked diagonals are uniform scalars ``(alpha/2)**l``.
``paper_literal`` mode clamps entries to ``[-1, 1]`` and applies the maps
directly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DegenerateAggregationError, DimensionError
from .graph import Graph, Operand, TargetView, add_self_loops
from .tape import Tape, Var

KINDS = ("dot", "ntk", "sntk")
MODES = ("normalized", "paper_literal")


@dataclass(frozen=True)
class KernelConfig:
    kind: str = "sntk"
    K: int = 2
    L: int = 2
    alpha: float = 2.0
    mode: str = "normalized"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kernel kind must be one of {KINDS}, got {self.kind!r}")
        if self.mode not in MODES:
            raise ConfigError(f"kernel mode must be one of {MODES}, got {self.mode!r}")
        if int(self.K) < 1 or int(self.L) < 1:
            raise ConfigError("K and L must be >= 1")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "L", int(self.L))
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def literal(self):
        return self.mode == "paper_literal"


def as_operand(g):
    if isinstance(g, Operand):
        return g
    if isinstance(g, TargetView):
        return g.operand
    if isinstance(g, Graph):
        return Operand(g.features, add_self_loops(g.adjacency))
    raise TypeError(f"cannot use {type(g).__name__} as a kernel operand")


# -- elementwise maps -------------------------------------------------------


def kappa_pair(rho, alpha=1.0):
    """Arc-cosine maps ``(kdot, khat)`` at correlation ``rho`` (clamped to [-1, 1])."""
    rc = np.clip(np.asarray(rho, dtype=np.float64), -1.0, 1.0)
    coef = alpha / (2.0 * math.pi)
    ang = math.pi - np.arccos(rc)
    return coef * ang, coef * (ang + np.sqrt((1.0 - rc) * (1.0 + rc)))


def kappa_pair_derivs(rho, alpha=1.0, eps=1e-7):
    rb = np.clip(np.asarray(rho, dtype=np.float64), -1.0 + eps, 1.0 - eps)
    coef = alpha / (2.0 * math.pi)
    return coef / np.sqrt((1.0 - rb) * (1.0 + rb)), coef * np.sqrt((1.0 - rb) / (1.0 + rb))


def _layer_sigma(values, scale, alpha, literal):
    """Covariance update only, for entries stored as a flat array."""
    if literal:
        return kappa_pair(values, alpha)[1]
    return scale * kappa_pair(values / scale, alpha)[1]


# -- aggregation ------------------------------------------------------------


def dot_kernel(x, x2):
    x, x2 = np.asarray(x, dtype=np.float64), np.asarray(x2, dtype=np.float64)
    if x.shape[1] != x2.shape[1]:
        raise DimensionError(f"feature dimensions differ: {x.shape[1]} vs {x2.shape[1]}")
    return x @ x2.T


def aggregation_coefficients(sigma_self, adj_hat):
    """``c_i = (Â Σ Âᵀ)_ii ** -1/2`` for one graph's current self-kernel."""
    agg = np.asarray(adj_hat @ np.asarray(sigma_self) @ adj_hat.T)
    dg = np.diagonal(agg)
    if np.any(~(dg > 0)):
        bad = int(np.flatnonzero(~(dg > 0))[0])
        raise DegenerateAggregationError(f"node {bad} has a zero aggregated feature vector")
    return 1.0 / np.sqrt(dg)


def aggregate(sigma, adj_hat, adj_hat2, c, c2):
    """``diag(c) Â Σ Â'ᵀ diag(c')``; coefficients sit outside the neighborhood sums."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if adj_hat.shape[1] != sigma.shape[0] or adj_hat2.shape[1] != sigma.shape[1]:
        raise DimensionError("adjacency and kernel shapes do not conform")
    out = np.asarray(adj_hat @ sigma)
    out = np.asarray(adj_hat2 @ out.T).T
    return np.asarray(c)[:, None] * out * np.asarray(c2)[None, :]


def _pattern(a):
    p = sp.csr_matrix((np.ones(a.nnz), a.indices.copy(), a.indptr.copy()), shape=a.shape)
    p.sum_duplicates()
    p.sort_indices()
    return p


def _grow(p, b):
    """Sparsity pattern of ``b @ p @ b``."""
    return _pattern((b @ p @ b).tocsr())


def _pattern_rows(p):
    return np.repeat(np.arange(p.shape[0]), np.diff(p.indptr))


def _lookup(m, p):
    """Values of csr ``m`` at the positions of pattern ``p`` (zero where absent)."""
    m = m.tocsr()
    m.sum_duplicates()
    m.sort_indices()
    n = m.shape[1]
    mk = _pattern_rows(m).astype(np.int64) * n + m.indices
    pk = _pattern_rows(p).astype(np.int64) * n + p.indices
    pos = np.searchsorted(mk, pk)
    pos = np.minimum(pos, len(mk) - 1)
    hit = mk[pos] == pk
    return np.where(hit, m.data[pos], 0.0)


def _rowdots(h, rows, cols, chunk=1 << 16):
    out = np.empty(len(rows))
    for s in range(0, len(rows), chunk):
        r, c = rows[s : s + chunk], cols[s : s + chunk]
        out[s : s + chunk] = np.einsum("ij,ij->i", h[r], h[c])
    return out


def _check_positive(dg):
    if not np.all(dg > 0):
        bad = int(np.flatnonzero(~(dg > 0))[0])
        raise DegenerateAggregationError(f"node {bad} has a zero aggregated feature vector")


def operand_coefficients(op, cfg):
    """Per-round aggregation coefficients of a fixed graph, memoized on ``op``.

    Round ``r > 1`` needs the round ``r-1`` self-kernel only on pairs sharing a
    closed neighborhood, which in turn needs the earlier rounds on
    correspondingly wider hop patterns. Nothing of size ``n x n`` is formed.
    """
    key = ("coef", cfg.K, cfg.L, cfg.alpha, cfg.mode)
    if key in op.cache:
        return op.cache[key]
    adj, x = op.adj_hat, op.x
    h = np.asarray(adj @ x)
    dg = np.einsum("ij,ij->i", h, h)
    _check_positive(dg)
    coefs = [1.0 / np.sqrt(dg)]
    if cfg.K > 1:
        base = _pattern(adj)
        pats = {cfg.K - 1: _pattern((base @ base).tocsr())}
        for j in range(cfg.K - 2, 0, -1):
            pats[j] = _grow(pats[j + 1], base)
        hn = coefs[0][:, None] * h
        p = pats[1]
        rows = _pattern_rows(p)
        vals = _rowdots(hn, rows, p.indices)
        for r in range(2, cfg.K + 1):
            for l in range(cfg.L):
                vals = _layer_sigma(vals, (cfg.alpha / 2.0) ** l, cfg.alpha, cfg.literal)
            s = sp.csr_matrix((vals, p.indices, p.indptr), shape=p.shape)
            g = (adj @ s @ adj.T).tocsr()
            dg = g.diagonal()
            _check_positive(dg)
            c = 1.0 / np.sqrt(dg)
            coefs.append(c)
            if r < cfg.K:
                p = pats[r]
                rows = _pattern_rows(p)
                vals = _lookup(g, p) * c[rows] * c[p.indices]
    op.cache[key] = coefs
    return coefs


def operand_sq_norms(op):
    if "sqnorm" not in op.cache:
        nrm = np.sqrt(np.einsum("ij,ij->i", op.x, op.x))
        if np.any(nrm == 0):
            raise DegenerateAggregationError("feature row with zero norm")
        op.cache["sqnorm"] = nrm
    return op.cache["sqnorm"]


# -- traced pipelines -------------------------------------------------------


def _agg_left(t, adj, y):
    return y if adj is None else t.matmul(adj, y)


def _agg_right(t, y, adj):
    return y if adj is None else t.matmul_nt(y, adj)


def _layers(t, sig, theta, cfg, u=None, v=None, self_kernel=False, aggregated=False):
    """``cfg.L`` kappa layers. ``u``/``v``: per-row/column root diagonals at layer 0,
    or ``None`` for the unit diagonals that follow an aggregation.

    For a self-kernel the diagonal correlation is exactly 1 at every layer in
    normalized mode, and at the first layer after an aggregation in literal mode.
    """
    n, m = sig.shape
    for l in range(cfg.L):
        pin = self_kernel and (not cfg.literal or (aggregated and l == 0))
        f = math.sqrt((cfg.alpha / 2.0) ** l)
        if cfg.literal:
            ul, vl = None, None
        else:
            ul = np.full(n, f) if u is None else (t.mul_scalar(u, f) if isinstance(u, Var) else u * f)
            vl = np.full(m, f) if v is None else (t.mul_scalar(v, f) if isinstance(v, Var) else v * f)
        sig, theta = t.kappa_layer(sig, theta, ul, vl, cfg.alpha, cfg.literal, pin)
    return sig, theta


def trace_self(t, x, adj, cfg, stop_coef_grad=False):
    """Self-kernel of one graph. Returns ``(theta, coefs)``.

    For SNTK ``coefs`` lists the per-round aggregation coefficients (as
    tape values) computed from this graph's own evolving self-kernel.
    """
    sig = t.gram(x)
    if cfg.kind == "dot":
        return sig, None
    theta = sig
    if cfg.kind == "ntk":
        nrm = t.row_norms(x)
        return _layers(t, sig, theta, cfg, nrm, nrm, self_kernel=True)[1], None
    coefs = []
    for _ in range(cfg.K):
        g = _agg_right(t, _agg_left(t, adj, sig), adj)
        c = t.rsqrt_diag(g)
        if stop_coef_grad:
            c = t.stop_gradient(c)
        coefs.append(c)
        sig = t.symmetrize(t.scale(g, c, c))
        theta = t.symmetrize(t.scale(_agg_right(t, _agg_left(t, adj, theta), adj), c, c))
        sig, theta = _layers(t, sig, theta, cfg, self_kernel=True, aggregated=True)
    return theta, coefs


def trace_cross(t, x1, adj1, c1, x2, adj2, c2, cfg, norms1=None, norms2=None):
    """Cross kernel between two graphs given each side's per-round coefficients
    (SNTK) or root self-diagonals (NTK)."""
    sig = t.matmul_nt(x1, x2)
    if cfg.kind == "dot":
        return sig
    theta = sig
    if cfg.kind == "ntk":
        return _layers(t, sig, theta, cfg, norms1, norms2)[1]
    for k in range(cfg.K):
        sig = t.scale(_agg_right(t, _agg_left(t, adj1, sig), adj2), c1[k], c2[k])
        theta = t.scale(_agg_right(t, _agg_left(t, adj1, theta), adj2), c1[k], c2[k])
        sig, theta = _layers(t, sig, theta, cfg)
    return theta


def trace_kernels(t, target, x_s, adj_s, cfg, stop_coef_grad=False):
    """``(K_TS, K_SS)`` from one pass that shares the condensed-side state.

    ``adj_s`` is the dense self-looped condensed adjacency, or ``None`` for
    the identity (features-only variant).
    """
    op = as_operand(target)
    xv = x_s.value if isinstance(x_s, Var) else x_s
    if op.x.shape[1] != xv.shape[1]:
        raise DimensionError(f"feature dimensions differ: {op.x.shape[1]} vs {xv.shape[1]}")
    k_ss, coefs = trace_self(t, x_s, adj_s, cfg, stop_coef_grad)
    if cfg.kind == "sntk":
        k_ts = trace_cross(t, op.x, op.adj_hat, operand_coefficients(op, cfg), x_s, adj_s, coefs, cfg)
    elif cfg.kind == "ntk":
        k_ts = trace_cross(t, op.x, None, None, x_s, None, None, cfg, operand_sq_norms(op), t.row_norms(x_s))
    else:
        k_ts = trace_cross(t, op.x, None, None, x_s, None, None, cfg)
    return k_ts, k_ss


# -- public evaluation functions --------------------------------------------


def ntk(x, x2=None, L=1, alpha=2.0, mode="normalized"):
    """Feature-only NTK between the rows of ``x`` and ``x2`` (self-kernel if omitted)."""
    cfg = KernelConfig(kind="ntk", K=1, L=L, alpha=alpha, mode=mode)
    t = Tape(enabled=False)
    x = np.asarray(x, dtype=np.float64)
    if x2 is None:
        return trace_self(t, x, None, cfg)[0].value
    x2 = np.asarray(x2, dtype=np.float64)
    if x.shape[1] != x2.shape[1]:
        raise DimensionError(f"feature dimensions differ: {x.shape[1]} vs {x2.shape[1]}")
    o1, o2 = Operand(x, None), Operand(x2, None)
    return trace_cross(t, x, None, None, x2, None, None, cfg, operand_sq_norms(o1), operand_sq_norms(o2)).value


def sntk(g, g2=None, config=None):
    """SNTK matrix between graphs ``g`` and ``g2`` (self-kernel when ``g2`` is None).

    Graphs may be :class:`Graph`, :class:`TargetView` or :class:`Operand`.
    """
    cfg = config or KernelConfig()
    if cfg.kind != "sntk":
        cfg = KernelConfig("sntk", cfg.K, cfg.L, cfg.alpha, cfg.mode)
    t = Tape(enabled=False)
    o1 = as_operand(g)
    if g2 is None:
        return trace_self(t, o1.x, o1.adj_hat, cfg)[0].value
    o2 = as_operand(g2)
    if o1.x.shape[1] != o2.x.shape[1]:
        raise DimensionError(f"feature dimensions differ: {o1.x.shape[1]} vs {o2.x.shape[1]}")
    return trace_cross(
        t, o1.x, o1.adj_hat, operand_coefficients(o1, cfg), o2.x, o2.adj_hat, operand_coefficients(o2, cfg), cfg
    ).value


def kernel_matrix(g, g2=None, config=None):
    """Dispatch on ``config.kind``; dot and NTK ignore the adjacency."""
    cfg = config or KernelConfig()
    if cfg.kind == "sntk":
        return sntk(g, g2, cfg)
    o1 = as_operand(g)
    x2 = None if g2 is None else as_operand(g2).x
    if cfg.kind == "ntk":
        return ntk(o1.x, x2, cfg.L, cfg.alpha, cfg.mode)
    return dot_kernel(o1.x, o1.x if x2 is None else x2)


def cross_and_self(target, x_s, adj_s, config):
    """Forward-only ``(K_TS, K_SS)`` for a condensed graph with materialized adjacency."""
    t = Tape(enabled=False)
    kts, kss = trace_kernels(t, target, np.asarray(x_s, dtype=np.float64), adj_s, config)
    return kts.value, kss.value
