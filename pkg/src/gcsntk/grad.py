"""Reverse-mode gradients of the condensation loss and a finite-difference oracle."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalOverflowError
from .graph import CondensedGraph, TargetView
from .kernel import trace_kernels
from .tape import Tape, check_finite

VARIANTS = ("X", "XA")


@dataclass(frozen=True)
class GradReport:
    loss: float
    grad_x: np.ndarray
    grad_adj: np.ndarray | None
    max_abs_grad: float


def loss_rows(target: TargetView, which="train"):
    """Target rows entering the loss: training rows, or training plus validation."""
    if which == "train":
        return target.splits.train
    if which == "labeled":
        return np.concatenate([target.splits.train, target.splits.val])
    raise ConfigError(f"loss_rows must be 'train' or 'labeled', got {which!r}")


def _forward(t, target, x_s, y_s, adj_param, cfg, lam, variant, rows, stop_coef_grad):
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    xs = t.leaf(x_s)
    p = adj = None
    if variant == "XA":
        if adj_param is None:
            raise ConfigError("variant XA requires an adjacency parameter")
        p = t.leaf(adj_param)
        adj = t.logistic_adjacency(p)
    kts, kss = trace_kernels(t, target, xs, adj, cfg, stop_coef_grad)
    check_finite(kts, "kernel")
    check_finite(kss, "kernel")
    w = check_finite(t.krr_solve(kss, t.const(y_s), lam), "solve")
    pred = t.matmul(t.take_rows(kts, rows), w)
    loss = check_finite(t.half_sq_error(pred, target.targets(rows)), "loss")
    return loss, xs, p


def loss_value(target, x_s, y_s, adj_param, cfg, lam, variant="X", which_rows="train", stop_coef_grad=False):
    """Forward-only loss for raw arrays (used by the finite-difference oracle)."""
    t = Tape(enabled=False)
    loss, _, _ = _forward(
        t, target, x_s, y_s, adj_param, cfg, lam, variant, loss_rows(target, which_rows), stop_coef_grad
    )
    return float(loss.value)


def loss_and_grad(target, condensed: CondensedGraph, cfg, lam, variant="X", which_rows="train", stop_coef_grad=False):
    """Loss and its gradient with respect to the condensed features (and adjacency logits)."""
    t = Tape()
    loss, xs, p = _forward(
        t,
        target,
        condensed.x_s,
        condensed.y_s,
        condensed.adj_param,
        cfg,
        lam,
        variant,
        loss_rows(target, which_rows),
        stop_coef_grad,
    )
    wrt = [xs] if p is None else [xs, p]
    grads = t.backward(loss, wrt=wrt)
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericalOverflowError("backward")
    gx = grads[0]
    ga = grads[1] if p is not None else None
    mx = float(max(np.abs(g).max() for g in grads))
    return GradReport(float(loss.value), gx, ga, mx)


def correlation_margin(target, condensed: CondensedGraph, cfg, lam, variant="X", which_rows="train"):
    """Smallest ``1 - |rho|`` over the free correlations entering any kappa layer.

    Near zero the loss is not smooth: the kappa maps have a square-root
    singularity at ``|rho| = 1`` and ``paper_literal`` mode clips beyond it, so a
    finite-difference stencil straddling that point is not a valid oracle.
    """
    t = Tape(enabled=False, watch_correlations=True)
    _forward(
        t,
        target,
        condensed.x_s,
        condensed.y_s,
        condensed.adj_param,
        cfg,
        lam,
        variant,
        loss_rows(target, which_rows),
        False,
    )
    return min(t.correlation_margins, default=float("inf"))


def finite_diff(f, x, step=1e-5):
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every coordinate."""
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalOverflowError("finite_diff", f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return out


def relative_errors(analytic, numeric, floor=1e-8, relative_floor=0.0):
    """Elementwise relative error; entries with ``|analytic| < floor`` are compared absolutely.

    ``relative_floor`` raises the denominator to at least that fraction of the
    largest ``|analytic|`` entry, so components far below the block's scale
    are judged against it rather than against their own (noise-level) size.
    """
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    diff = np.abs(analytic - numeric)
    mag = np.abs(analytic)
    if relative_floor > 0 and mag.size:
        mag = np.maximum(mag, relative_floor * mag.max())
    return np.where(mag < floor, diff, diff / np.maximum(mag, floor))


def grad_check(target, condensed, cfg, lam, variant="X", step=1e-5, which_rows="train", relative_floor=0.0):
    """Compare analytic gradients against central differences, per parameter block."""
    rep = loss_and_grad(target, condensed, cfg, lam, variant, which_rows)
    adj = condensed.adj_param
    fx = finite_diff(
        lambda x: loss_value(target, x, condensed.y_s, adj, cfg, lam, variant, which_rows), condensed.x_s, step
    )
    pairs = {"x": (rep.grad_x, fx)}
    if variant == "XA":
        fa = finite_diff(
            lambda a: loss_value(target, condensed.x_s, condensed.y_s, a, cfg, lam, variant, which_rows), adj, step
        )
        pairs["adj"] = (rep.grad_adj, fa)
    summary = {}
    for k, (g, f) in pairs.items():
        err = relative_errors(g, f, relative_floor=relative_floor)
        summary[k] = {"max": float(err.max()), "mean": float(err.mean())}
        if relative_floor > 0:
            summary[k]["max_unfloored"] = float(relative_errors(g, f).max())
    return {
        "loss": rep.loss,
        "max_rel_error": max(s["max"] for s in summary.values()),
        "blocks": summary,
        "max_rel_error_unfloored": max(s.get("max_unfloored", s["max"]) for s in summary.values()),
        "relative_floor": relative_floor,
        "correlation_margin": correlation_margin(target, condensed, cfg, lam, variant, which_rows),
    }
