"""Pure numpy implementation of one arc-cosine layer and its adjoint.

This is the fallback used when the compiled ``_kappa_ext`` module is not
available. Both implementations follow the same arithmetic order so that
their outputs agree to a few ulps.
"""
import math

import numpy as np

_TWO_PI = 2.0 * math.pi


def layer_forward(sig, theta, u, v, alpha, literal, unit_diag=False):
    """Apply one layer: ``theta' = theta * kdot + sig'``.

    ``u`` and ``v`` are the square roots of the tracked left/right self
    diagonals; they are ignored when ``literal`` is true. ``unit_diag`` pins
    the diagonal correlation of a self-kernel to exactly 1. Returns
    ``(sig_out, theta_out, rho)`` where ``rho`` is the unclamped correlation.
    """
    coef = alpha / _TWO_PI
    if literal:
        rho = np.array(sig, dtype=np.float64, copy=True)
    else:
        scale = np.multiply.outer(u, v)
        rho = sig / scale
    if unit_diag:
        np.fill_diagonal(rho, 1.0)
    rc = np.clip(rho, -1.0, 1.0)
    ang = math.pi - np.arccos(rc)
    kdot = coef * ang
    khat = coef * (ang + np.sqrt((1.0 - rc) * (1.0 + rc)))
    sig_out = khat if literal else scale * khat
    theta_out = theta * kdot + sig_out
    return sig_out, theta_out, rho


def layer_backward(g_sig_out, g_theta_out, rho, theta, u, v, alpha, literal, eps, unit_diag=False):
    """Adjoint of :func:`layer_forward`.

    Returns ``(g_sig, g_theta, g_u, g_v)``. ``g_u``/``g_v`` are zero vectors in
    literal mode. The derivative of the kappa maps is evaluated at ``rho``
    clamped to ``[-1 + eps, 1 - eps]``.
    """
    coef = alpha / _TWO_PI
    rc = np.clip(rho, -1.0, 1.0)
    rb = np.clip(rho, -1.0 + eps, 1.0 - eps)
    ang = math.pi - np.arccos(rc)
    kdot = coef * ang
    khat = coef * (ang + np.sqrt((1.0 - rc) * (1.0 + rc)))
    dkdot = coef / np.sqrt((1.0 - rb) * (1.0 + rb))
    dkhat = coef * np.sqrt((1.0 - rb) / (1.0 + rb))

    g_s = g_theta_out if g_sig_out is None else g_sig_out + g_theta_out
    g_theta = g_theta_out * kdot
    if literal:
        g_rho = g_s * dkhat + g_theta_out * theta * dkdot
        g_rho = np.where(np.abs(rho) <= 1.0, g_rho, 0.0)
        if unit_diag:
            np.fill_diagonal(g_rho, 0.0)
        n, m = rho.shape
        return g_rho, g_theta, np.zeros(n), np.zeros(m)
    scale = np.multiply.outer(u, v)
    g_rho = g_s * scale * dkhat + g_theta_out * theta * dkdot
    g_rho = np.where(np.abs(rho) <= 1.0, g_rho, 0.0)
    if unit_diag:
        np.fill_diagonal(g_rho, 0.0)
    g_sig = g_rho / scale
    g_scale = g_s * khat - g_rho * rho / scale
    return g_sig, g_theta, g_scale @ v, g_scale.T @ u
