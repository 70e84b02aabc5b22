"""Closed-form kernel ridge regression, the condensation loss and accuracy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import DimensionError, SingularSystemError, UndefinedAccuracyError

JITTER = 1e-10


@dataclass(frozen=True)
class _Factor:
    cho: tuple
    jitter: float

    def solve(self, b):
        return sla.cho_solve(self.cho, b, check_finite=False)


@dataclass(frozen=True)
class KRRSolution:
    """``weights = (K_SS + lam I)^-1 Y_S`` plus the factorization that produced it."""

    weights: np.ndarray
    lam: float
    factor: _Factor

    def predict(self, k_ts):
        return np.asarray(k_ts) @ self.weights


def _smallest_pivot(a):
    """Pivot at which an unpivoted Cholesky of ``a`` breaks down (or the smallest one)."""
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    smallest = np.inf
    for j in range(n):
        piv = a[j, j]
        smallest = min(smallest, piv)
        if not piv > 0:
            return piv
        col = a[j + 1 :, j] / np.sqrt(piv)
        a[j + 1 :, j + 1 :] -= np.outer(col, col)
    return smallest


def _factorize(k, lam):
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise DimensionError(f"kernel must be square, got {k.shape}")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    m = k.shape[0]
    reg = k + lam * np.eye(m)
    try:
        return _Factor(sla.cho_factor(reg, lower=True, check_finite=False), 0.0)
    except sla.LinAlgError:
        pass
    jitter = JITTER * max(np.trace(k), 0.0) / m
    reg_j = reg + jitter * np.eye(m)
    try:
        return _Factor(sla.cho_factor(reg_j, lower=True, check_finite=False), jitter)
    except sla.LinAlgError:
        raise SingularSystemError(_smallest_pivot(reg_j)) from None


def solve_regularized_factor(k, lam, b):
    fac = _factorize(k, lam)
    return fac.solve(np.asarray(b, dtype=np.float64)), fac


def solve_regularized(k, lam, b):
    """``(K + lam I)^-1 B``; retries once with a small diagonal jitter."""
    return solve_regularized_factor(k, lam, b)[0]


def fit(k_ss, y_s, lam):
    w, fac = solve_regularized_factor(k_ss, lam, y_s)
    return KRRSolution(w, float(lam), fac)


def fit_predict(k_ss, k_ts, y_s, lam):
    k_ts = np.asarray(k_ts, dtype=np.float64)
    if k_ts.shape[1] != np.shape(k_ss)[0]:
        raise DimensionError(f"K_TS has {k_ts.shape[1]} columns but K_SS is {np.shape(k_ss)}")
    return fit(k_ss, y_s, lam).predict(k_ts)


def mse_loss(pred, y_t):
    """``0.5 * ||Y_T - pred||_F^2``."""
    pred = np.asarray(pred, dtype=np.float64)
    y_t = np.asarray(y_t, dtype=np.float64)
    if pred.shape != y_t.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {y_t.shape}")
    r = pred - y_t
    return 0.5 * float(np.sum(r * r))


def accuracy(pred, labels):
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    pred = np.asarray(pred)
    labels = np.asarray(labels).reshape(-1)
    if pred.shape[0] == 0:
        raise UndefinedAccuracyError("accuracy of an empty prediction set is undefined")
    if pred.shape[0] != labels.shape[0]:
        raise DimensionError("prediction and label counts differ")
    return float(np.mean(pred.argmax(axis=1) == labels))
