# Fused arc-cosine layer kernels. Mirrors gcsntk._kappa_py element for element.
import numpy as np
cimport numpy as cnp
from libc.math cimport acos, sqrt, fabs, M_PI

cnp.import_array()


cdef inline double _clip(double x, double lo, double hi) nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


def layer_forward(sig, theta, u, v, double alpha, bint literal, bint unit_diag=False):
    cdef const double[:, ::1] s = np.ascontiguousarray(sig, dtype=np.float64)
    cdef const double[:, ::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef Py_ssize_t n = s.shape[0]
    cdef Py_ssize_t m = s.shape[1]
    cdef const double[::1] uu
    cdef const double[::1] vv
    if literal:
        uu = np.ones(n)
        vv = np.ones(m)
    else:
        uu = np.ascontiguousarray(u, dtype=np.float64)
        vv = np.ascontiguousarray(v, dtype=np.float64)
    sig_out_a = np.empty((n, m))
    theta_out_a = np.empty((n, m))
    rho_a = np.empty((n, m))
    cdef double[:, ::1] so = sig_out_a
    cdef double[:, ::1] to = theta_out_a
    cdef double[:, ::1] ro = rho_a
    cdef double coef = alpha / (2.0 * M_PI)
    cdef double sc, rho, rc, ang, kdot, khat, out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            for j in range(m):
                if literal:
                    rho = s[i, j]
                else:
                    sc = uu[i] * vv[j]
                    rho = s[i, j] / sc
                if unit_diag and i == j:
                    rho = 1.0
                rc = _clip(rho, -1.0, 1.0)
                ang = M_PI - acos(rc)
                kdot = coef * ang
                khat = coef * (ang + sqrt((1.0 - rc) * (1.0 + rc)))
                if literal:
                    out = khat
                else:
                    out = sc * khat
                so[i, j] = out
                to[i, j] = th[i, j] * kdot + out
                ro[i, j] = rho
    return sig_out_a, theta_out_a, rho_a


def layer_backward(g_sig_out, g_theta_out, rho, theta, u, v,
                   double alpha, bint literal, double eps, bint unit_diag=False):
    cdef const double[:, ::1] gt = np.ascontiguousarray(g_theta_out, dtype=np.float64)
    cdef const double[:, ::1] r = np.ascontiguousarray(rho, dtype=np.float64)
    cdef const double[:, ::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef Py_ssize_t n = r.shape[0]
    cdef Py_ssize_t m = r.shape[1]
    cdef bint has_gs = g_sig_out is not None
    cdef const double[:, ::1] gs
    if has_gs:
        gs = np.ascontiguousarray(g_sig_out, dtype=np.float64)
    else:
        gs = np.zeros((1, 1))
    cdef const double[::1] uu
    cdef const double[::1] vv
    if literal:
        uu = np.ones(n)
        vv = np.ones(m)
    else:
        uu = np.ascontiguousarray(u, dtype=np.float64)
        vv = np.ascontiguousarray(v, dtype=np.float64)
    g_sig_a = np.empty((n, m))
    g_theta_a = np.empty((n, m))
    g_u_a = np.zeros(n)
    g_v_a = np.zeros(m)
    cdef double[:, ::1] gsig = g_sig_a
    cdef double[:, ::1] gth = g_theta_a
    cdef double[::1] gu = g_u_a
    cdef double[::1] gv = g_v_a
    cdef double coef = alpha / (2.0 * M_PI)
    cdef double rr, rc, rb, ang, kdot, khat, dkdot, dkhat, gsum, grho, sc, gsc
    cdef Py_ssize_t i, j
    cdef bint pinned
    with nogil:
        for i in range(n):
            for j in range(m):
                rr = r[i, j]
                rc = _clip(rr, -1.0, 1.0)
                rb = _clip(rr, -1.0 + eps, 1.0 - eps)
                ang = M_PI - acos(rc)
                kdot = coef * ang
                dkdot = coef / sqrt((1.0 - rb) * (1.0 + rb))
                dkhat = coef * sqrt((1.0 - rb) / (1.0 + rb))
                if has_gs:
                    gsum = gs[i, j] + gt[i, j]
                else:
                    gsum = gt[i, j]
                gth[i, j] = gt[i, j] * kdot
                pinned = unit_diag and i == j
                if literal:
                    grho = gsum * dkhat + gt[i, j] * th[i, j] * dkdot
                    if fabs(rr) <= 1.0 and not pinned:
                        gsig[i, j] = grho
                    else:
                        gsig[i, j] = 0.0
                else:
                    khat = coef * (ang + sqrt((1.0 - rc) * (1.0 + rc)))
                    sc = uu[i] * vv[j]
                    if pinned or fabs(rr) > 1.0:
                        grho = 0.0
                    else:
                        grho = gsum * sc * dkhat + gt[i, j] * th[i, j] * dkdot
                    gsig[i, j] = grho / sc
                    gsc = gsum * khat - grho * rr / sc
                    gu[i] += gsc * vv[j]
                    gv[j] += gsc * uu[i]
    return g_sig_a, g_theta_a, g_u_a, g_v_a
