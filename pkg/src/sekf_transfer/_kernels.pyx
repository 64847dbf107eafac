# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pykernels``; same API, same layouts."""
import numpy as np
cimport numpy as cnp
from libc.math cimport tanh, isfinite
from libc.stdlib cimport malloc, free
from libc.string cimport memcpy, memset

from .errors import DivergenceError

cnp.import_array()


cdef struct Net:
    int n_layers
    Py_ssize_t n_params
    Py_ssize_t *widths
    Py_ssize_t *w_off
    Py_ssize_t *a_off
    Py_ssize_t max_width
    Py_ssize_t act_size


cdef int _net_init(Net *net, widths) except -1:
    cdef Py_ssize_t L = len(widths) - 1
    cdef Py_ssize_t i, off = 0, aoff = 0
    net.n_layers = <int>L
    net.widths = <Py_ssize_t *>malloc((L + 1) * sizeof(Py_ssize_t))
    net.w_off = <Py_ssize_t *>malloc(L * sizeof(Py_ssize_t))
    net.a_off = <Py_ssize_t *>malloc((L + 1) * sizeof(Py_ssize_t))
    if net.widths == NULL or net.w_off == NULL or net.a_off == NULL:
        _net_free(net)
        raise MemoryError()
    net.max_width = 0
    for i in range(L + 1):
        net.widths[i] = <Py_ssize_t>int(widths[i])
        net.a_off[i] = aoff
        aoff += net.widths[i]
        if net.widths[i] > net.max_width:
            net.max_width = net.widths[i]
    net.act_size = aoff
    for i in range(L):
        net.w_off[i] = off
        off += (net.widths[i] + 1) * net.widths[i + 1]
    net.n_params = off
    return 0


cdef void _net_free(Net *net) noexcept:
    free(net.widths)
    free(net.w_off)
    free(net.a_off)
    net.widths = NULL
    net.w_off = NULL
    net.a_off = NULL


cdef inline double _sigmoid(double z) noexcept nogil:
    return 0.5 * (1.0 + tanh(0.5 * z))


cdef void _mlp(const Net *net, const double *p, const double *x, double *act,
               double *G, double *G2, double *y, double *jp, double *jx,
               bint want_jp, bint want_jx) noexcept nogil:
    """Forward pass plus reverse accumulation of every output row.

    ``jp`` is row-major (n_out x n_params), ``jx`` row-major (n_out x n_in).
    ``G``/``G2`` are scratch buffers of n_out * max_width doubles.
    """
    cdef int L = net.n_layers
    cdef Py_ssize_t l, i, j, o, n_in, n_o, n_out = net.widths[L]
    cdef Py_ssize_t n_p = net.n_params, woff, boff, cw
    cdef const double *W
    cdef const double *a_prev
    cdef double *a
    cdef double s, g
    cdef double *tmp
    cdef double *row

    memcpy(act, x, net.widths[0] * sizeof(double))
    for l in range(L):
        n_in = net.widths[l]
        n_o = net.widths[l + 1]
        W = p + net.w_off[l]
        boff = net.w_off[l] + n_in * n_o
        a_prev = act + net.a_off[l]
        a = act + net.a_off[l + 1]
        for i in range(n_o):
            s = p[boff + i]
            for j in range(n_in):
                s += W[i * n_in + j] * a_prev[j]
            if l < L - 1:
                a[i] = _sigmoid(s)
            else:
                a[i] = s
    memcpy(y, act + net.a_off[L], n_out * sizeof(double))
    if not (want_jp or want_jx):
        return

    memset(G, 0, n_out * n_out * sizeof(double))
    for o in range(n_out):
        G[o * n_out + o] = 1.0
    cw = n_out
    for l in range(L - 1, -1, -1):
        n_in = net.widths[l]
        n_o = net.widths[l + 1]
        woff = net.w_off[l]
        boff = woff + n_in * n_o
        W = p + woff
        a_prev = act + net.a_off[l]
        if want_jp:
            for o in range(n_out):
                row = jp + o * n_p
                for i in range(n_o):
                    g = G[o * cw + i]
                    for j in range(n_in):
                        row[woff + i * n_in + j] = g * a_prev[j]
                    row[boff + i] = g
        if l > 0 or want_jx:
            for o in range(n_out):
                for j in range(n_in):
                    s = 0.0
                    for i in range(n_o):
                        s += G[o * cw + i] * W[i * n_in + j]
                    if l > 0:
                        s *= a_prev[j] * (1.0 - a_prev[j])
                    G2[o * n_in + j] = s
            tmp = G
            G = G2
            G2 = tmp
            cw = n_in
    if want_jx:
        memcpy(jx, G, n_out * net.widths[0] * sizeof(double))


def mlp_eval_jac(widths, const double[::1] params, const double[:, ::1] X,
                 bint want_jp=True, bint want_jx=False):
    """See ``_pykernels.mlp_eval_jac``."""
    cdef Net net
    _net_init(&net, widths)
    cdef Py_ssize_t N = X.shape[0], n, n_out = net.widths[net.n_layers]
    cdef Py_ssize_t n_in = net.widths[0], n_p = net.n_params
    if params.shape[0] != n_p or X.shape[1] != n_in:
        _net_free(&net)
        raise ValueError("shape mismatch between widths, params and inputs")
    Y = np.empty((N, n_out))
    Jp = np.empty((N, n_out, n_p)) if want_jp else np.empty((1, 1, 1))
    Jx = np.empty((N, n_out, n_in)) if want_jx else np.empty((1, 1, 1))
    cdef double[:, ::1] Yv = Y
    cdef double[:, :, ::1] Jpv = Jp
    cdef double[:, :, ::1] Jxv = Jx
    cdef double *act = <double *>malloc(net.act_size * sizeof(double))
    cdef double *G = <double *>malloc(n_out * net.max_width * sizeof(double))
    cdef double *G2 = <double *>malloc(n_out * net.max_width * sizeof(double))
    try:
        if act == NULL or G == NULL or G2 == NULL:
            raise MemoryError()
        with nogil:
            for n in range(N):
                _mlp(&net, &params[0], &X[n, 0], act, G, G2, &Yv[n, 0],
                     &Jpv[n if want_jp else 0, 0, 0], &Jxv[n if want_jx else 0, 0, 0],
                     want_jp, want_jx)
    finally:
        free(act)
        free(G)
        free(G2)
        _net_free(&net)
    return Y, (Jp if want_jp else None), (Jx if want_jx else None)


cdef void _axpy(Py_ssize_t n, double a, const double *x, const double *y, double *out) noexcept nogil:
    # out = y + a * x
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = y[i] + a * x[i]


cdef void _sens_deriv(Py_ssize_t n_x, Py_ssize_t n_in, Py_ssize_t n_p, const double *jx,
                      const double *jp, const double *S, double *dS) noexcept nogil:
    # dS = A S + B with A = jx[:, :n_x] and B = jp
    cdef Py_ssize_t r, c, q
    cdef double a
    memcpy(dS, jp, n_x * n_p * sizeof(double))
    for r in range(n_x):
        for c in range(n_x):
            a = jx[r * n_in + c]
            if a != 0.0:
                for q in range(n_p):
                    dS[r * n_p + q] += a * S[c * n_p + q]


def node_integrate(widths, const double[::1] params, const double[:, ::1] x0,
                   const double[:, :, ::1] u, double h, int substeps, bint want_sens=False):
    """See ``_pykernels.node_integrate``."""
    cdef Net net
    _net_init(&net, widths)
    cdef Py_ssize_t N = x0.shape[0], n_x = x0.shape[1], H = u.shape[1], n_u = u.shape[2]
    cdef Py_ssize_t n_in = net.widths[0], n_p = net.n_params, n_out = net.widths[net.n_layers]
    if n_in != n_x + n_u or n_out != n_x or params.shape[0] != n_p:
        _net_free(&net)
        raise ValueError("network widths do not match state/input dimensions")
    traj = np.empty((N, H, n_x))
    sens = np.empty((N, H, n_x, n_p)) if want_sens else np.empty((1, 1, 1, 1))
    cdef double[:, :, ::1] tv = traj
    cdef double[:, :, :, ::1] sv = sens
    cdef Py_ssize_t ns = n_x * n_p if want_sens else 1
    cdef double *act = <double *>malloc(net.act_size * sizeof(double))
    cdef double *G = <double *>malloc(n_out * net.max_width * sizeof(double))
    cdef double *G2 = <double *>malloc(n_out * net.max_width * sizeof(double))
    cdef double *z = <double *>malloc(n_in * sizeof(double))
    cdef double *x = <double *>malloc(n_x * sizeof(double))
    cdef double *kk = <double *>malloc(4 * n_x * sizeof(double))
    cdef double *jx = <double *>malloc(n_x * n_in * sizeof(double))
    cdef double *jp = <double *>malloc(ns * sizeof(double))
    cdef double *S = <double *>malloc(ns * sizeof(double))
    cdef double *St = <double *>malloc(ns * sizeof(double))
    cdef double *dS = <double *>malloc(ns * sizeof(double))
    cdef double *acc = <double *>malloc(ns * sizeof(double))
    cdef Py_ssize_t n, k, s, st, i, bad_step = -1
    cdef double cst[4]
    cdef double wts[4]
    cst[0] = 0.0; cst[1] = 0.5 * h; cst[2] = 0.5 * h; cst[3] = h
    wts[0] = 1.0; wts[1] = 2.0; wts[2] = 2.0; wts[3] = 1.0
    try:
        if (act == NULL or G == NULL or G2 == NULL or z == NULL or x == NULL or kk == NULL
                or jx == NULL or jp == NULL or S == NULL or St == NULL or dS == NULL or acc == NULL):
            raise MemoryError()
        with nogil:
            for n in range(N):
                for i in range(n_x):
                    x[i] = x0[n, i]
                if want_sens:
                    memset(S, 0, ns * sizeof(double))
                for k in range(H):
                    for i in range(n_u):
                        z[n_x + i] = u[n, k, i]
                    for s in range(substeps):
                        if want_sens:
                            memset(acc, 0, ns * sizeof(double))
                        for st in range(4):
                            # stage input: x + c_st * k_{st-1}
                            for i in range(n_x):
                                z[i] = x[i] + (cst[st] * kk[(st - 1) * n_x + i] if st > 0 else 0.0)
                            _mlp(&net, &params[0], z, act, G, G2, kk + st * n_x, jp, jx,
                                 want_sens, want_sens)
                            if want_sens:
                                if st == 0:
                                    _sens_deriv(n_x, n_in, n_p, jx, jp, S, dS)
                                else:
                                    _axpy(ns, cst[st], dS, S, St)
                                    _sens_deriv(n_x, n_in, n_p, jx, jp, St, dS)
                                _axpy(ns, wts[st], dS, acc, acc)
                        for i in range(n_x):
                            x[i] += (h / 6.0) * (kk[i] + 2.0 * kk[n_x + i]
                                                 + 2.0 * kk[2 * n_x + i] + kk[3 * n_x + i])
                            if not isfinite(x[i]):
                                bad_step = k * substeps + s
                        if bad_step >= 0:
                            break
                        if want_sens:
                            _axpy(ns, h / 6.0, acc, S, S)
                    if bad_step >= 0:
                        break
                    for i in range(n_x):
                        tv[n, k, i] = x[i]
                    if want_sens:
                        memcpy(&sv[n, k, 0, 0], S, ns * sizeof(double))
                if bad_step >= 0:
                    break
    finally:
        free(act); free(G); free(G2); free(z); free(x); free(kk); free(jx)
        free(jp); free(S); free(St); free(dS); free(acc)
        _net_free(&net)
    if bad_step >= 0:
        raise DivergenceError(f"non-finite state at integration step {bad_step}", step=bad_step)
    return traj, (sens if want_sens else None)


cdef inline double _spring_acc(double m, double c, double k, double u, double x, double v) noexcept nogil:
    return (u - c * v - k * x) / m


def spring_rk4(double m, double c, double k, double u, x0, v0, double h,
               Py_ssize_t n_steps, Py_ssize_t every):
    """See ``_pykernels.spring_rk4``."""
    cdef double[::1] xs = np.ascontiguousarray(x0, dtype=np.float64)
    cdef double[::1] vs = np.ascontiguousarray(v0, dtype=np.float64)
    cdef Py_ssize_t N = xs.shape[0], n_samples = n_steps // every + 1, n, i
    X = np.empty((N, n_samples))
    V = np.empty((N, n_samples))
    cdef double[:, ::1] Xv = X
    cdef double[:, ::1] Vv = V
    cdef double x, v, a1, a2, a3, a4, x2, v2, x3, v3, x4, v4
    cdef Py_ssize_t bad = -1
    with nogil:
        for n in range(N):
            x = xs[n]
            v = vs[n]
            Xv[n, 0] = x
            Vv[n, 0] = v
            for i in range(1, n_steps + 1):
                a1 = _spring_acc(m, c, k, u, x, v)
                x2 = x + 0.5 * h * v
                v2 = v + 0.5 * h * a1
                a2 = _spring_acc(m, c, k, u, x2, v2)
                x3 = x + 0.5 * h * v2
                v3 = v + 0.5 * h * a2
                a3 = _spring_acc(m, c, k, u, x3, v3)
                x4 = x + h * v3
                v4 = v + h * a3
                a4 = _spring_acc(m, c, k, u, x4, v4)
                x = x + (h / 6.0) * (v + 2.0 * v2 + 2.0 * v3 + v4)
                v = v + (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
                if not (isfinite(x) and isfinite(v)):
                    bad = i
                    break
                if i % every == 0:
                    Xv[n, i // every] = x
                    Vv[n, i // every] = v
            if bad >= 0:
                break
    if bad >= 0:
        raise DivergenceError(f"non-finite spring state at step {bad}", step=bad)
    return X, V


cdef struct TclabP:
    double m, cp, U, A, As, eps, sigma, a1, a2, Tinf


cdef inline void _tclab_rhs(const TclabP *p, double T1, double T2, double Q1, double Q2,
                            double *d1, double *d2) noexcept nogil:
    cdef double qc = p.U * p.As * (T2 - T1)
    cdef double qr = p.eps * p.sigma * p.As * (T2 * T2 * T2 * T2 - T1 * T1 * T1 * T1)
    cdef double Ti4 = p.Tinf * p.Tinf * p.Tinf * p.Tinf
    cdef double mcp = p.m * p.cp
    d1[0] = (p.U * p.A * (p.Tinf - T1) + p.eps * p.sigma * p.A * (Ti4 - T1 * T1 * T1 * T1)
             + qc + qr + p.a1 * Q1) / mcp
    d2[0] = (p.U * p.A * (p.Tinf - T2) + p.eps * p.sigma * p.A * (Ti4 - T2 * T2 * T2 * T2)
             - qc - qr + p.a2 * Q2) / mcp


def tclab_rk4(p, T0, const double[:, ::1] Q, double h, int substeps):
    """See ``_pykernels.tclab_rk4``."""
    cdef TclabP tp
    tp.m, tp.cp, tp.U, tp.A, tp.As, tp.eps, tp.sigma, tp.a1, tp.a2, tp.Tinf = [float(v) for v in p]
    cdef Py_ssize_t n = Q.shape[0], i, s, bad = -1
    out = np.empty((n + 1, 2))
    cdef double[:, ::1] ov = out
    cdef double T1 = float(T0[0]), T2 = float(T0[1]), q1, q2
    cdef double k11, k12, k21, k22, k31, k32, k41, k42
    ov[0, 0] = T1
    ov[0, 1] = T2
    with nogil:
        for i in range(n):
            q1 = Q[i, 0]
            q2 = Q[i, 1]
            for s in range(substeps):
                _tclab_rhs(&tp, T1, T2, q1, q2, &k11, &k12)
                _tclab_rhs(&tp, T1 + 0.5 * h * k11, T2 + 0.5 * h * k12, q1, q2, &k21, &k22)
                _tclab_rhs(&tp, T1 + 0.5 * h * k21, T2 + 0.5 * h * k22, q1, q2, &k31, &k32)
                _tclab_rhs(&tp, T1 + h * k31, T2 + h * k32, q1, q2, &k41, &k42)
                T1 = T1 + (h / 6.0) * (k11 + 2.0 * k21 + 2.0 * k31 + k41)
                T2 = T2 + (h / 6.0) * (k12 + 2.0 * k22 + 2.0 * k32 + k42)
            if not (isfinite(T1) and isfinite(T2)):
                bad = i
                break
            ov[i + 1, 0] = T1
            ov[i + 1, 1] = T2
    if bad >= 0:
        raise DivergenceError(f"non-finite TCLab state at sample {bad}", step=bad)
    return out
