"""Pure numpy implementations of the hot kernels.

This module is the fallback used when the compiled ``_kernels`` extension is
not importable (or when ``SEKF_TRANSFER_PURE_PYTHON`` is set).  Both modules
expose the same functions with the same signatures and return layouts.

Parameter layout for MLPs: for each weight layer in order, the weight matrix
(shape ``out x in``, C order) followed by the bias vector (``out``).
"""
import numpy as np

from .errors import DivergenceError


# overflow is detected explicitly and reported as DivergenceError
_quiet = np.errstate(over="ignore", invalid="ignore")


def _layers(widths, params):
    layers = []
    off = 0
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        W = params[off:off + n_in * n_out].reshape(n_out, n_in)
        off += n_in * n_out
        b = params[off:off + n_out]
        off += n_out
        layers.append((W, b))
    return layers


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def mlp_eval_jac(widths, params, X, want_jp=True, want_jx=False):
    """Evaluate a sigmoid MLP on a batch and optionally its Jacobians.

    Parameters
    ----------
    widths : sequence of int
    params : ndarray, shape (n_params,)
    X : ndarray, shape (N, widths[0])
    want_jp, want_jx : bool
        Whether to return the parameter / input Jacobian.

    Returns
    -------
    Y : ndarray, shape (N, n_out)
    Jp : ndarray, shape (N, n_out, n_params) or None
    Jx : ndarray, shape (N, n_out, n_in) or None
    """
    widths = [int(w) for w in widths]
    layers = _layers(widths, params)
    N = X.shape[0]
    n_out = widths[-1]
    acts = [X]
    a = X
    for W, b in layers[:-1]:
        a = _sigmoid(a @ W.T + b)
        acts.append(a)
    W, b = layers[-1]
    Y = a @ W.T + b
    if not (want_jp or want_jx):
        return Y, None, None

    n_p = params.shape[0]
    Jp = np.empty((N, n_out, n_p)) if want_jp else None
    G = np.broadcast_to(np.eye(n_out), (N, n_out, n_out))
    offsets = np.cumsum([0] + [(i + 1) * o for i, o in zip(widths[:-1], widths[1:])])
    for layer in range(len(layers) - 1, -1, -1):
        W, _ = layers[layer]
        n_o, n_i = W.shape
        a_prev = acts[layer]
        if want_jp:
            off = offsets[layer]
            Jp[:, :, off:off + n_o * n_i] = (
                G[:, :, :, None] * a_prev[:, None, None, :]
            ).reshape(N, n_out, n_o * n_i)
            Jp[:, :, off + n_o * n_i:off + n_o * n_i + n_o] = G
        if layer > 0 or want_jx:
            G = G @ W
            if layer > 0:
                G = G * (a_prev * (1.0 - a_prev))[:, None, :]
    Jx = np.array(G) if want_jx else None
    return Y, Jp, Jx


@_quiet
def node_integrate(widths, params, x0, u, h, substeps, want_sens=False):
    """Fixed-step RK4 roll-out of ``dx/dt = f(x, u)`` with an MLP vector field.

    ``u[:, k]`` is held constant over sample interval ``k``; ``h`` is the RK4
    step in model time units and each sample spans ``substeps`` steps.  With
    ``want_sens`` the forward sensitivities ``dx/dparams`` of the discrete map
    are integrated alongside the state.

    Returns
    -------
    traj : ndarray, shape (N, H, n_x)
    sens : ndarray, shape (N, H, n_x, n_params) or None
    """
    N, n_x = x0.shape
    H = u.shape[1]
    n_p = params.shape[0]
    x = np.array(x0, dtype=float)
    traj = np.empty((N, H, n_x))
    S = np.zeros((N, n_x, n_p)) if want_sens else None
    sens = np.empty((N, H, n_x, n_p)) if want_sens else None

    def field(xs, uk):
        Y, Jp, Jx = mlp_eval_jac(
            widths, params, np.concatenate([xs, uk], axis=1),
            want_jp=want_sens, want_jx=want_sens)
        if want_sens:
            return Y, Jx[:, :, :n_x], Jp
        return Y, None, None

    step = 0
    for k in range(H):
        uk = u[:, k, :]
        for _ in range(substeps):
            k1, A1, B1 = field(x, uk)
            k2, A2, B2 = field(x + 0.5 * h * k1, uk)
            k3, A3, B3 = field(x + 0.5 * h * k2, uk)
            k4, A4, B4 = field(x + h * k3, uk)
            if want_sens:
                d1 = A1 @ S + B1
                d2 = A2 @ (S + 0.5 * h * d1) + B2
                d3 = A3 @ (S + 0.5 * h * d2) + B3
                d4 = A4 @ (S + h * d3) + B4
                S = S + (h / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(x)):
                raise DivergenceError(f"non-finite state at integration step {step}", step=step)
            step += 1
        traj[:, k, :] = x
        if want_sens:
            sens[:, k] = S
    return traj, sens


@_quiet
def spring_rk4(m, c, k, u, x0, v0, h, n_steps, every):
    """RK4 for ``m x'' + c x' + k x = u`` over a batch of initial conditions.

    Returns position and velocity sampled every ``every`` steps, including the
    initial state: arrays of shape ``(N, n_steps // every + 1)``.
    """
    x = np.array(x0, dtype=float)
    v = np.array(v0, dtype=float)
    n_samples = n_steps // every + 1
    X = np.empty((x.shape[0], n_samples))
    V = np.empty_like(X)
    X[:, 0] = x
    V[:, 0] = v

    def acc(x, v):
        return (u - c * v - k * x) / m

    for i in range(1, n_steps + 1):
        a1 = acc(x, v)
        x2, v2 = x + 0.5 * h * v, v + 0.5 * h * a1
        a2 = acc(x2, v2)
        x3, v3 = x + 0.5 * h * v2, v + 0.5 * h * a2
        a3 = acc(x3, v3)
        x4, v4 = x + h * v3, v + h * a3
        a4 = acc(x4, v4)
        x = x + (h / 6.0) * (v + 2.0 * v2 + 2.0 * v3 + v4)
        v = v + (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise DivergenceError(f"non-finite spring state at step {i}", step=i)
        if i % every == 0:
            X[:, i // every] = x
            V[:, i // every] = v
    return X, V


def tclab_rhs(p, T1, T2, Q1, Q2):
    """Time derivatives of the two heater temperatures (K/s)."""
    m, cp, U, A, As, eps, sigma, a1, a2, Tinf = p
    qc = U * As * (T2 - T1)
    qr = eps * sigma * As * (T2 ** 4 - T1 ** 4)
    d1 = U * A * (Tinf - T1) + eps * sigma * A * (Tinf ** 4 - T1 ** 4) + qc + qr + a1 * Q1
    d2 = U * A * (Tinf - T2) + eps * sigma * A * (Tinf ** 4 - T2 ** 4) - qc - qr + a2 * Q2
    return d1 / (m * cp), d2 / (m * cp)


@_quiet
def tclab_rk4(p, T0, Q, h, substeps):
    """RK4 for the two-heater energy balances with zero-order-held powers.

    ``Q[i]`` is applied over sample interval ``i`` which spans ``substeps``
    steps of length ``h``.  Returns temperatures at every sample boundary,
    shape ``(len(Q) + 1, 2)``.
    """
    p = [float(v) for v in p]
    n = Q.shape[0]
    out = np.empty((n + 1, 2))
    T1, T2 = float(T0[0]), float(T0[1])
    out[0] = T1, T2
    for i in range(n):
        q1, q2 = float(Q[i, 0]), float(Q[i, 1])
        for _ in range(substeps):
            k11, k12 = tclab_rhs(p, T1, T2, q1, q2)
            k21, k22 = tclab_rhs(p, T1 + 0.5 * h * k11, T2 + 0.5 * h * k12, q1, q2)
            k31, k32 = tclab_rhs(p, T1 + 0.5 * h * k21, T2 + 0.5 * h * k22, q1, q2)
            k41, k42 = tclab_rhs(p, T1 + h * k31, T2 + h * k32, q1, q2)
            T1 = T1 + (h / 6.0) * (k11 + 2.0 * k21 + 2.0 * k31 + k41)
            T2 = T2 + (h / 6.0) * (k12 + 2.0 * k22 + 2.0 * k32 + k42)
        if not (np.isfinite(T1) and np.isfinite(T2)):
            raise DivergenceError(f"non-finite TCLab state at sample {i}", step=i)
        out[i + 1] = T1, T2
    return out
