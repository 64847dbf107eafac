"""Neural-ODE horizon predictor.

The vector field ``dx/dt = f(x, u; params)`` is an MLP from :mod:`nn_core`.
Trajectories come from classical fixed-step RK4 with each input held constant
over its sample interval.  Parameter sensitivities are those of the discrete
RK4 map (differentiate-the-discretization), so they are exact derivatives of
what the loss actually evaluates.
"""
from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from .errors import ContractError, DivergenceError
from .nn_core import NetworkSpec, _check_params, vjp_params


@dataclass(frozen=True)
class NodeSpec:
    """Neural-ODE predictor configuration.

    ``time_scale`` is the number of seconds per model time unit: the network
    output is the state derivative per ``time_scale`` seconds.  Slow plants
    (time constants of minutes) train better with ``time_scale`` > 1.
    """

    core: NetworkSpec
    n_x: int
    dt_sample: float = 10.0
    substeps: int = 4
    horizon: int = 60
    time_scale: float = 1.0

    def __post_init__(self):
        if self.core.n_out != self.n_x:
            raise ContractError("core output width must equal the state dimension")
        if self.core.n_in < self.n_x:
            raise ContractError("core input width must be n_x + n_u")
        if self.substeps < 1 or self.dt_sample <= 0 or self.horizon < 1 or self.time_scale <= 0:
            raise ContractError("need substeps >= 1, dt_sample > 0, horizon >= 1, time_scale > 0")

    @property
    def n_u(self):
        return self.core.n_in - self.n_x

    @property
    def n_params(self):
        return self.core.n_params

    @property
    def step(self):
        """RK4 step length in model time units."""
        return self.dt_sample / self.substeps / self.time_scale

    def to_dict(self):
        return {"core": self.core.to_dict(), "n_x": self.n_x, "dt_sample": self.dt_sample,
                "substeps": self.substeps, "horizon": self.horizon, "time_scale": self.time_scale}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["core"] = NetworkSpec.from_dict(d["core"])
        return cls(**d)


def _batch(spec, x0, u_seq):
    x0 = np.asarray(x0, dtype=float)
    u = np.asarray(u_seq, dtype=float)
    single = x0.ndim == 1
    if single:
        x0 = x0[None, :]
        u = u.reshape(1, -1, spec.n_u) if spec.n_u else np.zeros((1, spec.horizon, 0))
    if spec.n_u == 0 and u.size == 0:
        u = np.zeros((x0.shape[0], spec.horizon, 0))
    if x0.shape[1] != spec.n_x:
        raise ContractError(f"state width {x0.shape[1]} != n_x={spec.n_x}")
    if u.shape != (x0.shape[0], spec.horizon, spec.n_u):
        raise ContractError(f"input sequence shape {u.shape} != {(x0.shape[0], spec.horizon, spec.n_u)}")
    return np.ascontiguousarray(x0), np.ascontiguousarray(u), single


def predict_horizon(spec, params, x0, u_seq):
    """Roll the model out for ``spec.horizon`` samples.

    Single example: ``x0`` shape ``(n_x,)``, ``u_seq`` ``(horizon, n_u)``,
    returns ``(horizon, n_x)``.  Batched inputs add a leading axis.
    Raises :class:`DivergenceError` naming the integration step on overflow.
    """
    params = _check_params(spec.core, params)
    x0, u, single = _batch(spec, x0, u_seq)
    traj, _ = kernels.node_integrate(spec.core.layer_widths, params, x0, u,
                                     spec.step, spec.substeps, False)
    return traj[0] if single else traj


def horizon_jacobian(spec, params, x0, u_seq):
    """Jacobian of the predicted trajectory with respect to the parameters.

    Rows are sample-major, state-minor: shape ``(horizon * n_x, n_params)``
    for one example, ``(N, horizon * n_x, n_params)`` for a batch.
    """
    params = _check_params(spec.core, params)
    x0, u, single = _batch(spec, x0, u_seq)
    _, sens = kernels.node_integrate(spec.core.layer_widths, params, x0, u,
                                     spec.step, spec.substeps, True)
    J = sens.reshape(sens.shape[0], spec.horizon * spec.n_x, spec.n_params)
    return J[0] if single else J


def predict_and_jacobian(spec, params, x0, u_seq):
    """Batched trajectory and Jacobian from a single integration pass."""
    params = _check_params(spec.core, params)
    x0, u, _ = _batch(spec, x0, u_seq)
    traj, sens = kernels.node_integrate(spec.core.layer_widths, params, x0, u,
                                        spec.step, spec.substeps, True)
    return traj, sens.reshape(sens.shape[0], spec.horizon * spec.n_x, spec.n_params)


def horizon_vjp(spec, params, x0, u_seq, cotangent):
    """``sum_i J_i^T c_i`` by reverse accumulation through the RK4 steps.

    Equivalent to contracting :func:`horizon_jacobian` with ``cotangent``
    (shape ``(N, horizon, n_x)``) at the cost of roughly two roll-outs.
    Returns ``(trajectory, grad)``.
    """
    params = _check_params(spec.core, params)
    x0, u, _ = _batch(spec, x0, u_seq)
    core = spec.core
    widths = core.layer_widths
    n_x, h = spec.n_x, spec.step
    N = x0.shape[0]

    def f(z):
        Y, _, _ = kernels.mlp_eval_jac(widths, params, np.ascontiguousarray(z), False, False)
        return Y

    stages = []
    traj = np.empty((N, spec.horizon, n_x))
    x = x0.copy()
    for k in range(spec.horizon):
        uk = u[:, k, :]
        for _ in range(spec.substeps):
            z1 = np.concatenate([x, uk], axis=1)
            k1 = f(z1)
            z2 = np.concatenate([x + 0.5 * h * k1, uk], axis=1)
            k2 = f(z2)
            z3 = np.concatenate([x + 0.5 * h * k2, uk], axis=1)
            k3 = f(z3)
            z4 = np.concatenate([x + h * k3, uk], axis=1)
            k4 = f(z4)
            stages.append((z1, z2, z3, z4))
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        traj[:, k, :] = x
    if not np.all(np.isfinite(traj)):
        raise DivergenceError("non-finite state during adjoint forward pass")

    grad = np.zeros(spec.n_params)
    lam = np.zeros((N, n_x))
    cot = np.asarray(cotangent, dtype=float).reshape(N, spec.horizon, n_x)
    idx = len(stages)
    for k in range(spec.horizon - 1, -1, -1):
        lam = lam + cot[:, k, :]
        for _ in range(spec.substeps):
            idx -= 1
            z1, z2, z3, z4 = stages[idx]
            lx = lam.copy()
            l4 = (h / 6.0) * lam
            l3 = (h / 3.0) * lam
            l2 = (h / 3.0) * lam
            l1 = (h / 6.0) * lam
            gp, gz = vjp_params(core, params, z4, l4)
            grad += gp
            lx += gz[:, :n_x]
            l3 = l3 + h * gz[:, :n_x]
            gp, gz = vjp_params(core, params, z3, l3)
            grad += gp
            lx += gz[:, :n_x]
            l2 = l2 + 0.5 * h * gz[:, :n_x]
            gp, gz = vjp_params(core, params, z2, l2)
            grad += gp
            lx += gz[:, :n_x]
            l1 = l1 + 0.5 * h * gz[:, :n_x]
            gp, gz = vjp_params(core, params, z1, l1)
            grad += gp
            lam = lx + gz[:, :n_x]
    return traj, grad
