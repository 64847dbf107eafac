"""Ground-truth simulators: damped spring-mass and the two-heater TCLab plant."""
import csv
from dataclasses import asdict, dataclass, replace

import numpy as np

from ._backend import kernels
from .errors import ContractError


@dataclass(frozen=True)
class SpringParams:
    """``m x'' + c x' + k x = u`` with constant force ``u``."""

    m: float = 1.0
    c: float = 0.5
    k: float = 1.0
    u: float = 0.0

    def __post_init__(self):
        if self.m <= 0 or self.k <= 0 or self.c < 0:
            raise ContractError(f"need m > 0, k > 0, c >= 0; got {self}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TclabParams:
    """Energy-balance parameters of the two-heater lab (SI units, temperatures in K)."""

    m: float = 0.004
    c_p: float = 500.0
    U: float = 10.0
    A: float = 1.0e-3
    A_s: float = 2.0e-4
    eps: float = 0.9
    sigma: float = 5.67e-8
    alpha1: float = 0.01
    alpha2: float = 0.0075
    T_inf: float = 296.15

    def __post_init__(self):
        if any(v <= 0 for v in asdict(self).values()):
            raise ContractError("all TCLab parameters must be strictly positive")
        if self.eps > 1:
            raise ContractError("emissivity must lie in (0, 1]")

    def as_tuple(self):
        return (self.m, self.c_p, self.U, self.A, self.A_s, self.eps, self.sigma,
                self.alpha1, self.alpha2, self.T_inf)

    def to_dict(self):
        return asdict(self)


def perturbed_tclab(p=None, factor=0.9):
    """Stand-in for a physical unit: ``U``, ``alpha1``, ``alpha2`` scaled by ``factor``."""
    p = p or TclabParams()
    return replace(p, U=p.U * factor, alpha1=p.alpha1 * factor, alpha2=p.alpha2 * factor)


@dataclass(frozen=True)
class HeaterSchedule:
    """Piecewise-constant heater powers.

    Segment ``i`` starts at ``starts[i]`` seconds and holds ``powers[i]``
    (percent, columns Q1 and Q2) until the next start.
    """

    starts: np.ndarray
    powers: np.ndarray

    def __post_init__(self):
        if self.starts.ndim != 1 or self.powers.shape != (self.starts.shape[0], 2):
            raise ContractError("starts must be (n,), powers (n, 2)")

    def at(self, t):
        """Heater powers in effect at times ``t`` (array), shape ``(len(t), 2)``."""
        idx = np.searchsorted(self.starts, np.asarray(t, dtype=float), side="right") - 1
        return self.powers[np.clip(idx, 0, len(self.starts) - 1)]

    @classmethod
    def constant(cls, q1, q2):
        return cls(np.array([0.0]), np.array([[float(q1), float(q2)]]))


def gen_heater_schedule(seed, duration, min_interval=60.0, max_interval=600.0, p_zero=0.5):
    """Pseudo-random excitation: hold times ~ U(1 min, 10 min); each heater is
    0 with probability ``p_zero`` and U(0, 100) % otherwise."""
    rng = np.random.default_rng(seed)
    starts, powers = [], []
    t = 0.0
    while t < duration:
        starts.append(t)
        hold = rng.uniform(min_interval, max_interval)
        zero = rng.random(2) < p_zero
        level = rng.uniform(0.0, 100.0, size=2)
        powers.append(np.where(zero, 0.0, level))
        t += hold
    return HeaterSchedule(np.array(starts), np.array(powers))


def simulate_spring(p, x0, v0, duration, dt=0.05, sample_interval=None):
    """RK4 trajectories of the spring for scalar or batched initial conditions.

    Returns ``(t, x, v)``; ``x`` and ``v`` have shape ``(n_samples,)`` for
    scalar initial conditions, ``(N, n_samples)`` otherwise.  Samples are
    taken every ``sample_interval`` seconds (default: every step).
    """
    if dt <= 0:
        raise ContractError("dt must be positive")
    sample_interval = dt if sample_interval is None else sample_interval
    every = int(round(sample_interval / dt))
    if every < 1 or abs(every * dt - sample_interval) > 1e-9 * sample_interval:
        raise ContractError("sample_interval must be an integer multiple of dt")
    n_steps = int(round(duration / dt))
    n_steps -= n_steps % every
    scalar = np.ndim(x0) == 0
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    v0 = np.atleast_1d(np.asarray(v0, dtype=float))
    X, V = kernels.spring_rk4(p.m, p.c, p.k, p.u, np.ascontiguousarray(x0),
                              np.ascontiguousarray(v0), dt, n_steps, every)
    t = np.arange(X.shape[1]) * sample_interval
    if scalar:
        return t, X[0], V[0]
    return t, X, V


def simulate_tclab(p, T0, schedule, duration, dt=10.0, substeps=1):
    """Integrate the coupled heater balances, sampling every ``dt`` seconds.

    Heater powers are read from ``schedule`` at each sample instant and held
    over the following interval.  Returns ``(t, T, Q)`` with ``T`` of shape
    ``(n + 1, 2)`` in K and ``Q`` the powers in effect at each sample time.
    """
    if dt <= 0:
        raise ContractError("dt must be positive")
    n = int(round(duration / dt))
    t = np.arange(n + 1) * dt
    Q = np.ascontiguousarray(schedule.at(t), dtype=float)
    T = kernels.tclab_rk4(p.as_tuple(), np.asarray(T0, dtype=float),
                          np.ascontiguousarray(Q[:-1]), dt / substeps, int(substeps))
    return t, T, Q


def add_noise(trajectory, sigma, seed):
    """Add i.i.d. Gaussian measurement noise with standard deviation ``sigma``."""
    if sigma < 0:
        raise ContractError("sigma must be non-negative")
    trajectory = np.asarray(trajectory, dtype=float)
    if sigma == 0:
        return trajectory.copy()
    rng = np.random.default_rng(seed)
    return trajectory + rng.normal(0.0, sigma, size=trajectory.shape)


def write_trajectory_csv(path, t, states, inputs=None, state_names=None, input_names=None):
    """Write ``t,<state cols>,<input cols>`` with round-trip float formatting."""
    states = np.asarray(states, dtype=float).reshape(len(t), -1)
    inputs = np.zeros((len(t), 0)) if inputs is None else np.asarray(inputs, dtype=float).reshape(len(t), -1)
    state_names = state_names or [f"x{i}" for i in range(states.shape[1])]
    input_names = input_names or [f"u{i}" for i in range(inputs.shape[1])]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", *state_names, *input_names])
        for i in range(len(t)):
            w.writerow([repr(float(t[i]))] + [repr(float(v)) for v in states[i]]
                       + [repr(float(v)) for v in inputs[i]])
