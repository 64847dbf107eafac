"""Source/target datasets: example extraction, size splits, normalization, I/O.

A :class:`Dataset` stores examples column-wise as arrays:

* ``x0``  -- initial states, shape ``(N, n_x0)``
* ``u``   -- input sequences over the horizon, ``(N, H, n_u)`` (``n_u`` may be 0)
* ``y``   -- target trajectories, ``(N, H, n_y)``
"""
import json
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from .errors import ContractError
from .systems import add_noise, gen_heater_schedule, simulate_spring, simulate_tclab

SCALE_FLOOR = 1e-8


class Example(NamedTuple):
    x0: np.ndarray
    u_seq: np.ndarray
    target: np.ndarray


@dataclass(frozen=True)
class Normalizer:
    """Per-dimension affine maps ``(v - shift) / scale`` for states, inputs, targets."""

    x_shift: np.ndarray
    x_scale: np.ndarray
    u_shift: np.ndarray
    u_scale: np.ndarray
    y_shift: np.ndarray
    y_scale: np.ndarray

    @classmethod
    def identity(cls, n_x0, n_u, n_y):
        return cls(np.zeros(n_x0), np.ones(n_x0), np.zeros(n_u), np.ones(n_u),
                   np.zeros(n_y), np.ones(n_y))

    def apply(self, ds):
        return replace(ds, x0=(ds.x0 - self.x_shift) / self.x_scale,
                       u=(ds.u - self.u_shift) / self.u_scale,
                       y=(ds.y - self.y_shift) / self.y_scale,
                       normalizer=self)

    def invert(self, ds):
        return replace(ds, x0=ds.x0 * self.x_scale + self.x_shift,
                       u=ds.u * self.u_scale + self.u_shift,
                       y=self.invert_targets(ds.y), normalizer=None)

    def invert_targets(self, y):
        return y * self.y_scale + self.y_shift

    def to_dict(self):
        return {k: [float(v) for v in getattr(self, k)] for k in
                ("x_shift", "x_scale", "u_shift", "u_scale", "y_shift", "y_scale")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.array(v, dtype=float) for k, v in d.items()})


@dataclass(frozen=True)
class Dataset:
    x0: np.ndarray
    u: np.ndarray
    y: np.ndarray
    split: str = "train"
    normalizer: Optional[Normalizer] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.x0.ndim != 2 or self.u.ndim != 3 or self.y.ndim != 3:
            raise ContractError("x0 must be 2-D, u and y 3-D")
        n = self.x0.shape[0]
        if self.u.shape[0] != n or self.y.shape[0] != n:
            raise ContractError("x0, u and y disagree on the number of examples")
        if self.u.shape[2] and self.u.shape[1] != self.y.shape[1]:
            raise ContractError("input sequence and target lengths differ")
        if self.split not in ("train", "val", "test", "pool"):
            raise ContractError(f"unknown split {self.split!r}")

    def __len__(self):
        return self.x0.shape[0]

    def __getitem__(self, i):
        return Example(self.x0[i], self.u[i], self.y[i])

    @property
    def horizon(self):
        return self.y.shape[1]

    def take(self, index, split=None):
        """Examples at ``index`` (slice or integer array) as a new dataset."""
        return replace(self, x0=self.x0[index], u=self.u[index], y=self.y[index],
                       split=split or self.split)


def _seeds(seed, n):
    return np.random.SeedSequence(seed).spawn(n)


def build_spring_dataset(p, n, seed, noise_sigma=0.05, horizon=20, dt=0.05, x0_range=5.0):
    """``n`` examples: ``x0 = (position, velocity) ~ U(-5, 5)^2`` and noisy
    positions at ``t = 1..horizon`` seconds as targets."""
    if n < 1:
        raise ContractError("need n >= 1")
    ic_seed, noise_seed = _seeds(seed, 2)
    x0 = np.random.default_rng(ic_seed).uniform(-x0_range, x0_range, size=(n, 2))
    _, X, _ = simulate_spring(p, x0[:, 0], x0[:, 1], float(horizon), dt=dt, sample_interval=1.0)
    y = add_noise(X[:, 1:horizon + 1], noise_sigma, noise_seed)[:, :, None]
    meta = {"system": "spring", "seed": seed, "noise_sigma": noise_sigma, "params": p.to_dict()}
    return Dataset(x0, np.zeros((n, horizon, 0)), y, split="pool", meta=meta)


def tclab_windows(T, Q, horizon=60, stride=1):
    """Sliding windows over a sampled run.

    Window ``i`` starts at sample ``s = i * stride``: ``x0 = T[s]``,
    ``u = Q[s:s + horizon]``, ``y = T[s + 1:s + horizon + 1]``.
    """
    n_samples = T.shape[0]
    if n_samples < horizon + 1:
        raise ContractError(f"run of {n_samples} samples is shorter than horizon + 1 = {horizon + 1}")
    starts = np.arange(0, n_samples - horizon, stride)
    idx = starts[:, None] + np.arange(horizon + 1)[None, :]
    return T[starts], Q[idx[:, :-1]], T[idx[:, 1:]]


def tclab_run(p, duration, seed, noise_sigma=0.25, dt=10.0, substeps=1, T0=None):
    """Simulate one continuous excitation run; returns ``(t, T_noisy, Q)``.

    The run has ``duration / dt`` samples.  Temperatures start at ambient.
    """
    sched_seed, noise_seed = _seeds(seed, 2)
    schedule = gen_heater_schedule(sched_seed, duration)
    T0 = (p.T_inf, p.T_inf) if T0 is None else T0
    n = int(round(duration / dt))
    t, T, Q = simulate_tclab(p, T0, schedule, (n - 1) * dt, dt=dt, substeps=substeps)
    return t, add_noise(T, noise_sigma, noise_seed), Q


def build_tclab_dataset(p, duration, seed, noise_sigma=0.25, stride=1, horizon=60, dt=10.0,
                        substeps=1):
    """Windows of ``horizon`` samples over a single simulated run of ``duration`` s."""
    if duration < (horizon + 1) * dt:
        raise ContractError(f"duration {duration} s is shorter than (horizon + 1) * dt")
    _, T, Q = tclab_run(p, duration, seed, noise_sigma, dt, substeps)
    x0, u, y = tclab_windows(T, Q, horizon, stride)
    meta = {"system": "tclab", "seed": seed, "noise_sigma": noise_sigma, "duration": duration,
            "stride": stride, "params": p.to_dict()}
    return Dataset(x0, u, y, split="pool", meta=meta)


def split_first(ds, size):
    """First ``size`` examples: the first ``ceil(0.9 size)`` train, the rest val."""
    if size > len(ds):
        raise ContractError(f"size {size} exceeds the {len(ds)} available examples")
    n_train = -(-9 * size // 10)
    return ds.take(slice(0, n_train), "train"), ds.take(slice(n_train, size), "val")


@dataclass(frozen=True)
class Splits:
    test: Dataset
    by_size: dict


def split_protocol(pool, sizes, replicate, block_size, test_size):
    """Train/val splits by size plus a shared test split for one replicate.

    Replicate ``r`` owns the disjoint block ``pool[r * block_size:(r + 1) * block_size]``;
    its last ``test_size`` examples form the test split and the training sets
    are drawn from the front of the remainder.
    """
    lo, hi = replicate * block_size, (replicate + 1) * block_size
    if hi > len(pool) or test_size >= block_size:
        raise ContractError(f"pool of {len(pool)} cannot supply replicate {replicate} "
                            f"with block {block_size} and test {test_size}")
    block = pool.take(slice(lo, hi))
    n_cand = block_size - test_size
    if max(sizes) > n_cand:
        raise ContractError(f"size {max(sizes)} exceeds the {n_cand} non-test examples")
    candidates = block.take(slice(0, n_cand))
    test = block.take(slice(n_cand, block_size), "test")
    return Splits(test=test, by_size={s: split_first(candidates, s) for s in sizes})


def fit_normalizer(train, tie_state=False):
    """Mean/std of the training split per dimension (scale floored at 1e-8).

    With ``tie_state`` the initial states and targets live in the same space
    (neural-ODE models) and share statistics pooled over both.
    """
    if len(train) == 0:
        raise ContractError("cannot fit a normalizer on an empty split")

    def stats(a):
        a = a.reshape(-1, a.shape[-1])
        return a.mean(axis=0), np.maximum(a.std(axis=0), SCALE_FLOOR)

    if tie_state:
        if train.x0.shape[1] != train.y.shape[2]:
            raise ContractError("tie_state needs x0 and targets of the same width")
        xs, xc = stats(np.concatenate([train.x0, train.y.reshape(-1, train.y.shape[2])]))
        ys, yc = xs, xc
    else:
        xs, xc = stats(train.x0)
        ys, yc = stats(train.y)
    if train.u.shape[2]:
        us, uc = stats(train.u)
    else:
        us, uc = np.zeros(0), np.ones(0)
    return Normalizer(xs, xc, us, uc, ys, yc)


def write_dataset(ds, csv_path, json_path):
    """One example per CSV row (x0, flattened u, flattened y) plus a JSON sidecar."""
    n, H = len(ds), ds.horizon
    n_x0, n_u, n_y = ds.x0.shape[1], ds.u.shape[2], ds.y.shape[2]
    header = ([f"x0_{j}" for j in range(n_x0)]
              + [f"u_{k}_{j}" for k in range(H) for j in range(n_u)]
              + [f"y_{k}_{j}" for k in range(H) for j in range(n_y)])
    rows = np.concatenate([ds.x0, ds.u.reshape(n, -1), ds.y.reshape(n, -1)], axis=1)
    np.savetxt(csv_path, rows, delimiter=",", header=",".join(header), comments="", fmt="%.17g")
    sidecar = {"n_examples": n, "horizon": H, "n_x0": n_x0, "n_u": n_u, "n_y": n_y,
               "split": ds.split, "meta": ds.meta,
               "normalizer": ds.normalizer.to_dict() if ds.normalizer else None}
    with open(json_path, "w") as f:
        json.dump(sidecar, f, indent=1)


def read_dataset(csv_path, json_path):
    with open(json_path) as f:
        side = json.load(f)
    n, H = side["n_examples"], side["horizon"]
    n_x0, n_u, n_y = side["n_x0"], side["n_u"], side["n_y"]
    rows = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    if rows.shape != (n, n_x0 + H * (n_u + n_y)):
        raise ContractError(f"CSV shape {rows.shape} does not match sidecar")
    x0 = rows[:, :n_x0]
    u = rows[:, n_x0:n_x0 + H * n_u].reshape(n, H, n_u)
    y = rows[:, n_x0 + H * n_u:].reshape(n, H, n_y)
    norm = Normalizer.from_dict(side["normalizer"]) if side["normalizer"] else None
    return Dataset(np.ascontiguousarray(x0), np.ascontiguousarray(u), np.ascontiguousarray(y),
                   split=side["split"], normalizer=norm, meta=side["meta"])
