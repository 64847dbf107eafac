"""Gradient-based training: subset-masked Adam and L-BFGS with an epoch loop,
plateau learning-rate decay and validation early stopping.

Losses are the mean squared prediction error averaged over examples *and*
output dimensions, so the scale is comparable between systems with different
horizons and state widths.
"""
import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError, DivergenceError

log = logging.getLogger(__name__)


def _residual(predictor, params, batch):
    pred = predictor.predict(params, batch.x0, batch.u)
    if not np.all(np.isfinite(pred)):
        raise DivergenceError("non-finite prediction")
    return pred - batch.y


def mse_loss(predictor, params, batch):
    """Mean over examples and outputs of the squared prediction error."""
    if len(batch) == 0:
        raise ContractError("empty batch")
    r = _residual(predictor, params, batch)
    return float(np.mean(r * r))


def grad_loss(predictor, params, batch):
    """Loss and its gradient ``2/(N d) sum_i H_i^T (pred_i - target_i)``.

    The contraction with the Jacobian is done in reverse mode so the
    ``(N, d, n_params)`` Jacobian is never materialised.
    """
    if len(batch) == 0:
        raise ContractError("empty batch")
    n, d = len(batch), batch.y.shape[1] * batch.y.shape[2]
    pred = predictor.predict(params, batch.x0, batch.u)
    if not np.all(np.isfinite(pred)):
        raise DivergenceError("non-finite prediction")
    r = pred - batch.y
    _, g = predictor.vjp(params, batch.x0, batch.u, (2.0 / (n * d)) * r)
    return float(np.mean(r * r)), g


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))


def subset_indices(scores, k):
    """Indices (ascending) of the ``k`` largest scores, ties broken by lower index."""
    n = scores.shape[0]
    if k >= n:
        return np.arange(n)
    kth = np.partition(scores, n - k)[n - k]
    above = np.flatnonzero(scores > kth)
    ties = np.flatnonzero(scores == kth)[:k - above.size]
    return np.sort(np.concatenate([above, ties]))


def adam_subset_step(state, params, grad, lr, q=1.0):
    """One Adam step that only moves the ``ceil(q * n)`` largest-|grad| entries.

    Moment estimates are updated for every parameter; masked parameters are
    left bit-for-bit unchanged.
    """
    if not 0 < q <= 1:
        raise ContractError("q must lie in (0, 1]")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    step = lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new = params.copy()
    n = params.shape[0]
    k = int(np.ceil(q * n))
    if k >= n:
        new -= step
    else:
        idx = subset_indices(np.abs(grad), k)
        new[idx] -= step[idx]
    return new


@dataclass
class LbfgsHistory:
    size: int = 10
    s: deque = field(default_factory=deque)
    y: deque = field(default_factory=deque)

    def push(self, s, y):
        self.s.append(s)
        self.y.append(y)
        while len(self.s) > self.size:
            self.s.popleft()
            self.y.popleft()

    def clear(self):
        self.s.clear()
        self.y.clear()

    def direction(self, g):
        """Two-loop recursion; ``-g / ||g||`` when the history is empty."""
        if not self.s:
            return -g / max(np.linalg.norm(g), 1e-300)
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(self.s), reversed(self.y)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            q -= a * y
            alphas.append((a, rho))
        s, y = self.s[-1], self.y[-1]
        r = q * ((s @ y) / (y @ y))
        for (s, y), (a, rho) in zip(zip(self.s, self.y), reversed(alphas)):
            b = rho * (y @ r)
            r += (a - b) * s
        return -r


def lbfgs_step(history, params, loss_and_grad, lr=1.0, max_line_searches=10, c1=1e-4,
               loss_only=None, events=None):
    """One L-BFGS iteration with backtracking Armijo line search.

    ``loss_and_grad(p) -> (f, g)``; ``loss_only(p) -> f`` (defaults to the
    first element of ``loss_and_grad``).  The trial step starts at ``lr`` and
    halves up to ``max_line_searches`` times.  If no trial satisfies the
    Armijo condition a plain gradient step ``-lr * g`` is taken, the history
    is cleared and a warning event is recorded.

    Returns ``(new_params, new_loss, new_grad)``.
    """
    loss_only = loss_only or (lambda p: loss_and_grad(p)[0])
    f, g = loss_and_grad(params)
    d = history.direction(g)
    gd = float(g @ d)
    if not gd < 0:
        history.clear()
        d = history.direction(g)
        gd = float(g @ d)
    t = lr
    for _ in range(max_line_searches):
        trial = params + t * d
        try:
            f_new = loss_only(trial)
        except DivergenceError:
            f_new = np.inf
        if np.isfinite(f_new) and f_new <= f + c1 * t * gd:
            break
        t *= 0.5
    else:
        trial = params - lr * g
        history.clear()
        msg = "line search failed; took a steepest-descent step"
        log.warning(msg)
        if events is not None:
            events.append(msg)
    f_new, g_new = loss_and_grad(trial)
    s, y = trial - params, g_new - g
    if s @ y > 1e-10:
        history.push(s, y)
    return trial, f_new, g_new


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    minibatch_size: int = 16
    minibatches_per_epoch: int = 50
    max_epochs: int = 100
    lr_patience: int = 10
    lr_factor: float = 0.5
    early_stop_patience: int = 20
    adam_subset_fraction: float = 1.0
    lbfgs_history: int = 10
    lbfgs_max_line_searches: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_factor < 1:
            raise ContractError("lr_factor must lie in (0, 1)")
        if not 0 < self.adam_subset_fraction <= 1:
            raise ContractError("adam_subset_fraction must lie in (0, 1]")
        if min(self.learning_rate, self.minibatch_size, self.minibatches_per_epoch,
               self.lr_patience, self.early_stop_patience) <= 0 or self.max_epochs < 0:
            raise ContractError("training hyperparameters must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    """Outcome of one training run.

    ``curve`` rows are ``(epoch, train_loss, val_loss, lr, wall_clock_s)``;
    epoch 0 is the initial parameter vector.
    """

    params: np.ndarray
    best_epoch: int
    best_val: float
    convergence_time: float
    epochs_run: int
    curve: list
    events: list = field(default_factory=list)
    diverged: bool = False
    diagnostics: list = field(default_factory=list)

    def write_curve_csv(self, path, header="epoch,train_loss,val_loss,lr,wall_clock_s"):
        with open(path, "w") as f:
            f.write(header + "\n")
            for row in self.curve:
                f.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


class EpochLoop:
    """Best-val tracking, plateau LR decay and early stopping shared by all trainers."""

    def __init__(self, init, train_loss, val_loss, lr, patience, factor, stop_patience):
        self.t0 = time.perf_counter()
        self.best_params = init.copy()
        self.best_val = val_loss
        self.best_epoch = 0
        self.best_time = 0.0
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.stop_patience = stop_patience
        self.since_best = 0
        self.since_decay = 0
        self.epoch = 0
        self.curve = [(0, train_loss, val_loss, lr, 0.0)]

    def end_epoch(self, params, train_loss, val_loss):
        """Record an epoch; returns ``True`` when training should stop."""
        self.epoch += 1
        now = time.perf_counter() - self.t0
        self.curve.append((self.epoch, train_loss, val_loss, self.lr, now))
        if np.isfinite(val_loss) and val_loss < self.best_val:
            self.best_val = val_loss
            self.best_params = params.copy()
            self.best_epoch = self.epoch
            self.best_time = now
            self.since_best = 0
            self.since_decay = 0
        else:
            self.since_best += 1
            self.since_decay += 1
            if self.since_decay >= self.patience:
                self.lr *= self.factor
                self.since_decay = 0
        return self.since_best >= self.stop_patience

    def result(self, events, diverged=False):
        return TrainResult(self.best_params, self.best_epoch, self.best_val, self.best_time,
                           self.epoch, self.curve, events, diverged)


def train(predictor, init, train_ds, val_ds, config, optimizer="adam"):
    """Minibatch training with early stopping on validation loss.

    Each epoch draws ``minibatches_per_epoch`` minibatches uniformly with
    replacement from the training split.  Returns the parameters of the
    epoch with the lowest validation loss (epoch 0 = ``init``).
    """
    if optimizer not in ("adam", "lbfgs"):
        raise ContractError(f"unknown optimizer {optimizer!r}")
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ContractError("train and validation splits must be non-empty")
    rng = np.random.default_rng(config.seed)
    params = np.array(init, dtype=float)
    events = []
    try:
        loop = EpochLoop(params, mse_loss(predictor, params, train_ds),
                         mse_loss(predictor, params, val_ds), config.learning_rate,
                         config.lr_patience, config.lr_factor, config.early_stop_patience)
    except DivergenceError as exc:
        raise DivergenceError(f"initial parameters diverge: {exc}") from exc
    adam = AdamState.zeros(params.shape[0])
    history = LbfgsHistory(config.lbfgs_history)
    n = len(train_ds)
    for _ in range(config.max_epochs):
        try:
            for _ in range(config.minibatches_per_epoch):
                batch = train_ds.take(rng.integers(0, n, size=config.minibatch_size))
                if optimizer == "adam":
                    _, g = grad_loss(predictor, params, batch)
                    params = adam_subset_step(adam, params, g, loop.lr,
                                              config.adam_subset_fraction)
                else:
                    params, _, _ = lbfgs_step(
                        history, params, lambda p: grad_loss(predictor, p, batch), loop.lr,
                        config.lbfgs_max_line_searches,
                        loss_only=lambda p: mse_loss(predictor, p, batch), events=events)
            tr = mse_loss(predictor, params, train_ds)
            va = mse_loss(predictor, params, val_ds)
        except DivergenceError as exc:
            events.append(f"diverged in epoch {loop.epoch + 1}: {exc}")
            return loop.result(events, diverged=True)
        if loop.end_epoch(params, tr, va):
            break
    return loop.result(events)
