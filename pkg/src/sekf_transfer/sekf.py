"""Subset Extended Kalman Filter training.

The network parameters are the hidden state of a random walk,

    params_{k+1} = params_k + w_k,            w_k ~ N(0, Q I)
    targets_k    = predict(params_k) + v_k,   v_k ~ N(0, R I)

and each minibatch is one measurement update.  Only ``m`` parameters are
corrected per update, chosen by ``variance * sum_i H_ij^2``.  The covariance
is stored as its diagonal; cross-covariances exist only inside the active
``m x m`` block during an update and are dropped afterwards.
"""
import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import ContractError, DivergenceError
from .trainers import EpochLoop, mse_loss, subset_indices

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-12
JITTER = 1e-10


@dataclass
class SekfConfig:
    R: float = 0.01
    Q: float = 1e-4
    P0: float = 1.0
    subset_size: int = 64
    minibatch_size: int = 1
    max_epochs: int = 100
    early_stop_patience: int = 20
    selection: str = "variance"
    max_consecutive_skips: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.R <= 0 or self.Q < 0 or self.P0 <= 0:
            raise ContractError("need R > 0, Q >= 0, P0 > 0")
        if self.subset_size < 1 or self.minibatch_size < 1 or self.max_epochs < 0:
            raise ContractError("subset_size and minibatch_size must be >= 1")
        if self.selection not in ("variance", "gradient"):
            raise ContractError(f"unknown selection rule {self.selection!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class CovarianceState:
    diag: np.ndarray

    @classmethod
    def isotropic(cls, n, p0):
        return cls(np.full(n, float(p0)))

    def copy(self):
        return CovarianceState(self.diag.copy())


def select_subset(H, diag, m, residual=None, method="variance"):
    """Indices of the ``m`` highest-scoring parameters, ties to the lower index.

    ``variance``: ``diag_j * sum_i H_ij^2``.  ``gradient``: ``|H^T r|_j``.
    """
    n = H.shape[1]
    if not 1 <= m <= n:
        raise ContractError(f"subset size {m} outside [1, {n}]")
    if method == "variance":
        scores = diag * np.einsum("ij,ij->j", H, H)
    else:
        scores = np.abs(H.T @ residual)
    if m == n:
        return np.arange(n)
    return subset_indices(scores, m)


def _kalman_block(H, p, r, R):
    """Gain-weighted correction and posterior variances for one subset.

    ``H`` is ``d x m``, ``p`` the prior variances of the subset.  Solves the
    ``d x d`` innovation system, or the equivalent ``m x m`` information
    form when that is smaller.  Returns ``(delta, new_var, gain_norm)``.
    """
    d, m = H.shape
    for jitter in (0.0, JITTER):
        try:
            if d <= m:
                HP = H * p
                S = HP @ H.T
                S[np.diag_indices(d)] += R + jitter
                c = cho_factor(S, lower=True)
                Kt = cho_solve(c, HP, check_finite=False)  # K^T = S^-1 H P
                delta = Kt.T @ r
                new_var = p - np.einsum("ij,ij->j", Kt, HP)
                gain = Kt
            else:
                A = H.T @ H
                A[np.diag_indices(m)] += R / p + jitter
                c = cho_factor(A, lower=True)
                # K = (R P^-1 + H^T H)^-1 H^T ; posterior block = R (R P^-1 + H^T H)^-1
                sol = cho_solve(c, np.hstack([H.T, np.eye(m)]), check_finite=False)
                gain = sol[:, :d]
                delta = gain @ r
                new_var = R * sol[:, d:].diagonal()
        except (LinAlgError, ValueError):
            continue
        if np.all(np.isfinite(delta)) and np.all(np.isfinite(new_var)):
            return delta, new_var, float(np.linalg.norm(gain))
    return None


def sekf_update(predictor, params, cov, batch, config):
    """One predict/correct cycle on a minibatch.

    Returns ``(params, cov, info)`` where ``info`` holds the chosen subset,
    the gain norm and whether the update was skipped (singular innovation).
    Inputs are not modified.
    """
    if len(batch) > config.minibatch_size:
        raise ContractError("batch larger than the configured minibatch size")
    diag = cov.diag + config.Q
    pred, J = predictor.jacobian(params, batch.x0, batch.u)
    if not np.all(np.isfinite(pred)):
        raise DivergenceError("non-finite prediction in SEKF update")
    H = J.reshape(-1, J.shape[-1])
    r = (batch.y - pred).reshape(-1)
    m = min(config.subset_size, H.shape[1])
    idx = select_subset(H, diag, m, r, config.selection)
    out = _kalman_block(H[:, idx], diag[idx], r, config.R)
    if out is None:
        log.warning("innovation solve failed; update skipped")
        return params.copy(), CovarianceState(diag), {"subset": idx, "gain_norm": 0.0,
                                                      "skipped": True}
    delta, new_var, gain_norm = out
    new_params = params.copy()
    new_params[idx] += delta
    diag[idx] = np.maximum(new_var, VAR_FLOOR)
    return new_params, CovarianceState(diag), {"subset": idx, "gain_norm": gain_norm,
                                               "skipped": False}


def train_sekf(predictor, init, train_ds, val_ds, config):
    """Sequential passes over the shuffled training split, one update per minibatch.

    Validation loss is evaluated after every pass; the best-validation
    parameters are returned as a :class:`~sekf_transfer.trainers.TrainResult`
    whose ``diagnostics`` rows are
    ``(pass, val_loss, mean_diag, max_gain_norm, skipped_updates)``.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ContractError("train and validation splits must be non-empty")
    rng = np.random.default_rng(config.seed)
    params = np.array(init, dtype=float)
    cov = CovarianceState.isotropic(params.shape[0], config.P0)
    loop = EpochLoop(params, mse_loss(predictor, params, train_ds),
                     mse_loss(predictor, params, val_ds), 0.0, 10 ** 9, 0.5,
                     config.early_stop_patience)
    events, diagnostics = [], []
    n, B = len(train_ds), config.minibatch_size
    consecutive = 0
    for _ in range(config.max_epochs):
        order = rng.permutation(n)
        max_gain, skipped = 0.0, 0
        try:
            for start in range(0, n, B):
                batch = train_ds.take(order[start:start + B])
                params, cov, info = sekf_update(predictor, params, cov, batch, config)
                if info["skipped"]:
                    skipped += 1
                    consecutive += 1
                    if consecutive >= config.max_consecutive_skips:
                        events.append(f"aborted after {consecutive} consecutive skipped updates")
                        res = loop.result(events, diverged=True)
                        res.diagnostics = diagnostics
                        return res
                else:
                    consecutive = 0
                    max_gain = max(max_gain, info["gain_norm"])
            tr = mse_loss(predictor, params, train_ds)
            va = mse_loss(predictor, params, val_ds)
        except DivergenceError as exc:
            events.append(f"diverged in pass {loop.epoch + 1}: {exc}")
            res = loop.result(events, diverged=True)
            res.diagnostics = diagnostics
            return res
        if skipped:
            events.append(f"pass {loop.epoch + 1}: {skipped} skipped updates")
        diagnostics.append((loop.epoch + 1, va, float(cov.diag.mean()), max_gain, skipped))
        if loop.end_epoch(params, tr, va):
            break
    res = loop.result(events)
    res.diagnostics = diagnostics
    return res


def write_diagnostics_csv(path, rows):
    with open(path, "w") as f:
        f.write("pass,val_loss,mean_diag,max_gain_norm,skipped_updates\n")
        for row in rows:
            f.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
