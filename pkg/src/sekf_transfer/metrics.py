"""Evaluation metrics for transfer-learning trials."""
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class TrialResult:
    """One trial's outcome plus its factor metadata.

    Losses are mean squared errors in physical (de-normalized) units.
    """

    train_loss: float
    val_loss: float
    test_loss: float
    convergence_time: float
    metadata: dict = field(default_factory=dict)
    final_params: np.ndarray = None
    source_params: np.ndarray = None
    epochs_run: int = 0
    best_epoch: int = 0
    diverged: bool = False
    events: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("train_loss", "val_loss", "test_loss"):
            v = getattr(self, name)
            if not (v >= 0 or np.isnan(v)):
                raise ContractError(f"{name} must be non-negative")
        if self.convergence_time < 0:
            raise ContractError("convergence_time must be non-negative")

    def to_record(self, include_params=True):
        d = asdict(self)
        for k in ("final_params", "source_params"):
            v = d.pop(k)
            if include_params and v is not None:
                d[k] = [float(x) for x in v]
        return d

    @classmethod
    def from_record(cls, d):
        d = dict(d)
        for k in ("final_params", "source_params"):
            if d.get(k) is not None:
                d[k] = np.array(d[k], dtype=float)
        known = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_json(self, include_params=True):
        return json.dumps(self.to_record(include_params))


def train_test_gap(r):
    """Test loss minus training loss; negative values are kept."""
    return r.test_loss - r.train_loss


def normalized_mse(r, source_test_loss):
    if not source_test_loss > 0:
        raise ContractError("source test loss must be positive")
    return r.test_loss / source_test_loss


def normalized_convergence_time(r, source_time):
    if not source_time > 0:
        raise ContractError("source convergence time must be positive")
    return r.convergence_time / source_time


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ContractError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _w1(a, b):
    a = np.sort(a)
    b = np.sort(b)
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    # integrate |F_a - F_b| over the merged support
    grid = np.concatenate([a, b])
    grid.sort(kind="mergesort")
    widths = np.diff(grid)
    Fa = np.searchsorted(a, grid[:-1], side="right") / a.size
    Fb = np.searchsorted(b, grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(Fa - Fb) * widths))


def wasserstein_1d(a, b):
    """Empirical W1 distance with equal sample weights.

    For 2-D inputs (samples x dimensions) the per-dimension distances are
    averaged.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ContractError("samples must be non-empty")
    if a.ndim <= 1 and b.ndim <= 1:
        return _w1(a.ravel(), b.ravel())
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    if a.shape[1] != b.shape[1]:
        raise ContractError("sample dimensions differ")
    return float(np.mean([_w1(a[:, j], b[:, j]) for j in range(a.shape[1])]))


def layer_change_report(spec, source, final, bins=20):
    """Per-layer summary of ``final - source``.

    Returns a list with one dict per weight layer: ``layer``, ``start``,
    ``stop``, ``count``, ``n_changed``, ``mean_abs``, ``max_abs`` and a
    ``histogram`` of the signed changes (``counts``, ``edges``).
    """
    source = np.asarray(source, dtype=float)
    final = np.asarray(final, dtype=float)
    if source.shape != (spec.n_params,) or final.shape != (spec.n_params,):
        raise ContractError("parameter vectors do not match the network spec")
    delta = final - source
    report = []
    for i, (start, stop) in enumerate(spec.layer_ranges()):
        d = delta[start:stop]
        counts, edges = np.histogram(d, bins=bins)
        report.append({
            "layer": i, "start": start, "stop": stop, "count": stop - start,
            "n_changed": int(np.count_nonzero(d)),
            "mean_abs": float(np.mean(np.abs(d))), "max_abs": float(np.max(np.abs(d))),
            "histogram": {"counts": counts.tolist(), "edges": edges.tolist()},
        })
    return report
