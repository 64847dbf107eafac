"""One-way permutation ANOVA for the main effects of the experiment grid."""
import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

_CHUNK = 512


@dataclass(frozen=True)
class FactorTable:
    """Categorical factor columns and one real outcome per row."""

    factors: dict
    outcome: np.ndarray

    def __post_init__(self):
        n = len(self.outcome)
        for name, col in self.factors.items():
            if len(col) != n:
                raise ContractError(f"factor {name!r} has {len(col)} rows, outcome has {n}")
        if not np.all(np.isfinite(self.outcome)):
            raise ContractError("outcome contains missing or non-finite values")

    @classmethod
    def from_records(cls, records, factors, outcome):
        rows = [r for r in records if r.get(outcome) is not None and np.isfinite(r[outcome])]
        return cls({f: np.array([str(r[f]) for r in rows]) for f in factors},
                   np.array([float(r[outcome]) for r in rows]))


def _group_codes(labels):
    levels, codes = np.unique(np.asarray(labels), return_inverse=True)
    if len(levels) < 2:
        raise ContractError("factor needs at least two levels")
    return codes, len(levels)


def _f_stats(V, codes, n_groups):
    """F statistics for each row of ``V`` (permutations x observations)."""
    n = V.shape[1]
    onehot = np.zeros((n, n_groups))
    onehot[np.arange(n), codes] = 1.0
    counts = onehot.sum(axis=0)
    grand = V.mean(axis=1, keepdims=True)
    C = V - grand
    means = (C @ onehot) / counts
    ss_between = (means * means) @ counts
    resid = C - means[:, codes]
    ss_within = np.einsum("ij,ij->i", resid, resid)
    ms_between = ss_between / (n_groups - 1)
    ms_within = np.maximum(ss_within / max(n - n_groups, 1), np.finfo(float).tiny)
    with np.errstate(over="ignore"):  # zero within-group spread gives F = inf
        return ms_between / ms_within


def one_way_f(values, labels):
    """Between-group mean square over within-group mean square.

    A constant outcome has no between-group variation and gives ``F = 0``.
    """
    values = np.asarray(values, dtype=float)
    codes, g = _group_codes(labels)
    if np.ptp(values) == 0:
        return 0.0
    return float(_f_stats(values[None, :], codes, g)[0])


def permutation_anova(table, factor, n_perm=4999, seed=0):
    """Observed F for ``factor`` and its permutation p-value.

    ``p = (1 + #{F_perm >= F_obs}) / (n_perm + 1)`` where each permutation
    shuffles the outcome across rows.
    """
    if n_perm < 1:
        raise ContractError("n_perm must be >= 1")
    values = np.asarray(table.outcome, dtype=float)
    codes, g = _group_codes(table.factors[factor])
    if np.ptp(values) == 0:
        return 0.0, 1.0
    f_obs = float(_f_stats(values[None, :], codes, g)[0])
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < n_perm:
        k = min(_CHUNK, n_perm - done)
        V = rng.permuted(np.broadcast_to(values, (k, values.size)), axis=1)
        hits += int(np.count_nonzero(_f_stats(V, codes, g) >= f_obs * (1 - 1e-12)))
        done += k
    return f_obs, (1 + hits) / (n_perm + 1)


def anova_report(records, outcomes, factors, n_perm=4999, seed=0):
    """Rows ``{outcome, factor, F, p}`` for every outcome/factor pair with >= 2 levels."""
    rows = []
    for outcome in outcomes:
        for factor in factors:
            table = FactorTable.from_records(records, [factor], outcome)
            if len(np.unique(table.factors[factor])) < 2:
                continue
            F, p = permutation_anova(table, factor, n_perm, seed)
            rows.append({"outcome": outcome, "factor": factor, "F": F, "p": p})
    return rows


def write_anova_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["outcome", "factor", "F", "p"])
        w.writeheader()
        w.writerows(rows)
