"""Experiment orchestration: source training, target data, tuned trials, grid runs.

Output directory layout::

    <root>/config.json            resolved configuration
    <root>/source/source.json     source artifact (params, normalizer, baselines)
    <root>/source/curve.csv       source learning curve
    <root>/tuning/<cell>.json     chosen hyperparameters per grid cell
    <root>/trials/<trial>.json    one record per trial, written atomically
    <root>/results.csv            aggregate table, one row per trial record
    <root>/anova.csv              permutation ANOVA (``report --anova``)
    <root>/layer_changes.csv      per-layer weight changes (``report --layer-changes``)
"""
import csv
import hashlib
import itertools
import json
import logging
import math
import os
import re
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import datasets as D
from ._backend import BACKEND
from .errors import ContractError, DivergenceError
from .metrics import (TrialResult, cosine_similarity, layer_change_report,
                      normalized_convergence_time, normalized_mse, train_test_gap,
                      wasserstein_1d)
from .nn_core import NetworkSpec
from .node_model import NodeSpec
from .predictors import MlpPredictor, NodePredictor, predictor_from_dict
from .sekf import SekfConfig, train_sekf
from .stats import anova_report, write_anova_csv
from .systems import SpringParams, TclabParams, perturbed_tclab
from .trainers import TrainConfig, train

log = logging.getLogger(__name__)

OUTPUT_ENV = "SEKF_TRANSFER_OUTPUT_ROOT"
OPTIMIZERS = ("sekf", "adam", "lbfgs")
INITS = ("finetune", "retrain")
DAY = 86400.0
HOUR = 3600.0

# reference source-data scale of the original study, recorded next to desk runs
REFERENCE_SOURCE = {"spring": {"points": 100_000}, "tclab": {"days": 365}}


class ConfigError(ContractError):
    """Invalid experiment configuration."""


def _default_source(system):
    if system == "spring":
        return {"n_points": 10_000, "n_test": 2_000, "noise_sigma": 0.05, "hidden": [32, 32],
                "train": {"learning_rate": 1e-2, "minibatch_size": 64, "max_epochs": 1000,
                          "lr_patience": 10, "lr_factor": 0.5, "early_stop_patience": 30}}
    return {"days": 14.0, "test_days": 1.0, "noise_sigma": 0.25, "stride": 1, "hidden": [32, 32],
            "substeps": 4, "time_scale": 100.0,
            "train": {"learning_rate": 1e-2, "minibatch_size": 64, "max_epochs": 300,
                      "lr_patience": 10, "lr_factor": 0.5, "early_stop_patience": 30}}


def _default_target(system):
    if system == "spring":
        return {"test_size": 9_000, "noise_sigma": 0.05}
    return {"days": 7, "test_days": 2, "param_factor": 0.9, "noise_factor": 2.0,
            "test_stride": 10}


def _default_tuning():
    return {
        "enabled": True,
        "adam": {"learning_rate": [1e-4, 1e-3, 1e-2], "minibatch_size": [16, 64]},
        "lbfgs": {"learning_rate": [1e-3, 1e-2, 1e-1, 1.0], "minibatch_size": [16, 64]},
        "sekf": {"Q": [1e-6, 1e-4, 1e-2, 1e-1], "P0": [0.01, 1.0, 10.0, 100.0],
                 "minibatch_size": [8]},
    }


def _default_fixed():
    return {
        "adam": {"learning_rate": 1e-3, "minibatch_size": 16},
        "lbfgs": {"learning_rate": 1e-1, "minibatch_size": 16},
        "sekf": {"Q": 1e-4, "P0": 1.0, "minibatch_size": 8},
        "common": {"minibatches_per_epoch": 50, "lr_patience": 10, "lr_factor": 0.5,
                   "early_stop_patience": 20, "lbfgs_history": 10,
                   "lbfgs_max_line_searches": 10, "R": 0.01, "subset_size": 64},
    }


@dataclass
class ExperimentConfig:
    """Factor grid plus data, source and tuning settings for one system.

    ``sizes`` count examples for the spring and hours of data for TCLab.
    Spring targets are named ``<m|c|k>{+,-}<pct>%`` or ``u{+,-}<newtons>``;
    the TCLab target is ``perturbed``.  ``source`` is accepted by both and
    reproduces the source system.
    """

    system: str = "spring"
    output_dir: str = "runs/spring"
    seed: int = 0
    targets: list = field(default_factory=lambda: ["c-10%"])
    sizes: list = field(default_factory=lambda: [10, 50, 100, 500, 1000])
    replicates: int = 10
    optimizers: list = field(default_factory=lambda: list(OPTIMIZERS))
    inits: list = field(default_factory=lambda: list(INITS))
    max_epochs: int = 100
    n_perm: int = 4999
    source: dict = None
    target: dict = None
    tuning: dict = None
    fixed: dict = None

    def __post_init__(self):
        if self.system not in ("spring", "tclab"):
            raise ConfigError(f"unknown system {self.system!r}")
        self.source = {**_default_source(self.system), **(self.source or {})}
        self.target = {**_default_target(self.system), **(self.target or {})}
        tuning = _default_tuning()
        for k, v in (self.tuning or {}).items():
            tuning[k] = {**tuning[k], **v} if isinstance(tuning.get(k), dict) else v
        self.tuning = tuning
        fixed = _default_fixed()
        for k, v in (self.fixed or {}).items():
            if k not in fixed:
                raise ConfigError(f"unknown fixed-hyperparameter group {k!r}")
            fixed[k] = {**fixed[k], **v}
        self.fixed = fixed
        for name in ("targets", "sizes", "optimizers", "inits"):
            vals = getattr(self, name)
            if not vals or len(set(map(str, vals))) != len(vals):
                raise ConfigError(f"{name} must be a non-empty list without duplicates")
        if set(self.optimizers) - set(OPTIMIZERS):
            raise ConfigError(f"optimizers must be drawn from {OPTIMIZERS}")
        if set(self.inits) - set(INITS):
            raise ConfigError(f"inits must be drawn from {INITS}")
        if self.replicates < 1 or self.max_epochs < 0 or self.n_perm < 1:
            raise ConfigError("need replicates >= 1, max_epochs >= 0, n_perm >= 1")
        if any(s <= 0 for s in self.sizes):
            raise ConfigError("sizes must be positive")
        for t in self.targets:
            target_params(self.system, t)
        if self.system == "spring":
            if self.target["test_size"] < 1 or any(int(s) != s for s in self.sizes):
                raise ConfigError("spring sizes must be integers and test_size >= 1")
        else:
            if max(self.sizes) > 24:
                raise ConfigError("TCLab sizes are hours within one day (<= 24)")
            if self.replicates > self.target["days"] - self.target["test_days"]:
                raise ConfigError("not enough target days for the requested replicates")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        return asdict(self)

    @property
    def root(self):
        """Output root; the ``SEKF_TRANSFER_OUTPUT_ROOT`` environment variable wins."""
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)

    def trials(self):
        """Grid cells in their fixed execution order."""
        return [TrialSpec(t, i, o, s, r) for t, s, i, o, r in itertools.product(
            self.targets, self.sizes, self.inits, self.optimizers, range(self.replicates))]


def load_config(path):
    try:
        with open(path) as f:
            d = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    return ExperimentConfig.from_dict(d)


def stable_seed(*parts):
    """32-bit seed from a SHA-256 digest of the JSON-encoded ``parts``."""
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:4], "little")


_SPRING_TARGET = re.compile(r"^(?:([mck])([+-]\d+(?:\.\d+)?)%|u([+-]\d+(?:\.\d+)?))$")


def target_params(system, name, param_factor=0.9):
    """Physical parameters of a named target system."""
    if system == "spring":
        base = SpringParams()
        if name == "source":
            return base
        match = _SPRING_TARGET.match(name)
        if not match:
            raise ConfigError(f"bad spring target {name!r}; use e.g. 'c-10%' or 'u+1'")
        field_, pct, force = match.groups()
        if force is not None:
            return replace(base, u=base.u + float(force))
        return replace(base, **{field_: getattr(base, field_) * (1 + float(pct) / 100)})
    if name == "source":
        return TclabParams()
    if name == "perturbed":
        return perturbed_tclab(TclabParams(), param_factor)
    raise ConfigError(f"bad TCLab target {name!r}; use 'perturbed' or 'source'")


# ---------------------------------------------------------------- data


def make_predictor(cfg):
    hidden = list(cfg.source["hidden"])
    if cfg.system == "spring":
        return MlpPredictor(NetworkSpec((2, *hidden, 20)), horizon=20, n_y=1)
    core = NetworkSpec((4, *hidden, 2))
    return NodePredictor(NodeSpec(core, n_x=2, dt_sample=10.0, substeps=cfg.source["substeps"],
                                  horizon=60, time_scale=cfg.source["time_scale"]))


def source_data(cfg):
    """Raw (un-normalized) source ``(train, val, test)``."""
    s = cfg.source
    if cfg.system == "spring":
        pool = D.build_spring_dataset(SpringParams(), s["n_points"], stable_seed(cfg.seed, "src"),
                                      s["noise_sigma"])
        test = D.build_spring_dataset(SpringParams(), s["n_test"],
                                      stable_seed(cfg.seed, "src-test"), s["noise_sigma"])
        train, val = D.split_first(pool, len(pool))
        return train, val, test.take(slice(None), "test")
    p = TclabParams()
    pool = D.build_tclab_dataset(p, s["days"] * DAY, stable_seed(cfg.seed, "src"),
                                 s["noise_sigma"], stride=s["stride"])
    test = D.build_tclab_dataset(p, s["test_days"] * DAY, stable_seed(cfg.seed, "src-test"),
                                 s["noise_sigma"], stride=cfg.target["test_stride"])
    train, val = D.split_first(pool, len(pool))
    return train, val, test.take(slice(None), "test")


def _tclab_target_run(cfg, name, tag):
    p = target_params("tclab", name, cfg.target["param_factor"])
    noise_factor = 1.0 if name == "source" else cfg.target["noise_factor"]
    days = cfg.target["days"] if tag == "main" else 1
    return D.tclab_run(p, days * DAY, stable_seed(cfg.seed, "tgt", name, tag),
                       cfg.source["noise_sigma"] * noise_factor)


def target_splits(cfg, name, replicate, tuning=False):
    """Raw ``Splits`` for one target replicate.

    Spring: replicate ``r`` is an independent block of ``max(sizes)`` candidate
    examples followed by ``test_size`` test examples.  TCLab: replicate ``r``
    uses the first hours of day ``r`` of one continuous run, the final
    ``test_days`` days are the test set.  The tuning replicate is an extra
    independent block (spring) or run (TCLab) never used for evaluation.
    """
    tag = "tune" if tuning else replicate
    if cfg.system == "spring":
        n_cand = max(cfg.sizes)
        block = n_cand + cfg.target["test_size"]
        pool = D.build_spring_dataset(target_params("spring", name), block,
                                      stable_seed(cfg.seed, "tgt", name, tag),
                                      cfg.target["noise_sigma"])
        return D.split_protocol(pool, cfg.sizes, 0, block, cfg.target["test_size"])
    return _tclab_splits(cfg, name, tag)


def _tclab_splits(cfg, name, tag):
    per_day = int(round(DAY / 10.0))
    if tag == "tune":
        _, T, Q = _tclab_target_run(cfg, name, "tune")
        day_T, day_Q = T, Q
        test_T, test_Q = T[per_day // 2:], Q[per_day // 2:]
    else:
        _, T, Q = _tclab_target_run(cfg, name, "main")
        lo = tag * per_day
        day_T, day_Q = T[lo:lo + per_day], Q[lo:lo + per_day]
        first_test = (cfg.target["days"] - cfg.target["test_days"]) * per_day
        test_T, test_Q = T[first_test:], Q[first_test:]
    x0, u, y = D.tclab_windows(test_T, test_Q, 60, cfg.target["test_stride"])
    test = D.Dataset(x0, u, y, split="test")
    by_size = {}
    for hours in cfg.sizes:
        n = int(round(hours * HOUR / 10.0))
        x0, u, y = D.tclab_windows(day_T[:n], day_Q[:n], 60, 1)
        by_size[hours] = D.split_first(D.Dataset(x0, u, y, split="pool"), len(x0))
    return D.Splits(test=test, by_size=by_size)


def physical_mse(predictor, params, ds, normalizer):
    """MSE of a normalized dataset, measured in physical target units."""
    pred = predictor.predict(params, ds.x0, ds.u)
    if not np.all(np.isfinite(pred)):
        return float("nan")
    r = (pred - ds.y) * normalizer.y_scale
    return float(np.mean(r * r))


# ---------------------------------------------------------------- source


@dataclass
class SourceArtifact:
    predictor: object
    params: np.ndarray
    normalizer: D.Normalizer
    train_loss: float
    val_loss: float
    test_loss: float
    convergence_time: float
    wall_clock: float
    meta: dict

    def to_dict(self):
        return {"predictor": self.predictor.to_dict(),
                "params": [float(v) for v in self.params],
                "normalizer": self.normalizer.to_dict(),
                "train_loss": self.train_loss, "val_loss": self.val_loss,
                "test_loss": self.test_loss, "convergence_time": self.convergence_time,
                "wall_clock": self.wall_clock, "meta": self.meta}

    @classmethod
    def from_dict(cls, d):
        return cls(predictor_from_dict(d["predictor"]), np.array(d["params"], dtype=float),
                   D.Normalizer.from_dict(d["normalizer"]), d["train_loss"], d["val_loss"],
                   d["test_loss"], d["convergence_time"], d["wall_clock"], d["meta"])

    def save(self, path):
        _atomic_write(path, json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _scale_meta(cfg):
    if cfg.system == "spring":
        desk, ref = cfg.source["n_points"], REFERENCE_SOURCE["spring"]["points"]
        return {"source_points": desk, "reference_points": ref, "scale": desk / ref}
    desk, ref = cfg.source["days"], REFERENCE_SOURCE["tclab"]["days"]
    return {"source_days": desk, "reference_days": ref, "scale": desk / ref}


def normalize_for(cfg, normalizer, *splits):
    """Apply the source normalizer (identity for the spring)."""
    return [normalizer.apply(s) for s in splits]


def train_source(cfg, out_dir=None):
    """Train the source model and persist it under ``<root>/source``.

    Divergence of the source run is fatal.
    """
    t0 = time.perf_counter()
    train_raw, val_raw, test_raw = source_data(cfg)
    if cfg.system == "spring":
        norm = D.Normalizer.identity(2, 0, 1)
    else:
        norm = D.fit_normalizer(train_raw, tie_state=True)
    train_ds, val_ds, test_ds = normalize_for(cfg, norm, train_raw, val_raw, test_raw)
    predictor = make_predictor(cfg)
    tc = TrainConfig(**{**cfg.source["train"], "seed": stable_seed(cfg.seed, "src-train")})
    res = train(predictor, predictor.init(stable_seed(cfg.seed, "src-init")), train_ds, val_ds, tc)
    if res.diverged:
        raise DivergenceError(f"source training diverged: {res.events[-1]}")
    art = SourceArtifact(
        predictor, res.params, norm,
        physical_mse(predictor, res.params, train_ds, norm),
        physical_mse(predictor, res.params, val_ds, norm),
        physical_mse(predictor, res.params, test_ds, norm),
        res.convergence_time, time.perf_counter() - t0,
        {"system": cfg.system, "seed": cfg.seed, "best_epoch": res.best_epoch,
         "epochs_run": res.epochs_run, "train_config": tc.to_dict(),
         "n_train": len(train_ds), "n_val": len(val_ds), "n_test": len(test_ds),
         "scale": _scale_meta(cfg), "backend": BACKEND})
    out = Path(out_dir) if out_dir else cfg.root / "source"
    out.mkdir(parents=True, exist_ok=True)
    art.save(out / "source.json")
    res.write_curve_csv(out / "curve.csv")
    return art


def load_or_train_source(cfg):
    path = cfg.root / "source" / "source.json"
    if path.exists():
        return SourceArtifact.load(path)
    return train_source(cfg)


# ---------------------------------------------------------------- trials


@dataclass(frozen=True)
class TrialSpec:
    target: str
    init: str
    optimizer: str
    size: float
    replicate: int

    @property
    def trial_id(self):
        t = self.target.replace("%", "pct").replace("+", "p").replace("-", "m")
        return f"{t}_{self.init}_{self.optimizer}_s{self.size:g}_r{self.replicate}"

    @property
    def cell(self):
        return (self.target, self.init, self.optimizer, self.size)

    def seed(self, cfg):
        """Training seed: unique per trial."""
        return stable_seed(cfg.seed, self.target, self.init, self.optimizer, self.size,
                           self.replicate)

    def init_seed(self, cfg):
        """Retraining initialization, shared by the optimizers of one replicate."""
        return stable_seed(cfg.seed, "init", self.target, self.size, self.replicate)


def _hyper_grid(cfg, optimizer):
    grid = cfg.tuning[optimizer]
    keys = sorted(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def _fit(cfg, predictor, init, train_ds, val_ds, optimizer, hyper, seed, max_epochs):
    common = cfg.fixed["common"]
    h = {**cfg.fixed[optimizer], **hyper}
    if optimizer == "sekf":
        sc = SekfConfig(R=common["R"], Q=h["Q"], P0=h["P0"], subset_size=common["subset_size"],
                        minibatch_size=h["minibatch_size"], max_epochs=max_epochs,
                        early_stop_patience=common["early_stop_patience"], seed=seed)
        return train_sekf(predictor, init, train_ds, val_ds, sc)
    tc = TrainConfig(learning_rate=h["learning_rate"], minibatch_size=h["minibatch_size"],
                     minibatches_per_epoch=common["minibatches_per_epoch"],
                     max_epochs=max_epochs, lr_patience=common["lr_patience"],
                     lr_factor=common["lr_factor"],
                     early_stop_patience=common["early_stop_patience"],
                     lbfgs_history=common["lbfgs_history"],
                     lbfgs_max_line_searches=common["lbfgs_max_line_searches"], seed=seed)
    return train(predictor, init, train_ds, val_ds, tc, optimizer)


def _init_params(art, spec, cfg):
    if spec.init == "finetune":
        return art.params.copy()
    return art.predictor.init(spec.init_seed(cfg))


def tune_cell(cfg, art, target, init, optimizer, size):
    """Grid search on the tuning replicate; picks the lowest best-validation loss.

    Returns ``{"hyper": ..., "candidates": [...]}``.  With tuning disabled the
    fixed defaults are returned.
    """
    if not cfg.tuning.get("enabled", True):
        return {"hyper": dict(cfg.fixed[optimizer]), "candidates": []}
    splits = _cached_splits(cfg, target, None)
    train_raw, val_raw = splits.by_size[size]
    train_ds, val_ds = normalize_for(cfg, art.normalizer, train_raw, val_raw)
    probe = TrialSpec(target, init, optimizer, size, -1)
    init_params = _init_params(art, probe, cfg)
    candidates = []
    for hyper in _hyper_grid(cfg, optimizer):
        try:
            res = _fit(cfg, art.predictor, init_params, train_ds, val_ds, optimizer, hyper,
                       probe.seed(cfg), cfg.max_epochs)
            score = float(res.best_val)
        except (DivergenceError, FloatingPointError) as exc:
            log.warning("tuning candidate %s failed: %s", hyper, exc)
            score = float("inf")
        candidates.append({"hyper": hyper, "val_loss": score})
    best = min(candidates, key=lambda c: (not np.isfinite(c["val_loss"]), c["val_loss"]))
    return {"hyper": best["hyper"], "candidates": candidates}


_CACHE = {}


def _cached_splits(cfg, target, replicate):
    key = (json.dumps(cfg.to_dict(), sort_keys=True), target, replicate)
    if key not in _CACHE:
        if len(_CACHE) > 8:
            _CACHE.clear()
        _CACHE[key] = target_splits(cfg, target, replicate, tuning=replicate is None)
    return _CACHE[key]


def _source_test_targets(cfg):
    key = (json.dumps(cfg.to_dict(), sort_keys=True), "source-test")
    if key not in _CACHE:
        _CACHE[key] = source_data(cfg)[2].y
    return _CACHE[key]


def run_trial(cfg, art, spec, hyper, source_ref=None):
    """Train one grid cell replicate and score it against the source baselines.

    Returns ``(TrialResult, metrics)``; ``metrics`` holds the derived scores
    (gap, normalized MSE and time, cosine similarity, data distance).
    """
    splits = _cached_splits(cfg, spec.target, spec.replicate)
    train_raw, val_raw = splits.by_size[spec.size]
    train_ds, val_ds, test_ds = normalize_for(cfg, art.normalizer, train_raw, val_raw,
                                              splits.test)
    init = _init_params(art, spec, cfg)
    seed = spec.seed(cfg)
    res = _fit(cfg, art.predictor, init, train_ds, val_ds, spec.optimizer, hyper, seed,
               cfg.max_epochs)
    pred, norm = art.predictor, art.normalizer
    result = TrialResult(
        train_loss=physical_mse(pred, res.params, train_ds, norm),
        val_loss=physical_mse(pred, res.params, val_ds, norm),
        test_loss=physical_mse(pred, res.params, test_ds, norm),
        convergence_time=res.convergence_time,
        metadata={"system": cfg.system, "target": spec.target, "init": spec.init,
                  "optimizer": spec.optimizer, "size": spec.size,
                  "replicate": spec.replicate, "seed": seed,
                  "init_seed": spec.init_seed(cfg) if spec.init == "retrain" else None,
                  "hyper": hyper, "n_train": len(train_ds), "n_val": len(val_ds),
                  "n_test": len(test_ds), "source_artifact": source_ref,
                  "scale": art.meta.get("scale"), "backend": BACKEND},
        final_params=res.params, source_params=None, epochs_run=res.epochs_run,
        best_epoch=res.best_epoch, diverged=res.diverged, events=list(res.events))
    src_y = _source_test_targets(cfg)
    metrics = {
        "gap": train_test_gap(result),
        "normalized_mse": normalized_mse(result, art.test_loss),
        "normalized_time": normalized_convergence_time(result, art.convergence_time),
        "cosine": cosine_similarity(art.params, res.params),
        "wasserstein": wasserstein_1d(src_y.reshape(-1, src_y.shape[-1]),
                                      splits.test.y.reshape(-1, splits.test.y.shape[-1])),
    }
    return result, metrics


# ---------------------------------------------------------------- grid


def _atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    with os.fdopen(fd, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _cell_name(cell):
    return TrialSpec(*cell[:3], cell[3], 0).trial_id.rsplit("_r", 1)[0]


def _tune_job(args):
    cfg_d, art_path, cell, out_path = args
    cfg = ExperimentConfig.from_dict(cfg_d)
    art = SourceArtifact.load(art_path)
    out = tune_cell(cfg, art, *cell)
    _atomic_write(out_path, json.dumps(out, indent=1))
    return cell, out["hyper"]


def _trial_job(args):
    cfg_d, art_path, spec_d, hyper, out_path = args
    cfg = ExperimentConfig.from_dict(cfg_d)
    spec = TrialSpec(**spec_d)
    try:
        art = SourceArtifact.load(art_path)
        result, metrics = run_trial(cfg, art, spec, hyper, str(art_path))
        record = {"status": "ok", "trial_id": spec.trial_id, "result": result.to_record(),
                  "metrics": metrics}
    except Exception as exc:  # trial isolation: record and carry on
        log.exception("trial %s failed", spec.trial_id)
        record = {"status": "failed", "trial_id": spec.trial_id, "spec": spec_d,
                  "error": f"{type(exc).__name__}: {exc}"}
    _atomic_write(out_path, json.dumps(record))
    return record["status"]


def _run_jobs(fn, jobs, n_workers):
    if n_workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(fn, jobs))


@dataclass
class GridSummary:
    executed: int
    skipped: int
    failed: int
    results_csv: Path


def run_grid(cfg, jobs=1, resume=True):
    """Run (or resume) every trial of the grid, then write ``results.csv``.

    Completed trial files are skipped when ``resume`` is set; failed trials
    are retried.  Trial ordering and seeds depend only on the configuration.
    """
    root = cfg.root
    root.mkdir(parents=True, exist_ok=True)
    _atomic_write(root / "config.json", json.dumps(cfg.to_dict(), indent=1))
    load_or_train_source(cfg)
    art_path = root / "source" / "source.json"
    trial_dir = root / "trials"
    todo, skipped = [], 0
    for spec in cfg.trials():
        path = trial_dir / f"{spec.trial_id}.json"
        if resume and _read_status(path) == "ok":
            skipped += 1
        else:
            todo.append(spec)
    cells = sorted({s.cell for s in todo}, key=lambda c: [str(v) for v in c])
    tune_jobs, hypers = [], {}
    for cell in cells:
        path = root / "tuning" / f"{_cell_name(cell)}.json"
        if path.exists():
            with open(path) as f:
                hypers[cell] = json.load(f)["hyper"]
        else:
            tune_jobs.append((cfg.to_dict(), str(art_path), cell, str(path)))
    for cell, hyper in _run_jobs(_tune_job, tune_jobs, jobs):
        hypers[tuple(cell)] = hyper
    trial_jobs = [(cfg.to_dict(), str(art_path), asdict(s), hypers[s.cell],
                   str(trial_dir / f"{s.trial_id}.json")) for s in todo]
    statuses = _run_jobs(_trial_job, trial_jobs, jobs)
    csv_path = write_results_csv(root)
    return GridSummary(len(todo), skipped, statuses.count("failed"), csv_path)


def _read_status(path):
    try:
        with open(path) as f:
            return json.load(f).get("status")
    except (OSError, json.JSONDecodeError):
        return None


RESULT_COLUMNS = ["trial_id", "status", "system", "target", "init", "optimizer", "size",
                  "replicate", "seed", "train_loss", "val_loss", "test_loss", "gap",
                  "normalized_mse", "convergence_time", "normalized_time", "cosine",
                  "wasserstein", "epochs_run", "best_epoch", "diverged", "error"]


def load_records(root):
    """All trial records under ``<root>/trials`` in trial-id order."""
    recs = []
    for path in sorted((Path(root) / "trials").glob("*.json")):
        with open(path) as f:
            recs.append(json.load(f))
    return recs


def flat_row(rec):
    if rec["status"] != "ok":
        row = {"trial_id": rec["trial_id"], "status": rec["status"], "error": rec["error"]}
        row.update({k: rec["spec"][k] for k in ("target", "init", "optimizer", "size",
                                                 "replicate")})
        return row
    r, m = rec["result"], rec["metrics"]
    row = {"trial_id": rec["trial_id"], "status": "ok", "error": ""}
    row.update({k: r["metadata"][k] for k in ("system", "target", "init", "optimizer", "size",
                                               "replicate", "seed")})
    row.update({k: r[k] for k in ("train_loss", "val_loss", "test_loss", "convergence_time",
                                   "epochs_run", "best_epoch", "diverged")})
    row.update({k: m[k] for k in ("gap", "normalized_mse", "normalized_time", "cosine",
                                   "wasserstein")})
    return row


def write_results_csv(root):
    path = Path(root) / "results.csv"
    rows = [flat_row(r) for r in load_records(root)]
    fd, tmp = tempfile.mkstemp(dir=root, prefix=".tmp-", suffix=".csv")
    with os.fdopen(fd, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=RESULT_COLUMNS, restval="")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    os.replace(tmp, path)
    return path


def read_results_csv(path):
    """Rows of ``results.csv`` with numeric columns parsed."""
    numeric = {"size", "train_loss", "val_loss", "test_loss", "gap", "normalized_mse",
               "convergence_time", "normalized_time", "cosine", "wasserstein"}
    rows = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            for k in numeric:
                if row.get(k) not in (None, ""):
                    row[k] = float(row[k])
            rows.append(row)
    return rows


ANOVA_OUTCOMES = ("normalized_mse", "gap", "normalized_time")
ANOVA_FACTORS = ("size", "init", "optimizer", "target")


def report(root, anova=True, layer_changes=False, n_perm=4999, seed=0):
    """Write ``anova.csv`` and/or ``layer_changes.csv`` from the trial records."""
    root = Path(root)
    rows = [r for r in read_results_csv(root / "results.csv") if r["status"] == "ok"]
    written = {}
    if anova:
        factors = [f for f in ANOVA_FACTORS if len({r[f] for r in rows}) > 1]
        report_rows = anova_report(rows, ANOVA_OUTCOMES, factors, n_perm, seed)
        write_anova_csv(root / "anova.csv", report_rows)
        written["anova"] = root / "anova.csv"
    if layer_changes:
        art = SourceArtifact.load(root / "source" / "source.json")
        path = root / "layer_changes.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["trial_id", "init", "optimizer", "size", "layer", "count", "n_changed",
                        "mean_abs", "max_abs", "hist_counts", "hist_edges"])
            for rec in load_records(root):
                if rec["status"] != "ok":
                    continue
                md = rec["result"]["metadata"]
                final = np.array(rec["result"]["final_params"], dtype=float)
                for L in layer_change_report(art.predictor.net, art.params, final):
                    w.writerow([rec["trial_id"], md["init"], md["optimizer"], md["size"],
                                L["layer"], L["count"], L["n_changed"], repr(L["mean_abs"]),
                                repr(L["max_abs"]), json.dumps(L["histogram"]["counts"]),
                                json.dumps(L["histogram"]["edges"])])
        written["layer_changes"] = path
    return written


def median_by(rows, key, value, **where):
    """Median of ``value`` over rows matching ``where``, grouped by ``key``."""
    groups = {}
    for r in rows:
        if all(r.get(k) == v for k, v in where.items()):
            groups.setdefault(r[key], []).append(r[value])
    return {k: float(np.median(v)) for k, v in groups.items()}


def ratio_closeness(ratio):
    """Distance of a ratio from 1 on a log scale."""
    return abs(math.log(ratio))
