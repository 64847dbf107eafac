"""End-to-end acceptance checks, one test per criterion.

Each test records a ``PASS``/``FAIL`` line that is echoed in the terminal
summary.  Criteria 3 to 6 share one desk-scale spring grid; set
``SEKF_TRANSFER_DESK_DIR`` to reuse (or resume) a grid directory.
"""
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from sekf_transfer import experiments as E
from sekf_transfer.datasets import Dataset
from sekf_transfer.nn_core import NetworkSpec, forward, jacobian_params
from sekf_transfer.node_model import NodeSpec, horizon_jacobian
from sekf_transfer.predictors import MlpPredictor
from sekf_transfer.sekf import CovarianceState, SekfConfig, sekf_update
from sekf_transfer.stats import FactorTable, one_way_f, permutation_anova
from sekf_transfer.systems import HeaterSchedule, SpringParams, TclabParams, simulate_spring, \
    simulate_tclab

from test_node_model import central_fd_node, fd_rel_error
from test_nn_core import central_fd
from test_sekf import LinearPredictor, dense_ekf, linear_batch
from test_systems import spring_closed_form, tclab_steady_state

HERE = Path(__file__).resolve().parent


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_numerical_kernels():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    mlp_err = node_err = 0.0
    for _ in range(20):
        widths = tuple(int(w) for w in rng.integers(1, 7, size=rng.integers(3, 5)))
        spec = NetworkSpec(widths)
        p, x = rng.normal(size=spec.n_params), rng.normal(size=widths[0])
        mlp_err = max(mlp_err, fd_rel_error(jacobian_params(spec, p, x),
                                            central_fd(lambda q: forward(spec, q, x), p), 1e-8))
        nspec = NodeSpec(NetworkSpec((3, int(rng.integers(2, 10)), 2)), n_x=2, dt_sample=0.5,
                         substeps=int(rng.integers(1, 4)), horizon=int(rng.integers(1, 6)))
        q, x0 = rng.normal(size=nspec.n_params), rng.normal(size=2)
        u = rng.normal(size=(nspec.horizon, 1))
        node_err = max(node_err, fd_rel_error(horizon_jacobian(nspec, q, x0, u),
                                              central_fd_node(nspec, q, x0, u)))
    spring_err = 0.0
    for sp in (SpringParams(), SpringParams(c=2.0), SpringParams(c=2.5), SpringParams(u=1.0)):
        for x0, v0 in [(1.0, 0.0), (-4.2, 3.7), (5.0, -5.0)]:
            t, x, _ = simulate_spring(sp, x0, v0, 20.0, dt=0.05)
            spring_err = max(spring_err, np.max(np.abs(x - spring_closed_form(sp, x0, v0, t))))
    tp, tclab_err = TclabParams(), 0.0
    for q1, q2 in [(100, 0), (0, 100), (40, 75)]:
        _, T, _ = simulate_tclab(tp, (tp.T_inf, tp.T_inf), HeaterSchedule.constant(q1, q2),
                                 6 * 3600.0)
        tclab_err = max(tclab_err, np.max(np.abs(T[-1] - tclab_steady_state(tp, q1, q2))))
    dt = time.perf_counter() - t0
    record(1, mlp_err < 1e-5 and node_err < 1e-4 and spring_err < 1e-6 and tclab_err < 1e-4
           and dt < 60,
           f"mlp fd {mlp_err:.1e}, node fd {node_err:.1e}, spring {spring_err:.1e}, "
           f"tclab {tclab_err:.1e} K, {dt:.1f} s")


def test_criterion_2_sekf_correctness():
    t0 = time.perf_counter()
    theta, P0, Q, R, h, y = 0.3, 1.0, 1e-4, 0.01, 2.0, 1.1
    K = (P0 + Q) * h / (h * h * (P0 + Q) + R)
    new, cov, _ = sekf_update(LinearPredictor(1), np.array([theta]),
                              CovarianceState.isotropic(1, P0), linear_batch([[h]], [y]),
                              SekfConfig(R=R, Q=Q, P0=P0, subset_size=1))
    scalar_err = max(abs(new[0] - (theta + K * (y - h * theta))),
                     abs(cov.diag[0] - (1 - K * h) * (P0 + Q)))
    rng = np.random.default_rng(7)
    n, d = 6, 3
    X, yv, th = rng.normal(size=(d, n)), rng.normal(size=d), rng.normal(size=n)
    new, cov, _ = sekf_update(LinearPredictor(n), th, CovarianceState.isotropic(n, 0.5),
                              linear_batch(X, yv),
                              SekfConfig(R=0.05, Q=1e-3, P0=0.5, subset_size=n, minibatch_size=d))
    ref_th, ref_P = dense_ekf(th, 0.5 * np.eye(n), X, yv, 1e-3, 0.05)
    dense_err = max(np.max(np.abs(new - ref_th)), np.max(np.abs(cov.diag - np.diag(ref_P))))
    pred = MlpPredictor(NetworkSpec((2, 8, 20)), 20, 1)
    p = pred.init(0)
    worst = 0
    for m in (1, 5, 40):
        batch = Dataset(rng.normal(size=(4, 2)), np.zeros((4, 20, 0)), rng.normal(size=(4, 20, 1)))
        moved, _, _ = sekf_update(pred, p, CovarianceState.isotropic(p.size, 1.0), batch,
                                  SekfConfig(subset_size=m, minibatch_size=4))
        worst = max(worst, np.count_nonzero(moved != p) - m)
    dt = time.perf_counter() - t0
    record(2, scalar_err <= 1e-12 and dense_err <= 1e-12 and worst <= 0 and dt < 60,
           f"scalar {scalar_err:.1e}, dense first step {dense_err:.1e}, "
           f"max changed - m = {worst}, {dt:.1f} s")


@pytest.fixture(scope="module")
def desk_grid(tmp_path_factory):
    root = os.environ.get("SEKF_TRANSFER_DESK_DIR") or tmp_path_factory.mktemp("desk")
    cfg = E.ExperimentConfig.from_dict({"output_dir": str(root), "targets": ["c-10%"],
                                        "sizes": [10, 1000], "replicates": 10})
    old = os.environ.pop(E.OUTPUT_ENV, None)
    try:
        t0 = time.perf_counter()
        summary = E.run_grid(cfg)
        elapsed = time.perf_counter() - t0
    finally:
        if old is not None:
            os.environ[E.OUTPUT_ENV] = old
    rows = [r for r in E.read_results_csv(summary.results_csv) if r["status"] == "ok"]
    return {"rows": rows, "elapsed": elapsed, "summary": summary, "root": Path(root)}


def test_criterion_3_finetune_beats_retrain(desk_grid):
    rows = desk_grid["rows"]
    med = E.median_by(rows, "init", "normalized_mse", size=10)
    ratio = med["finetune"] / med["retrain"]
    opts = {r["optimizer"] for r in rows if r["size"] == 10}
    n10 = sum(r["size"] == 10 for r in rows)
    s = desk_grid["summary"]
    minutes = desk_grid["elapsed"] / 60
    ok = (med["finetune"] < med["retrain"] and ratio <= 0.5 and opts == set(E.OPTIMIZERS)
          and n10 == 60 and s.failed == 0 and minutes <= 30)
    record(3, ok, f"median normalized MSE at 10: finetune {med['finetune']:.3g}, retrain "
                  f"{med['retrain']:.3g}, ratio {ratio:.3f}; grid {minutes:.1f} min "
                  f"({s.executed} run, {s.skipped} resumed)")


def test_criterion_4_cosine_similarity(desk_grid):
    rows = desk_grid["rows"]
    ft = np.mean([r["cosine"] for r in rows if r["init"] == "finetune"])
    rt = np.mean([r["cosine"] for r in rows if r["init"] == "retrain"])
    record(4, ft >= 0.98 and rt <= 0.95, f"mean cosine finetune {ft:.4f}, retrain {rt:.4f}")


def test_criterion_5_regularization(desk_grid):
    rows = desk_grid["rows"]
    gap = E.median_by(rows, "init", "gap", size=10)
    F, p = permutation_anova(FactorTable.from_records(rows, ["init"], "gap"), "init", 4999, 0)
    record(5, gap["finetune"] < gap["retrain"] and p <= 0.05,
           f"median gap at 10: finetune {gap['finetune']:.3g}, retrain {gap['retrain']:.3g}; "
           f"ANOVA(gap ~ init) F {F:.2f}, p {p:.1e}")


def test_criterion_6_gap_closing(desk_grid):
    rows = desk_grid["rows"]
    close = {}
    for size in (10, 1000):
        med = E.median_by(rows, "init", "normalized_mse", size=size)
        close[size] = E.ratio_closeness(med["finetune"] / med["retrain"])
    record(6, close[1000] * 3 <= close[10],
           f"|log ratio| at 10: {close[10]:.3f}, at 1000: {close[1000]:.3f} "
           f"({close[10] / max(close[1000], 1e-300):.1f}x closer)")


def test_criterion_7_statistics():
    values = np.concatenate([np.linspace(0, 1, 20), np.linspace(5, 6, 20)])
    _, p = permutation_anova(FactorTable({"g": np.repeat(["a", "b"], 20)}, values), "g", 4999)
    F = one_way_f([1, 2, 3, 4, 6, 8], ["x"] * 3 + ["y"] * 3)
    record(7, p == 2e-4 and abs(F - 9.6) <= 1e-10,
           f"separated p = {p:g} (floor 2e-4), hand F error {abs(F - 9.6):.1e}")


def test_criterion_8_property_suites():
    suites = sorted(str(p) for p in HERE.glob("test_*.py") if p.name != "test_acceptance.py")
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           *suites], cwd=HERE.parent, capture_output=True, text=True)
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    record(8, proc.returncode == 0, f"{len(suites)} suites: {tail}")
