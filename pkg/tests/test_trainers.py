import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sekf_transfer import ContractError, DivergenceError
from sekf_transfer.datasets import Dataset, build_spring_dataset, split_first
from sekf_transfer.nn_core import NetworkSpec
from sekf_transfer.node_model import NodeSpec
from sekf_transfer.predictors import MlpPredictor, NodePredictor
from sekf_transfer.systems import SpringParams
from sekf_transfer.trainers import (AdamState, LbfgsHistory, TrainConfig, adam_subset_step,
                                    grad_loss, lbfgs_step, mse_loss, subset_indices, train)


@pytest.fixture(scope="module")
def spring_task():
    pred = MlpPredictor(NetworkSpec((2, 8, 20)), 20, 1)
    tr, va = split_first(build_spring_dataset(SpringParams(), 60, seed=5), 60)
    return pred, tr, va


def node_task(rng):
    pred = NodePredictor(NodeSpec(NetworkSpec((3, 5, 2)), n_x=2, dt_sample=0.5, substeps=2,
                                  horizon=4))
    ds = Dataset(rng.normal(size=(6, 2)), rng.normal(size=(6, 4, 1)), rng.normal(size=(6, 4, 2)))
    return pred, ds


def test_mse_zero_at_exact_fit(spring_task, rng):
    pred, tr, _ = spring_task
    p = pred.init(0)
    fit = Dataset(tr.x0, tr.u, pred.predict(p, tr.x0, tr.u))
    assert mse_loss(pred, p, fit) == 0.0
    loss, g = grad_loss(pred, p, fit)
    assert loss == 0.0 and np.linalg.norm(g) < 1e-10


def test_mse_one_hot_residual(spring_task):
    pred, tr, _ = spring_task
    p = pred.init(0)
    one = tr.take(slice(0, 1))
    y = pred.predict(p, one.x0, one.u).copy()
    y[0, 0, 0] += 1.0
    assert mse_loss(pred, p, Dataset(one.x0, one.u, y)) == pytest.approx(1 / 20, rel=1e-12)


def test_mse_matches_loop_oracle(spring_task, rng):
    pred, tr, _ = spring_task
    p = rng.normal(size=pred.n_params) * 0.3
    P = pred.predict(p, tr.x0, tr.u)
    total = 0.0
    for i in range(len(tr)):
        for k in range(tr.horizon):
            total += (P[i, k, 0] - tr.y[i, k, 0]) ** 2
    assert mse_loss(pred, p, tr) == pytest.approx(total / (len(tr) * 20), rel=1e-12)


def test_mse_rejects_empty_and_nonfinite(spring_task):
    pred, tr, _ = spring_task
    with pytest.raises(ContractError):
        mse_loss(pred, pred.init(0), tr.take(slice(0, 0)))
    p = pred.init(0)
    p[-1] = np.inf
    with pytest.raises(DivergenceError):
        mse_loss(pred, p, tr)


def test_gradient_directional_fd(spring_task, rng):
    pred, tr, _ = spring_task
    p = rng.normal(size=pred.n_params) * 0.5
    _, g = grad_loss(pred, p, tr)
    for _ in range(5):
        d = rng.normal(size=p.size)
        h = 1e-6
        fd = (mse_loss(pred, p + h * d, tr) - mse_loss(pred, p - h * d, tr)) / (2 * h)
        assert g @ d == pytest.approx(fd, rel=1e-5)


@pytest.mark.parametrize("kind", ["mlp", "node"])
def test_gradient_equals_jacobian_contraction(spring_task, rng, kind):
    if kind == "mlp":
        pred, ds, _ = spring_task
    else:
        pred, ds = node_task(rng)
    p = rng.normal(size=pred.n_params) * 0.5
    P, J = pred.jacobian(p, ds.x0, ds.u)
    r = (P - ds.y).reshape(len(ds), -1)
    expected = 2.0 / r.size * np.einsum("nrp,nr->p", J, r)
    np.testing.assert_allclose(grad_loss(pred, p, ds)[1], expected, rtol=1e-10, atol=1e-13)


def test_gradient_linear_in_residual(spring_task, rng):
    pred, tr, _ = spring_task
    p = rng.normal(size=pred.n_params) * 0.5
    P = pred.predict(p, tr.x0, tr.u)
    doubled = Dataset(tr.x0, tr.u, P - 2.0 * (P - tr.y))
    np.testing.assert_allclose(grad_loss(pred, p, doubled)[1], 2 * grad_loss(pred, p, tr)[1],
                               rtol=1e-11, atol=1e-14)


def textbook_adam(params, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        params = params - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return params


def test_adam_full_set_is_textbook(rng):
    p = rng.normal(size=7)
    grads = [rng.normal(size=7) for _ in range(5)]
    state, q = AdamState.zeros(7), p.copy()
    for g in grads:
        q = adam_subset_step(state, q, g, 1e-2, 1.0)
    np.testing.assert_allclose(q, textbook_adam(p, grads, 1e-2), rtol=1e-14, atol=1e-15)


def test_adam_single_entry(rng):
    p = rng.normal(size=10)
    g = np.zeros(10)
    g[6] = 3.0
    new = adam_subset_step(AdamState.zeros(10), p, g, 0.1, q=0.1)
    changed = np.flatnonzero(new != p)
    np.testing.assert_array_equal(changed, [6])


@given(st.integers(0, 2 ** 31 - 1), st.floats(0.01, 1.0))
def test_adam_masked_entries_bit_exact(seed, q):
    rng = np.random.default_rng(seed)
    n = 40
    state, p = AdamState.zeros(n), rng.normal(size=n)
    for _ in range(3):
        g = rng.normal(size=n)
        new = adam_subset_step(state, p, g, 1e-2, q)
        k = int(np.ceil(q * n))
        keep = np.ones(n, bool)
        keep[subset_indices(np.abs(g), k)] = False
        np.testing.assert_array_equal(new[keep], p[keep])
        assert np.count_nonzero(new != p) <= k
        p = new
    assert state.t == 3


def test_adam_rejects_bad_fraction():
    with pytest.raises(ContractError):
        adam_subset_step(AdamState.zeros(3), np.zeros(3), np.ones(3), 0.1, q=0.0)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=30), st.integers(1, 30))
def test_subset_indices_match_stable_sort(values, k):
    scores = np.array(values, dtype=float)
    k = min(k, scores.size)
    expected = np.sort(np.argsort(-scores, kind="stable")[:k])
    np.testing.assert_array_equal(subset_indices(scores, k), expected)


def test_subset_ties_prefer_lower_index():
    np.testing.assert_array_equal(subset_indices(np.array([1.0, 2.0, 2.0, 2.0, 0.5]), 2), [1, 2])


def quadratic(A, b):
    def f(x):
        return 0.5 * x @ A @ x - b @ x, A @ x - b
    return f


def test_lbfgs_quadratic_minimizer():
    A = np.array([[3.0, 0.8], [0.8, 1.0]])
    b = np.array([1.0, -2.0])
    f = quadratic(A, b)
    hist, x = LbfgsHistory(10), np.array([4.0, 4.0])
    losses = [f(x)[0]]
    for _ in range(20):
        x, loss, g = lbfgs_step(hist, x, f, lr=1.0)
        losses.append(loss)
        if np.linalg.norm(g) < 1e-12:
            break
    np.testing.assert_allclose(x, np.linalg.solve(A, b), atol=1e-8)
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_lbfgs_first_direction_is_normalized_gradient():
    g = np.array([3.0, -4.0])
    np.testing.assert_allclose(LbfgsHistory().direction(g), [-0.6, 0.8])


def test_lbfgs_history_bounded():
    hist = LbfgsHistory(3)
    for i in range(5):
        hist.push(np.ones(2) * i, np.ones(2))
    assert len(hist.s) == 3 and hist.s[0][0] == 2


def test_lbfgs_line_search_failure_falls_back(rng):
    events = []
    hist = LbfgsHistory()
    hist.push(np.ones(2), np.ones(2))
    x = np.array([1.0, 1.0])
    f = lambda p: (float(p @ p), 2 * p)
    new, _, _ = lbfgs_step(hist, x, f, lr=0.25, loss_only=lambda p: np.inf, events=events)
    np.testing.assert_allclose(new, x - 0.25 * 2 * x)
    assert events and "line search" in events[0]
    assert len(hist.s) == 0 or np.allclose(hist.s[-1], new - x)


def test_lbfgs_skips_negative_curvature():
    f = lambda p: (-float(p @ p), -2 * p)  # concave
    hist = LbfgsHistory()
    lbfgs_step(hist, np.array([1.0, 0.5]), f, lr=0.1)
    assert len(hist.s) == 0


def test_train_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(lr_factor=1.0)
    with pytest.raises(ContractError):
        TrainConfig(adam_subset_fraction=1.5)
    with pytest.raises(ContractError):
        TrainConfig(minibatch_size=0)


def test_zero_epochs_returns_init(spring_task):
    pred, tr, va = spring_task
    init = pred.init(4)
    for opt in ("adam", "lbfgs"):
        r = train(pred, init, tr, va, TrainConfig(max_epochs=0), opt)
        np.testing.assert_array_equal(r.params, init)
        assert r.epochs_run == 0 and r.best_epoch == 0 and r.convergence_time == 0.0
        assert r.best_val == mse_loss(pred, init, va)


GOLDEN_ADAM = [
    (0.8775385657678043, 0.9715300113501343), (0.7555982875803764, 0.8551051898727386),
    (0.6713104521171086, 0.8204570847774642), (0.6122864344829443, 0.8056845323112587),
    (0.5618625867660408, 0.7538090911773074), (0.5178723131471122, 0.6910795795750282),
    (0.4811654248664402, 0.647420112850129)]


def test_adam_golden_curve(spring_task):
    pred, tr, va = spring_task
    cfg = TrainConfig(learning_rate=1e-2, minibatch_size=8, minibatches_per_epoch=5,
                      max_epochs=6, seed=2)
    r = train(pred, pred.init(1), tr, va, cfg)
    got = [(a, b) for _, a, b, _, _ in r.curve]
    np.testing.assert_allclose(got, GOLDEN_ADAM, rtol=1e-9)


@pytest.mark.parametrize("opt", ["adam", "lbfgs"])
def test_training_deterministic_and_best_val(spring_task, opt):
    pred, tr, va = spring_task
    cfg = TrainConfig(learning_rate=1e-2, minibatch_size=8, minibatches_per_epoch=5,
                      max_epochs=8, seed=3)
    a = train(pred, pred.init(1), tr, va, cfg, opt)
    b = train(pred, pred.init(1), tr, va, cfg, opt)
    assert [r[:4] for r in a.curve] == [r[:4] for r in b.curve]
    np.testing.assert_array_equal(a.params, b.params)
    vals = [row[2] for row in a.curve]
    assert a.best_val == min(vals) <= vals[0]
    assert a.best_epoch == int(np.argmin(vals))
    assert mse_loss(pred, a.params, va) == a.best_val


def test_plateau_decay_and_early_stop(spring_task):
    pred, tr, va = spring_task
    # steps vanish below float resolution, so val never improves
    cfg = TrainConfig(learning_rate=1e-300, minibatch_size=4, minibatches_per_epoch=1,
                      max_epochs=50, lr_patience=2, lr_factor=0.5, early_stop_patience=5,
                      seed=0)
    r = train(pred, pred.init(1), tr, va, cfg)
    assert r.epochs_run < 50
    lrs = [row[3] for row in r.curve]
    assert min(lrs) < 1e-300


class FlakyPredictor(MlpPredictor):
    """Predicts NaN once ``budget`` predictions have been made."""

    def __init__(self, base, budget):
        super().__init__(base.spec, base.horizon, base.n_y)
        self.budget = budget

    def predict(self, params, x0, u):
        self.budget -= 1
        out = super().predict(params, x0, u)
        return out * np.nan if self.budget < 0 else out


def test_divergence_gives_partial_result(spring_task):
    pred, tr, va = spring_task
    flaky = FlakyPredictor(pred, budget=40)
    cfg = TrainConfig(minibatch_size=4, minibatches_per_epoch=5, max_epochs=20, seed=0)
    r = train(flaky, pred.init(0), tr, va, cfg)
    assert r.diverged and r.epochs_run < 20 and "diverged" in r.events[-1]
    assert np.all(np.isfinite(r.params))


def test_finetune_zero_epochs_reproduces_source_loss(spring_task):
    pred, tr, va = spring_task
    src = train(pred, pred.init(1), tr, va, TrainConfig(learning_rate=1e-2, max_epochs=3,
                                                         minibatches_per_epoch=5))
    test = build_spring_dataset(SpringParams(), 30, seed=99)
    r = train(pred, src.params, tr, va, TrainConfig(max_epochs=0))
    assert mse_loss(pred, r.params, test) == mse_loss(pred, src.params, test)


def test_curve_csv(tmp_path, spring_task):
    pred, tr, va = spring_task
    r = train(pred, pred.init(0), tr, va, TrainConfig(max_epochs=2, minibatches_per_epoch=2))
    r.write_curve_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,lr,wall_clock_s" and len(lines) == 4
