import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sekf_transfer import ContractError
from sekf_transfer.datasets import (Dataset, Normalizer, build_spring_dataset,
                                    build_tclab_dataset, fit_normalizer, read_dataset,
                                    split_first, split_protocol, tclab_run, tclab_windows,
                                    write_dataset)
from sekf_transfer.systems import SpringParams, TclabParams, simulate_spring


def indexed_pool(n, horizon=3):
    """Pool whose first x0 column is the example index."""
    x0 = np.column_stack([np.arange(n, dtype=float), np.zeros(n)])
    return Dataset(x0, np.zeros((n, horizon, 0)), np.zeros((n, horizon, 1)), split="pool")


def test_spring_dataset_shape_and_ranges():
    ds = build_spring_dataset(SpringParams(), 10, seed=3)
    assert len(ds) == 10 and ds.horizon == 20
    assert ds.x0.shape == (10, 2) and ds.u.shape == (10, 20, 0) and ds.y.shape == (10, 20, 1)
    assert np.all(np.abs(ds.x0) <= 5.0)
    ex = ds[0]
    assert ex.target.shape == (20, 1) and ex.u_seq.shape == (20, 0)


def test_spring_noise_free_targets_are_simulated_positions():
    p = SpringParams()
    ds = build_spring_dataset(p, 4, seed=1, noise_sigma=0.0)
    _, x, _ = simulate_spring(p, ds.x0[0, 0], ds.x0[0, 1], 20.0, sample_interval=1.0)
    np.testing.assert_array_equal(ds.y[0, :, 0], x[1:21])


def test_spring_dataset_deterministic():
    a = build_spring_dataset(SpringParams(), 50, seed=9)
    b = build_spring_dataset(SpringParams(), 50, seed=9)
    c = build_spring_dataset(SpringParams(), 50, seed=10)
    np.testing.assert_array_equal(a.x0, b.x0)
    np.testing.assert_array_equal(a.y, b.y)
    assert np.any(a.x0 != c.x0)


def test_spring_dataset_needs_examples():
    with pytest.raises(ContractError):
        build_spring_dataset(SpringParams(), 0, seed=0)


def test_tclab_half_hour_window_count():
    ds = build_tclab_dataset(TclabParams(), 1800.0, seed=0)
    assert len(ds) == 180 - 60
    assert ds.x0.shape == (120, 2) and ds.u.shape == (120, 60, 2) and ds.y.shape == (120, 60, 2)


def test_tclab_window_alignment():
    _, T, Q = tclab_run(TclabParams(), 3600.0, seed=4)
    x0, u, y = tclab_windows(T, Q, horizon=60, stride=1)
    for i in (0, 17, len(x0) - 1):
        np.testing.assert_array_equal(x0[i], T[i])
        np.testing.assert_array_equal(y[i, 0], T[i + 1])
        np.testing.assert_array_equal(u[i], Q[i:i + 60])


@pytest.mark.parametrize("n_samples", [180, 360, 8640])
def test_tclab_stride_sixty_count(n_samples):
    T, Q = np.zeros((n_samples, 2)), np.zeros((n_samples, 2))
    x0, _, _ = tclab_windows(T, Q, 60, 60)
    assert len(x0) == (n_samples - 60) // 60


def test_tclab_insufficient_duration():
    with pytest.raises(ContractError):
        build_tclab_dataset(TclabParams(), 600.0, seed=0)


def test_split_first_ten():
    tr, va = split_first(indexed_pool(20), 10)
    assert (len(tr), len(va)) == (9, 1)
    assert tr.split == "train" and va.split == "val"
    np.testing.assert_array_equal(va.x0[:, 0], [9])


@given(st.integers(1, 2000))
def test_split_first_counts(size):
    tr, va = split_first(indexed_pool(size), size)
    assert len(tr) == int(np.ceil(0.9 * size - 1e-9)) and len(tr) + len(va) == size


def test_split_protocol_disjoint_replicates_and_test():
    pool = indexed_pool(3 * 100)
    a = split_protocol(pool, [10, 50], replicate=0, block_size=100, test_size=40)
    b = split_protocol(pool, [10, 50], replicate=1, block_size=100, test_size=40)
    ids = lambda d: set(d.x0[:, 0].astype(int))
    for s in (a, b):
        tr, va = s.by_size[50]
        assert not (ids(tr) | ids(va)) & ids(s.test)
        assert ids(tr).isdisjoint(ids(va))
        assert len(s.test) == 40 and s.test.split == "test"
    all_a = ids(a.test) | ids(a.by_size[50][0]) | ids(a.by_size[50][1])
    all_b = ids(b.test) | ids(b.by_size[50][0]) | ids(b.by_size[50][1])
    assert all_a.isdisjoint(all_b)
    # smaller sizes are prefixes of larger ones
    np.testing.assert_array_equal(a.by_size[10][0].x0, a.by_size[50][0].x0[:9])


def test_split_protocol_size_too_large():
    with pytest.raises(ContractError):
        split_protocol(indexed_pool(100), [70], 0, 100, 40)
    with pytest.raises(ContractError):
        split_protocol(indexed_pool(100), [10], 1, 100, 40)


def test_normalizer_standardizes_train(rng):
    ds = Dataset(rng.normal(300, 20, (50, 2)), rng.uniform(0, 100, (50, 4, 2)),
                 rng.normal(310, 15, (50, 4, 2)))
    norm = fit_normalizer(ds)
    z = norm.apply(ds)
    for a in (z.x0, z.u.reshape(-1, 2), z.y.reshape(-1, 2)):
        assert np.max(np.abs(a.mean(axis=0))) < 1e-10
        np.testing.assert_allclose(a.std(axis=0), 1.0, atol=1e-10)
    back = norm.invert(z)
    for k in ("x0", "u", "y"):
        np.testing.assert_allclose(getattr(back, k), getattr(ds, k), rtol=1e-12, atol=1e-12)


def test_tied_normalizer_shares_state_statistics(rng):
    ds = Dataset(rng.normal(300, 20, (30, 2)), rng.uniform(0, 100, (30, 5, 2)),
                 rng.normal(300, 20, (30, 5, 2)))
    norm = fit_normalizer(ds, tie_state=True)
    np.testing.assert_array_equal(norm.x_shift, norm.y_shift)
    np.testing.assert_array_equal(norm.x_scale, norm.y_scale)


def test_constant_feature_scale_floored():
    ds = Dataset(np.ones((5, 2)), np.zeros((5, 3, 0)), np.ones((5, 3, 1)))
    norm = fit_normalizer(ds)
    assert np.all(norm.x_scale == 1e-8) and np.all(np.isfinite(norm.apply(ds).x0))


def test_normalizer_uses_train_statistics_only(rng):
    train = Dataset(rng.normal(0, 1, (100, 2)), np.zeros((100, 3, 0)),
                    rng.normal(0, 1, (100, 3, 1)))
    val = Dataset(rng.normal(5, 3, (100, 2)), np.zeros((100, 3, 0)),
                  rng.normal(5, 3, (100, 3, 1)), split="val")
    norm = fit_normalizer(train)
    z = norm.apply(val)
    assert abs(z.x0.mean()) > 1.0
    with pytest.raises(ContractError):
        fit_normalizer(train.take(slice(0, 0)))


def test_normalizer_dict_round_trip(rng):
    norm = Normalizer(*(rng.normal(size=k) for k in (2, 2, 1, 1, 2, 2)))
    back = Normalizer.from_dict(norm.to_dict())
    for k in ("x_shift", "x_scale", "u_shift", "u_scale", "y_shift", "y_scale"):
        np.testing.assert_array_equal(getattr(back, k), getattr(norm, k))


@pytest.mark.parametrize("kind", ["spring", "tclab"])
def test_dataset_files_round_trip_exactly(tmp_path, kind):
    if kind == "spring":
        ds = build_spring_dataset(SpringParams(c=0.45), 25, seed=2)
    else:
        raw = build_tclab_dataset(TclabParams(), 3600.0, seed=2, stride=7)
        ds = fit_normalizer(raw, tie_state=True).apply(raw)
    write_dataset(ds, tmp_path / "d.csv", tmp_path / "d.json")
    back = read_dataset(tmp_path / "d.csv", tmp_path / "d.json")
    for k in ("x0", "u", "y"):
        np.testing.assert_array_equal(getattr(back, k), getattr(ds, k))
    assert back.split == ds.split and back.meta == ds.meta
    if ds.normalizer is not None:
        np.testing.assert_array_equal(back.normalizer.y_scale, ds.normalizer.y_scale)


def test_dataset_validation():
    with pytest.raises(ContractError):
        Dataset(np.zeros((3, 2)), np.zeros((2, 4, 0)), np.zeros((3, 4, 1)))
    with pytest.raises(ContractError):
        Dataset(np.zeros((3, 2)), np.zeros((3, 4, 0)), np.zeros((3, 4, 1)), split="bogus")
