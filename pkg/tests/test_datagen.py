import numpy as np
import pytest

from fedbn_sim.datagen import (
    ClientDataset,
    estimate_cov,
    make_cos_dataset,
    make_gaussian_pair_client,
    make_offdiag_cov,
    parallel_rows,
    read_client_csv,
    write_client_csv,
)
from fedbn_sim.numerics import make_rng, sym_eigvals


def test_offdiag_cov_spectrum():
    # eigenvalues of (1-rho) I + rho 11^T are 1-rho (d-1 times) and 1+(d-1)rho
    d, rho = 10, 0.08
    lam = sym_eigvals(make_offdiag_cov(d, rho))
    np.testing.assert_allclose(lam[:-1], 1 - rho, atol=1e-12)
    assert lam[-1] == pytest.approx(1 + (d - 1) * rho)


def test_offdiag_cov_small_case():
    np.testing.assert_allclose(sym_eigvals(make_offdiag_cov(2, 0.5)), [0.5, 1.5])


def test_offdiag_frobenius_distance_to_identity():
    d, rho = 10, 0.08
    dist = np.linalg.norm(make_offdiag_cov(d, rho) - np.eye(d))
    assert dist == pytest.approx(rho * np.sqrt(d * (d - 1)))


@pytest.mark.parametrize("rho", [1 / 9, 0.2, -0.5])
def test_offdiag_rejects_out_of_range(rho):
    with pytest.raises(ValueError):
        make_offdiag_cov(10, rho)


def test_gaussian_pair_class_means_and_balance():
    cov = make_offdiag_cov(5, 0.1)
    ds = make_gaussian_pair_client(0, cov, 20_000, make_rng(0))
    assert ds.labels.sum() == 10_000
    np.testing.assert_allclose(ds.features[ds.labels == 0].mean(axis=0), -1.0, atol=0.05)
    np.testing.assert_allclose(ds.features[ds.labels == 1].mean(axis=0), 1.0, atol=0.05)
    within = ds.features - np.where(ds.labels[:, None] == 1, 1.0, -1.0)
    np.testing.assert_allclose(np.cov(within.T), cov, atol=0.05)


def test_gaussian_pair_odd_and_minimal_sizes():
    ds = make_gaussian_pair_client(1, np.eye(3), 5, make_rng(1))
    assert (ds.labels == 0).sum() == 3 and (ds.labels == 1).sum() == 2
    ds2 = make_gaussian_pair_client(1, np.eye(3), 2, make_rng(1))
    assert sorted(ds2.labels) == [0.0, 1.0]
    with pytest.raises(ValueError):
        make_gaussian_pair_client(1, np.eye(3), 1, make_rng(1))


def test_gaussian_pair_deterministic():
    a = make_gaussian_pair_client(0, np.eye(4), 10, make_rng(3, 1))
    b = make_gaussian_pair_client(0, np.eye(4), 10, make_rng(3, 1))
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_centered_client_satisfies_theory_assumptions():
    ds = make_gaussian_pair_client(0, np.eye(10), 10, make_rng(2), center=True)
    ds.check_theory_assumptions()
    np.testing.assert_allclose(ds.cov, np.eye(10) + 1.0)


def test_theory_assumptions_detect_violations():
    X = np.array([[1.0, 2.0], [-1.0, -2.0], [0.5, -1.0], [-0.5, 1.0]])
    ds = ClientDataset(0, X, np.zeros(4), np.eye(2))
    with pytest.raises(ValueError, match="multiple"):
        ds.check_theory_assumptions()
    ds = ClientDataset(0, X + 1.0, np.zeros(4), np.eye(2))
    with pytest.raises(ValueError, match="centered"):
        ds.check_theory_assumptions()


def test_parallel_rows():
    assert parallel_rows(np.array([[1.0, 0.0], [-3.0, 0.0]]))
    assert not parallel_rows(np.array([[1.0, 0.0], [1.0, 1e-3]]))


def test_client_dataset_shape_checks():
    with pytest.raises(ValueError):
        ClientDataset(0, np.zeros((3, 2)), np.zeros(2), np.eye(2))
    with pytest.raises(ValueError):
        ClientDataset(0, np.zeros((3, 2)), np.zeros(3), np.eye(3))


def test_estimate_cov_hand_example():
    X = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 2.0], [0.0, -2.0]])
    np.testing.assert_allclose(estimate_cov(X), np.diag([0.5, 2.0]))


def test_estimate_cov_errors():
    with pytest.raises(ValueError):
        estimate_cov(np.ones((2, 2)))
    with pytest.raises(ValueError):
        estimate_cov(np.array([[1.0, 1.0], [2.0, 2.0], [-3.0, -3.0]]))


def test_estimate_cov_converges():
    cov = make_offdiag_cov(4, 0.2)
    from fedbn_sim.numerics import gaussian_sample
    X = gaussian_sample(np.zeros(4), cov, make_rng(5), size=100_000)
    np.testing.assert_allclose(estimate_cov(X), cov, atol=0.02)


def test_cos_dataset_scale_ratio():
    a = make_cos_dataset(2.0, 1.0, 0.05, 5000, make_rng(0, 1))
    b = make_cos_dataset(2.0, 3.0, 0.05, 5000, make_rng(0, 2))
    assert b.local_std / a.local_std == pytest.approx(3.0, rel=0.05)
    # the label only sees the standardized input, so residuals are pure noise
    res = b.ys - np.cos(2.0 * b.xs / 3.0)
    assert np.std(res) == pytest.approx(0.05, rel=0.1)


def test_cos_dataset_noiseless():
    ds = make_cos_dataset(1.5, 2.0, 0.0, 100, make_rng(4))
    np.testing.assert_allclose(ds.ys, np.cos(1.5 * ds.xs / 2.0))


def test_client_csv_round_trip(tmp_path):
    ds = make_gaussian_pair_client(3, make_offdiag_cov(4, 0.1), 7, make_rng(9))
    write_client_csv(tmp_path / "c.csv", ds)
    back = read_client_csv(tmp_path / "c.csv")
    assert back.client_id == 3
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.cov, ds.cov)
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "x0,x1,x2,x3,label"
