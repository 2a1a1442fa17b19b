import warnings

import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp

from ocprom.quadrature import Distribution1D
from ocprom.wpod import (
    PODBasis,
    SnapshotSet,
    WeightError,
    aggregate,
    gram_schmidt,
    pod,
    pod_partitioned,
    pod_snapshot_basis,
    pod_weighted_snapshot_basis,
    principal_angles,
    save_eigenvalues_csv,
    weighted_projection_error,
    x_norm,
)

METHODS = [
    ("snapshot", {}),
    ("weighted", {"method": "svd"}),
    ("weighted", {"method": "eigh"}),
]


def random_spd(n, rng):
    A = rng.standard_normal((n, n))
    return sp.csr_matrix(A @ A.T + n * np.eye(n))


def random_set(rng, n=None, M=None, weights=None):
    n = n or int(rng.integers(8, 41))
    M = M or int(rng.integers(2, 13))
    S = rng.standard_normal((n, M)) * np.logspace(0, -2, M)[None, :]
    w = rng.random(M) + 0.1 if weights is None else weights
    return SnapshotSet(S, w / w.sum(), random_spd(n, rng))


def oracle_pod(snap, N):
    """Brute force: SVD of X^{1/2} S W^{1/2} with a symmetric square root from eigh."""
    lx, Vx = np.linalg.eigh(snap.X.toarray())
    Xh = Vx @ np.diag(np.sqrt(lx)) @ Vx.T
    Xmh = Vx @ np.diag(1 / np.sqrt(lx)) @ Vx.T
    U, s, _ = np.linalg.svd(Xh @ snap.snapshots @ np.diag(np.sqrt(snap.weights)), full_matrices=False)
    return Xmh @ U[:, :N], s**2


def oracle_angles(U, V, X):
    lx, Vx = np.linalg.eigh(X.toarray())
    Xh = Vx @ np.diag(np.sqrt(lx)) @ Vx.T
    return np.sort(sla.subspace_angles(Xh @ U, Xh @ V))


def assert_x_orthonormal(basis):
    V = basis.vectors
    G = V.T @ (basis.X @ V)
    assert np.abs(G - np.eye(V.shape[1])).max() <= 1e-10


# -- small exact cases -------------------------------------------------------------------


@pytest.mark.parametrize("form,kw", METHODS)
def test_single_snapshot(form, kw):
    rng = np.random.default_rng(0)
    X = random_spd(6, rng)
    chi = rng.standard_normal(6)
    b = pod(SnapshotSet(chi, [0.3], X), 3, form, **kw)
    assert b.N == 1
    nrm = x_norm(X, chi)
    assert abs(abs(b.vectors[:, 0] @ (X @ chi)) - nrm) <= 1e-12 * nrm
    assert abs(b.eigenvalues[0] - 0.3 * nrm**2) <= 1e-12 * nrm**2


@pytest.mark.parametrize("form,kw", METHODS)
def test_duplicated_snapshot_rank_one(form, kw):
    rng = np.random.default_rng(1)
    X = random_spd(7, rng)
    chi = rng.standard_normal(7)
    b = pod(SnapshotSet(np.column_stack([chi, chi]), [0.5, 0.5], X), 2, form, **kw)
    assert b.N == 1 and b.rank == 1
    assert abs(b.eigenvalues[1]) <= 1e-14 * b.eigenvalues[0]


@pytest.mark.parametrize("form,kw", METHODS)
def test_dense_oracle_m5_n12(form, kw):
    rng = np.random.default_rng(2)
    snap = random_set(rng, n=12, M=5, weights=np.ones(5))
    ref, lam_ref = oracle_pod(snap, 3)
    b = pod(snap, 3, form, **kw)
    assert_x_orthonormal(b)
    assert np.max(principal_angles(b.vectors, ref, snap.X)) <= 1e-8
    np.testing.assert_allclose(b.eigenvalues[:5], lam_ref, rtol=1e-10)


def test_uniform_weights_both_formulations_agree():
    rng = np.random.default_rng(3)
    snap = random_set(rng, n=20, M=10, weights=np.ones(10))
    a = pod_snapshot_basis(snap, 6)
    for method in ("svd", "eigh"):
        b = pod_weighted_snapshot_basis(snap, 6, method=method)
        assert np.max(principal_angles(a.vectors, b.vectors, snap.X)) <= 1e-8
        np.testing.assert_allclose(a.eigenvalues, b.eigenvalues, rtol=1e-10)


def test_gauss_weighted_set_agrees():
    rng = np.random.default_rng(4)
    _, w = Distribution1D("beta", 0, 1, 2, 5).gauss(8)
    snap = random_set(rng, n=25, M=8, weights=w)
    a = pod_snapshot_basis(snap, 5)
    b = pod_weighted_snapshot_basis(snap, 5)
    assert len(set(np.round(w, 8))) == 8
    assert np.max(principal_angles(a.vectors, b.vectors, snap.X)) <= 1e-8


def test_weights_validation():
    X = sp.identity(3, format="csr")
    with pytest.raises(WeightError):
        SnapshotSet(np.ones((3, 2)), [0.5, 0.0], X)
    snap = SnapshotSet(np.eye(3)[:, :2], [0.5, -0.1], X)
    with pytest.raises(WeightError, match="pod_snapshot_basis"):
        pod_weighted_snapshot_basis(snap, 1)
    with pytest.raises(ValueError):
        SnapshotSet(np.ones((3, 2)), [1.0], X)


def test_negative_weights_snapshot_formulation():
    rng = np.random.default_rng(5)
    w = np.array([0.6, 0.5, -0.1])
    snap = random_set(rng, n=9, M=3, weights=w / w.sum())
    b = pod_snapshot_basis(snap, 3)
    ref = np.sort(np.linalg.eigvals(np.diag(snap.weights) @ snap.gram()).real)[::-1]
    np.testing.assert_allclose(b.eigenvalues, ref, rtol=1e-10)
    assert_x_orthonormal(b)


def test_all_zero_snapshots_warn():
    X = sp.identity(4, format="csr")
    for form in ("snapshot", "weighted"):
        with warnings.catch_warnings(record=True) as rec:
            warnings.simplefilter("always")
            b = pod(SnapshotSet(np.zeros((4, 3)), np.ones(3) / 3, X), 2, form)
        assert b.N == 0 and rec


def test_svd_path_resolves_tiny_eigenvalues():
    # singular values 10^0 .. 10^-11: eigenvalues reach 1e-22, far below eps * lambda_1
    rng = np.random.default_rng(6)
    Q, _ = np.linalg.qr(rng.standard_normal((30, 12)))
    sig = 10.0 ** -np.arange(12)
    snap = SnapshotSet(Q * sig[None, :], np.ones(12), sp.identity(30, format="csr"))
    b = pod_weighted_snapshot_basis(snap, 12)
    assert b.N == 12 and b.rank == 12
    np.testing.assert_allclose(b.eigenvalues, sig**2, rtol=1e-6)
    assert_x_orthonormal(b)


# -- invariants over random sets ---------------------------------------------------------


@pytest.mark.parametrize("form,kw", METHODS)
def test_optimality_identity_random_sets(form, kw):
    rng = np.random.default_rng(7)
    for _ in range(20):
        snap = random_set(rng)
        N = int(rng.integers(1, snap.size))
        b = pod(snap, N, form, **kw)
        err = weighted_projection_error(snap, b)
        tail = float(np.sum(b.eigenvalues[N:]))
        assert abs(err - tail) <= 1e-8 * tail
        assert np.all(np.diff(b.eigenvalues[: b.N]) <= 0) and np.all(b.eigenvalues[: b.N] > 0)
        assert_x_orthonormal(b)


@pytest.mark.parametrize("form,kw", METHODS)
def test_reordering_invariance(form, kw):
    rng = np.random.default_rng(8)
    snap = random_set(rng, n=30, M=10)
    perm = rng.permutation(10)
    other = SnapshotSet(snap.snapshots[:, perm], snap.weights[perm], snap.X)
    a, b = pod(snap, 4, form, **kw), pod(other, 4, form, **kw)
    assert np.max(principal_angles(a.vectors, b.vectors, snap.X)) <= 1e-10


@pytest.mark.parametrize("form,kw", METHODS)
def test_full_rank_reproduces_snapshots(form, kw):
    rng = np.random.default_rng(9)
    snap = random_set(rng, n=30, M=8)
    b = pod(snap, 8, form, **kw)
    assert b.N == b.rank == 8
    for i in range(8):
        chi = snap.snapshots[:, i]
        assert x_norm(snap.X, chi - b.project(chi)) <= 1e-8 * x_norm(snap.X, chi)


def test_principal_angles_oracle():
    rng = np.random.default_rng(10)
    X = random_spd(15, rng)
    U, V = rng.standard_normal((15, 4)), rng.standard_normal((15, 4))
    np.testing.assert_allclose(principal_angles(U, V, X), oracle_angles(U, V, X), atol=1e-12)
    # tiny angles resolved well below sqrt(eps)
    W = U + 1e-11 * rng.standard_normal((15, 4))
    ang = principal_angles(U, W, X)
    assert 1e-13 < ang.max() < 1e-9


# -- partitioned / aggregated ----------------------------------------------------------


def test_partitioned_scalar_control_is_span():
    rng = np.random.default_rng(11)
    y = random_set(rng, n=20, M=6)
    u = SnapshotSet(rng.standard_normal((1, 6)), y.weights, sp.csr_matrix([[1.0]]))
    for N in (1, 3, 5):
        bases = pod_partitioned({"y": y, "u": u}, N)
        assert bases["u"].N == 1 and abs(abs(bases["u"].vectors[0, 0]) - 1) < 1e-15
        assert bases["y"].N == N


def test_partitioned_energy_bounded_by_monolithic():
    rng = np.random.default_rng(12)
    n = 15
    Xa, Xb = random_spd(n, rng), random_spd(n, rng)
    w = np.full(8, 1 / 8)
    Sa, Sb = rng.standard_normal((n, 8)), rng.standard_normal((n, 8))
    parts = pod_partitioned({"a": SnapshotSet(Sa, w, Xa), "b": SnapshotSet(Sb, w, Xb)}, 3)
    mono = pod(SnapshotSet(np.vstack([Sa, Sb]), w, sp.block_diag([Xa, Xb], format="csr")), 3)
    total = float(np.sum(mono.eigenvalues))
    for b in parts.values():
        assert b.truncation_energy <= total


def test_partitioned_zero_N_and_mismatch():
    rng = np.random.default_rng(13)
    a = random_set(rng, n=10, M=4)
    bases = pod_partitioned({"a": a}, {"a": 0})
    assert bases["a"].N == 0
    b = random_set(rng, n=10, M=5)
    with pytest.raises(ValueError):
        pod_partitioned({"a": a, "b": b}, 2)


def test_aggregate_dimensions():
    rng = np.random.default_rng(14)
    X = random_spd(20, rng)
    Y = gram_schmidt(rng.standard_normal((20, 4)), X)
    assert aggregate(Y, Y, X).shape[1] == 4
    # X-orthogonal complement: direct sum
    Z = rng.standard_normal((20, 4))
    Z = Z - Y @ (Y.T @ (X @ Z))
    agg = aggregate(Y, Z, X)
    assert agg.shape[1] == 8
    assert np.abs(agg.T @ (X @ agg) - np.eye(8)).max() <= 1e-12
    with pytest.raises(ValueError):
        aggregate(Y, np.ones((19, 2)), X)


def test_eigenvalue_csv(tmp_path):
    save_eigenvalues_csv(tmp_path / "e.csv", {"y": np.array([2.0, 0.1]), "u": np.array([1 / 3])})
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "field,index,eigenvalue"
    assert lines[1:] == ["y,1,2", "y,2,0.10000000000000001", "u,1,0.33333333333333331"]


def test_truncate_keeps_spectrum():
    rng = np.random.default_rng(15)
    snap = random_set(rng, n=12, M=6)
    b = pod(snap, 5)
    t = b.truncate(2)
    assert isinstance(t, PODBasis) and t.N == 2 and t.truncation_energy >= b.truncation_energy
