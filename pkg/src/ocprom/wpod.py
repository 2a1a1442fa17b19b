"""Weighted Proper Orthogonal Decomposition.

Given snapshots ``chi_i`` with quadrature weights ``w_i`` and an SPD
inner-product matrix ``X``, the POD space of dimension ``N`` minimizes
``sum_i w_i ||chi_i - P_V chi_i||_X^2``; the minimum equals the sum of the
discarded eigenvalues of the weighted correlation operator.

Two matrix formulations are provided:

* snapshot basis: ``G x = lambda P^{-1} x`` with ``G_ij = <chi_j, chi_i>_X``
  and ``P = diag(w)`` (admits negative weights);
* weighted snapshot basis: ``C_w = D G D`` with ``D = diag(sqrt(w))``
  (positive weights only).

For the weighted formulation the eigenpairs can alternatively be taken from
an SVD of ``L^T S D`` where ``X = L L^T``. Its squared singular values are
the eigenvalues of ``C_w = D S^T X S D``, but computing them this way does
not square the condition number, so eigenvalues far below
``eps * lambda_1`` remain meaningful.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

log = logging.getLogger(__name__)

TRUNCATION_RTOL = 1e-13
AGGREGATION_DROP_TOL = 1e-12


class WeightError(ValueError):
    pass


@dataclass
class SnapshotSet:
    """Snapshot columns ``(n_dofs, M)``, weights ``(M,)`` and inner product ``X``."""

    snapshots: np.ndarray
    weights: np.ndarray
    X: object

    def __post_init__(self):
        self.snapshots = np.asarray(self.snapshots, dtype=float)
        if self.snapshots.ndim == 1:
            self.snapshots = self.snapshots[:, None]
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if self.snapshots.shape[1] != self.weights.size:
            raise ValueError(
                f"{self.snapshots.shape[1]} snapshots but {self.weights.size} weights"
            )
        if np.any(self.weights == 0.0):
            raise WeightError("zero quadrature weights are not admitted")
        if self.X.shape != (self.n_dofs, self.n_dofs):
            raise ValueError("inner-product matrix does not match snapshot length")

    @property
    def n_dofs(self) -> int:
        return self.snapshots.shape[0]

    @property
    def size(self) -> int:
        return self.snapshots.shape[1]

    def gram(self) -> np.ndarray:
        G = self.snapshots.T @ (self.X @ self.snapshots)
        return 0.5 * (G + G.T)


@dataclass
class PODBasis:
    """X-orthonormal modes (columns) with the full eigenvalue sequence."""

    vectors: np.ndarray
    eigenvalues: np.ndarray
    X: object = None
    rank: int = 0

    @property
    def N(self) -> int:
        return self.vectors.shape[1]

    @property
    def truncation_energy(self) -> float:
        """``sum_{k > N} lambda_k`` over the positive part of the spectrum."""
        tail = self.eigenvalues[self.N :]
        return float(np.sum(tail[tail > 0]))

    def truncate(self, N: int) -> "PODBasis":
        return PODBasis(self.vectors[:, :N].copy(), self.eigenvalues, self.X, self.rank)

    def project(self, v: np.ndarray) -> np.ndarray:
        """X-orthogonal projection onto the span of the modes."""
        return self.vectors @ (self.vectors.T @ (self.X @ v))


def x_norm(X, v) -> np.ndarray:
    """Column-wise ``sqrt(v^T X v)``."""
    v = np.asarray(v, dtype=float)
    return np.sqrt(np.maximum(np.einsum("i...,i...->...", v, X @ v), 0.0))


def gram_schmidt(V: np.ndarray, X, drop_tol: float = AGGREGATION_DROP_TOL, passes: int = 2):
    """X-orthonormalize the columns of ``V`` by modified Gram-Schmidt, ``passes`` sweeps.

    A column is dropped if, after orthogonalization against the previously
    accepted columns, its norm falls below ``drop_tol`` times its original norm.
    """
    V = np.asarray(V, dtype=float)
    out = []
    for j in range(V.shape[1]):
        v = V[:, j].copy()
        n0 = x_norm(X, v)
        if n0 == 0.0:
            continue
        for _ in range(passes):
            for q in out:
                v -= (q @ (X @ v)) * q
        nv = x_norm(X, v)
        if nv <= drop_tol * n0:
            continue
        out.append(v / nv)
    if not out:
        return np.zeros((V.shape[0], 0))
    return np.column_stack(out)


def x_cholesky(X) -> np.ndarray:
    """Dense lower-triangular ``L`` with ``X = L L^T``."""
    Xd = X.toarray() if hasattr(X, "toarray") else np.asarray(X, dtype=float)
    return sla.cholesky(Xd, lower=True)


def _count_retained(lam, rtol):
    if lam.size == 0 or lam[0] <= 0:
        return 0
    return int(np.sum(lam > rtol * lam[0]))


def _finish(S, coeffs, lam, X, N, rtol):
    K = _count_retained(lam, rtol)
    n_keep = min(N, K)
    modes = S @ coeffs[:, :n_keep] if n_keep else np.zeros((S.shape[0], 0))
    V = gram_schmidt(modes, X)
    if V.shape[1] < n_keep:
        log.warning("POD: %d of %d modes lost in re-orthonormalization", n_keep - V.shape[1], n_keep)
    return PODBasis(V, lam, X, K)


def _empty(snap: SnapshotSet) -> PODBasis:
    warnings.warn("all-zero snapshot set; returning empty basis", stacklevel=3)
    return PODBasis(np.zeros((snap.n_dofs, 0)), np.zeros(snap.size), snap.X, 0)


def pod_snapshot_basis(snap: SnapshotSet, N: int, rtol: float = TRUNCATION_RTOL) -> PODBasis:
    """POD from the generalized eigenproblem ``G x = lambda P^{-1} x``.

    Negative weights are admitted; eigenvalues are then taken from the
    nonsymmetric matrix ``P G`` and sorted by real part.
    """
    if N < 0:
        raise ValueError("N must be nonnegative")
    G = snap.gram()
    if not np.any(G):
        return _empty(snap)
    w = snap.weights
    if np.all(w > 0):
        lam, x = sla.eigh(G, np.diag(1.0 / w))
    else:
        lam, x = sla.eig(w[:, None] * G)
        lam, x = lam.real, x.real
    order = np.argsort(lam)[::-1]
    return _finish(snap.snapshots, x[:, order], lam[order], snap.X, N, rtol)


def pod_weighted_snapshot_basis(
    snap: SnapshotSet, N: int, rtol: float = TRUNCATION_RTOL, method: str = "svd"
) -> PODBasis:
    """POD from ``C_w = D G D``, ``D = diag(sqrt(w))``.

    ``method="eigh"`` diagonalizes ``C_w`` directly; ``method="svd"`` (default)
    takes the same eigenpairs from the singular values of ``R D``.
    """
    if N < 0:
        raise ValueError("N must be nonnegative")
    w = snap.weights
    if np.any(w <= 0):
        raise WeightError(
            "weighted formulation needs positive weights; use pod_snapshot_basis instead"
        )
    d = np.sqrt(w)
    S = snap.snapshots
    if method == "eigh":
        G = snap.gram()
        if not np.any(G):
            return _empty(snap)
        lam, x = np.linalg.eigh(d[:, None] * G * d[None, :])
        order = np.argsort(lam)[::-1]
        lam, x = lam[order], x[:, order]
    elif method == "svd":
        if not np.any(S):
            return _empty(snap)
        L = x_cholesky(snap.X)
        u, sig, _ = np.linalg.svd(L.T @ (S * d[None, :]), full_matrices=False)
        lam = np.zeros(snap.size)
        lam[: sig.size] = sig**2
        # the decomposed quantity is sigma, so the noise-floor proxy applies to it
        K = _count_retained(sig, rtol)
        n_keep = min(N, K)
        # modes X-orthonormal by construction: xi = L^{-T} u
        modes = sla.solve_triangular(L.T, u[:, :n_keep], lower=False)
        V = gram_schmidt(modes, snap.X)
        return PODBasis(V, lam, snap.X, K)
    else:
        raise ValueError(f"unknown method {method!r}")
    return _finish(S, d[:, None] * x, lam, snap.X, N, rtol)


def pod(snap: SnapshotSet, N: int, formulation: str = "weighted", **kw) -> PODBasis:
    if formulation == "snapshot":
        return pod_snapshot_basis(snap, N, **kw)
    if formulation == "weighted":
        return pod_weighted_snapshot_basis(snap, N, **kw)
    raise ValueError(f"unknown POD formulation {formulation!r}")


def span_basis(snap: SnapshotSet) -> PODBasis:
    """X-orthonormal basis of the snapshot span (no compression)."""
    V = gram_schmidt(snap.snapshots, snap.X)
    # fix a deterministic sign: first nonzero entry positive
    for j in range(V.shape[1]):
        k = np.flatnonzero(np.abs(V[:, j]) > 1e-14)
        if k.size and V[k[0], j] < 0:
            V[:, j] = -V[:, j]
    lam = np.zeros(snap.size)
    return PODBasis(V, lam, snap.X, V.shape[1])


def pod_partitioned(snapshot_sets: dict, N, formulation: str = "weighted", **kw) -> dict:
    """Independent POD per field.

    ``N`` is an int or a per-field mapping. A field whose dimension does not
    exceed ``N`` needs no compression and gets a basis of its snapshot span
    (e.g. a scalar control yields the basis ``{1}``).
    """
    sizes = {s.size for s in snapshot_sets.values()}
    if len(sizes) > 1:
        raise ValueError("fields were sampled on different parameter sets")
    out = {}
    for name, snap in snapshot_sets.items():
        n = N[name] if isinstance(N, dict) else N
        if n == 0:
            out[name] = PODBasis(np.zeros((snap.n_dofs, 0)), np.zeros(snap.size), snap.X, 0)
        elif snap.n_dofs <= n:
            out[name] = span_basis(snap)
        else:
            out[name] = pod(snap, n, formulation, **kw)
    return out


def aggregate(state_basis, adjoint_basis, X, drop_tol: float = AGGREGATION_DROP_TOL) -> np.ndarray:
    """X-orthonormal basis of ``span{state, adjoint}`` (columns)."""
    S = state_basis.vectors if isinstance(state_basis, PODBasis) else state_basis
    P = adjoint_basis.vectors if isinstance(adjoint_basis, PODBasis) else adjoint_basis
    if S.shape[0] != P.shape[0]:
        raise ValueError("state and adjoint bases have different dof layouts")
    return gram_schmidt(np.hstack([S, P]), X, drop_tol=drop_tol)


def principal_angles(U, V, X) -> np.ndarray:
    """Principal angles (ascending) between ``span(U)`` and ``span(V)`` in the X inner product.

    Small angles come from the singular values of the X-orthogonal residual
    of ``V`` after projection onto ``U`` (arcsin), large ones from the cosines.
    """
    U = gram_schmidt(U, X, drop_tol=1e-14)
    V = gram_schmidt(V, X, drop_tol=1e-14)
    k = min(U.shape[1], V.shape[1])
    if k == 0:
        return np.zeros(0)
    cos = np.clip(np.linalg.svd(U.T @ (X @ V), compute_uv=False)[:k], 0.0, 1.0)
    res = V - U @ (U.T @ (X @ V))
    sin = np.sort(np.clip(np.linalg.svd(x_cholesky(X).T @ res, compute_uv=False), 0.0, 1.0))[:k]
    sin = np.concatenate([sin, np.ones(k - sin.size)])
    return np.where(sin < np.sqrt(0.5), np.arcsin(sin), np.arccos(cos))


def weighted_projection_error(snap: SnapshotSet, basis: PODBasis) -> float:
    """``sum_i w_i ||chi_i - P_V chi_i||_X^2``."""
    S = snap.snapshots
    if basis.N == 0:
        E = S
    else:
        E = S - basis.vectors @ (basis.vectors.T @ (snap.X @ S))
    return float(np.sum(snap.weights * np.einsum("ij,ij->j", E, snap.X @ E)))


def save_eigenvalues_csv(path, eigen: dict) -> None:
    """Write ``field,index,eigenvalue`` rows in the given field order."""
    lines = ["field,index,eigenvalue"]
    for name, lam in eigen.items():
        lines += [f"{name},{k + 1},{float(v):.17g}" for k, v in enumerate(lam)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
