"""P1 finite-element assembly with exact element integrals."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.io import mmread, mmwrite

from .mesh import DIRICHLET, Mesh

log = logging.getLogger(__name__)

_MASS_REF = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


class EigenConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DofMap:
    """Partition of vertex dofs into Dirichlet-constrained and free sets."""

    total_dofs: int
    dirichlet_dofs: np.ndarray
    free_dofs: np.ndarray

    @classmethod
    def from_mesh(cls, mesh: Mesh, dirichlet_tag: str = DIRICHLET) -> "DofMap":
        dirichlet = mesh.tagged_vertices(dirichlet_tag)
        free = np.setdiff1d(np.arange(mesh.n_vertices), dirichlet)
        return cls(mesh.n_vertices, dirichlet, free)

    @property
    def n_free(self) -> int:
        return len(self.free_dofs)

    def injection(self) -> sp.csr_matrix:
        """Sparse ``total x free`` matrix extending free values by zero."""
        n = self.n_free
        return sp.csr_matrix(
            (np.ones(n), (self.free_dofs, np.arange(n))), shape=(self.total_dofs, n)
        )

    def extend(self, values: np.ndarray) -> np.ndarray:
        full = np.zeros(self.total_dofs)
        full[self.free_dofs] = values
        return full


def element_geometry(mesh: Mesh):
    """Areas ``(nt,)`` and constant basis gradients ``(nt, 3, 2)``."""
    cached = mesh._cache.get("geometry")
    if cached is not None:
        return cached
    p = mesh.vertices[mesh.triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * det
    # inverse-transpose of the affine map applied to reference gradients
    g1 = np.column_stack([d2[:, 1], -d2[:, 0]]) / det[:, None]
    g2 = np.column_stack([-d1[:, 1], d1[:, 0]]) / det[:, None]
    grads = np.stack([-g1 - g2, g1, g2], axis=1)
    mesh._cache["geometry"] = (area, grads)
    return area, grads


def _triangle_mask(mesh: Mesh, restriction):
    if restriction is None:
        return np.ones(mesh.n_triangles, dtype=bool)
    if restriction not in mesh.label_set():
        raise KeyError(f"unknown subdomain label {restriction!r}")
    return mesh.labels == restriction


def _scatter(mesh: Mesh, local: np.ndarray, mask: np.ndarray) -> sp.csr_matrix:
    tri = mesh.triangles[mask]
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.n_vertices
    mat = sp.coo_matrix((local[mask].ravel(), (rows, cols)), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def assemble_mass(mesh: Mesh, restriction: str | None = None) -> sp.csr_matrix:
    """``M_ij = int phi_i phi_j`` over the whole mesh or one labeled subdomain."""
    mask = _triangle_mask(mesh, restriction)
    area, _ = element_geometry(mesh)
    local = area[:, None, None] * _MASS_REF[None]
    return _scatter(mesh, local, mask)


def assemble_load(mesh: Mesh, restriction: str | None = None) -> np.ndarray:
    """``b_i = int phi_i`` over the whole mesh or one labeled subdomain."""
    mask = _triangle_mask(mesh, restriction)
    area, _ = element_geometry(mesh)
    out = np.zeros(mesh.n_vertices)
    np.add.at(out, mesh.triangles[mask].ravel(), np.repeat(area[mask] / 3.0, 3))
    return out


def assemble_stiffness(mesh: Mesh) -> sp.csr_matrix:
    """``K_ij = int grad phi_i . grad phi_j``."""
    area, grads = element_geometry(mesh)
    local = area[:, None, None] * np.einsum("kid,kjd->kij", grads, grads)
    return _scatter(mesh, local, np.ones(mesh.n_triangles, dtype=bool))


def assemble_advection(mesh: Mesh, direction: int) -> sp.csr_matrix:
    """``A_ij = int (d phi_j / d x_direction) phi_i`` with ``direction`` in {1, 2}."""
    if direction not in (1, 2):
        raise ValueError("direction must be 1 or 2")
    area, grads = element_geometry(mesh)
    d = grads[:, :, direction - 1]
    local = (area / 3.0)[:, None, None] * np.broadcast_to(d[:, None, :], (len(area), 3, 3))
    return _scatter(mesh, local, np.ones(mesh.n_triangles, dtype=bool))


def assemble_boundary_mass(mesh: Mesh, tag: str) -> sp.csr_matrix:
    """Edge mass matrix ``int_{Gamma_tag} phi_i phi_j ds``."""
    n = mesh.n_vertices
    edges = mesh.boundary_edges[mesh.boundary_tags == tag]
    if len(edges) == 0:
        warnings.warn(f"no boundary edges tagged {tag!r}; returning zero matrix", stacklevel=2)
        return sp.csr_matrix((n, n))
    h = np.linalg.norm(mesh.vertices[edges[:, 1]] - mesh.vertices[edges[:, 0]], axis=1)
    local = (h / 6.0)[:, None, None] * np.array([[2.0, 1.0], [1.0, 2.0]])[None]
    rows = np.repeat(edges, 2, axis=1).ravel()
    cols = np.tile(edges, (1, 2)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def interpolate(mesh: Mesh, func) -> np.ndarray:
    """Nodal interpolant of ``func(x1, x2)``."""
    return np.asarray(func(mesh.vertices[:, 0], mesh.vertices[:, 1]), dtype=float) * np.ones(
        mesh.n_vertices
    )


class TrilinearForm:
    """``t(a, b, c) = int (da/dx1 db/dx2 - da/dx2 db/dx1) c dx`` on P1 vertex vectors.

    Gradients are piecewise constant, so each element contributes
    ``cross(grad a, grad b) * |K| / 3 * sum_K c`` exactly.
    """

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.area, self.grads = element_geometry(mesh)
        self.tri = mesh.triangles
        self.n = mesh.n_vertices

    def _grad(self, v):
        return np.einsum("kjd,kj->kd", self.grads, v[self.tri])

    def _cavg(self, c):
        return self.area / 3.0 * c[self.tri].sum(axis=1)

    def _cross(self, a, b):
        ga, gb = self._grad(a), self._grad(b)
        return ga[:, 0] * gb[:, 1] - ga[:, 1] * gb[:, 0]

    def __call__(self, a, b, c) -> float:
        return float(np.dot(self._cross(a, b), self._cavg(c)))

    def grad_a(self, b, c) -> np.ndarray:
        """Vector ``i -> t(phi_i, b, c)``."""
        gb, cw = self._grad(b), self._cavg(c)
        loc = (self.grads[:, :, 0] * gb[:, None, 1] - self.grads[:, :, 1] * gb[:, None, 0]) * cw[:, None]
        out = np.zeros(self.n)
        np.add.at(out, self.tri.ravel(), loc.ravel())
        return out

    def grad_b(self, a, c) -> np.ndarray:
        """Vector ``j -> t(a, phi_j, c)``."""
        ga, cw = self._grad(a), self._cavg(c)
        loc = (ga[:, None, 0] * self.grads[:, :, 1] - ga[:, None, 1] * self.grads[:, :, 0]) * cw[:, None]
        out = np.zeros(self.n)
        np.add.at(out, self.tri.ravel(), loc.ravel())
        return out

    def grad_c(self, a, b) -> np.ndarray:
        """Vector ``k -> t(a, b, phi_k)``."""
        loc = np.repeat((self._cross(a, b) * self.area / 3.0)[:, None], 3, axis=1)
        out = np.zeros(self.n)
        np.add.at(out, self.tri.ravel(), loc.ravel())
        return out

    def _matrix(self, local):
        rows = np.repeat(self.tri, 3, axis=1).ravel()
        cols = np.tile(self.tri, (1, 3)).ravel()
        m = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(self.n, self.n)).tocsr()
        m.sum_duplicates()
        return m

    def matrix_ab(self, c) -> sp.csr_matrix:
        """``H[i, j] = t(phi_i, phi_j, c)``."""
        cw = self._cavg(c)
        G = self.grads
        cr = G[:, :, None, 0] * G[:, None, :, 1] - G[:, :, None, 1] * G[:, None, :, 0]
        return self._matrix(cr * cw[:, None, None])

    def matrix_ca(self, b) -> sp.csr_matrix:
        """``D[k, j] = t(phi_j, b, phi_k)``: derivative of the test-slot vector in ``a``."""
        gb = self._grad(b)
        G = self.grads
        cr = G[:, :, 0] * gb[:, None, 1] - G[:, :, 1] * gb[:, None, 0]  # (nt, j)
        local = np.broadcast_to((cr * (self.area / 3.0)[:, None])[:, None, :], (len(self.area), 3, 3))
        return self._matrix(local)

    def matrix_cb(self, a) -> sp.csr_matrix:
        """``D[k, j] = t(a, phi_j, phi_k)``: derivative of the test-slot vector in ``b``."""
        ga = self._grad(a)
        G = self.grads
        cr = ga[:, None, 0] * G[:, :, 1] - ga[:, None, 1] * G[:, :, 0]
        local = np.broadcast_to((cr * (self.area / 3.0)[:, None])[:, None, :], (len(self.area), 3, 3))
        return self._matrix(local)

    def reduced_tensor(self, Va, Vb, Vc) -> np.ndarray:
        """``T[i, j, k] = t(Va[:, i], Vb[:, j], Vc[:, k])`` for vertex-space bases."""
        ga = np.einsum("kjd,kjn->kdn", self.grads, Va[self.tri])
        gb = np.einsum("kjd,kjn->kdn", self.grads, Vb[self.tri])
        cw = (self.area / 3.0)[:, None] * Vc[self.tri].sum(axis=1)
        return np.einsum("ki,kj,kl->ijl", ga[:, 0], gb[:, 1], cw) - np.einsum(
            "ki,kj,kl->ijl", ga[:, 1], gb[:, 0], cw
        )


def _power_iteration(apply_op, rayleigh, n, tol, max_iter, rng_seed=0):
    v = np.random.default_rng(rng_seed).standard_normal(n)
    lam_old = np.inf
    for it in range(max_iter):
        w = apply_op(v)
        lam = rayleigh(w)
        w /= np.linalg.norm(w)
        if abs(lam - lam_old) <= tol * abs(lam):
            return lam, it + 1
        v, lam_old = w, lam
    raise EigenConvergenceError(f"power iteration did not converge in {max_iter} iterations")


def compute_poincare_constant(mesh: Mesh, tol: float = 1e-10, max_iter: int = 20000) -> float:
    """Largest ``lambda`` with ``M v = lambda K v`` on the Dirichlet-constrained space."""
    dofs = DofMap.from_mesh(mesh)
    if dofs.n_free == 0:
        raise ValueError("no free dofs")
    f = dofs.free_dofs
    M = assemble_mass(mesh)[f][:, f].tocsc()
    K = assemble_stiffness(mesh)[f][:, f].tocsc()
    lu = spla.splu(K)

    def rq(v):
        return float(v @ (M @ v)) / float(v @ (K @ v))

    lam, its = _power_iteration(lambda v: lu.solve(M @ v), rq, dofs.n_free, tol, max_iter)
    log.debug("Poincare constant %.6g after %d iterations", lam, its)
    return lam


def compute_trace_constant(
    mesh: Mesh, tag: str = "N", tol: float = 1e-10, max_iter: int = 20000
) -> float:
    """Largest ``lambda`` with ``G v = lambda (M + K) v``, ``G`` the boundary mass on ``tag``."""
    dofs = DofMap.from_mesh(mesh)
    if dofs.n_free == 0:
        raise ValueError("no free dofs")
    f = dofs.free_dofs
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        G = assemble_boundary_mass(mesh, tag)[f][:, f].tocsc()
    if G.nnz == 0:
        return 0.0
    H = (assemble_mass(mesh) + assemble_stiffness(mesh))[f][:, f].tocsc()
    lu = spla.splu(H)

    def rq(v):
        return float(v @ (G @ v)) / float(v @ (H @ v))

    lam, its = _power_iteration(lambda v: lu.solve(G @ v), rq, dofs.n_free, tol, max_iter)
    log.debug("trace constant %.6g after %d iterations", lam, its)
    return lam


def save_matrix(path, matrix) -> None:
    """Matrix Market export (coordinate for sparse, array for dense)."""
    mmwrite(str(path), matrix, precision=17)


def load_matrix(path):
    return mmread(str(path))
