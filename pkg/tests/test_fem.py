import warnings

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from ocprom.cases import gulf_mesh
from ocprom.fem import (
    DofMap,
    TrilinearForm,
    assemble_advection,
    assemble_boundary_mass,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    compute_poincare_constant,
    compute_trace_constant,
    interpolate,
    load_matrix,
    save_matrix,
)
from ocprom.mesh import DIRICHLET, NEUMANN, Mesh, generate_structured_rectangle


def single_triangle():
    v = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    t = np.array([[0, 1, 2]])
    e = np.array([[0, 1], [1, 2], [0, 2]])
    return Mesh(v, t, e, np.array(["D", "D", "N"]), np.array(["BULK"]))


def square(n, **kw):
    return generate_structured_rectangle(n, n, **kw)


# -- reference element values ------------------------------------------------------


def test_mass_single_triangle():
    M = assemble_mass(single_triangle()).toarray()
    np.testing.assert_allclose(M, np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24.0, atol=1e-16)


def test_stiffness_single_triangle():
    K = assemble_stiffness(single_triangle()).toarray()
    np.testing.assert_allclose(K, 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]), atol=1e-15)


def test_boundary_mass_single_edge():
    v = np.array([[0.0, 0.0], [0.3, 0.4], [0.0, 1.0]])
    m = Mesh(v, np.array([[0, 1, 2]]), np.array([[0, 1], [1, 2], [2, 0]]),
             np.array(["N", "D", "D"]), np.array(["BULK"]))
    G = assemble_boundary_mass(m, NEUMANN).toarray()
    h = 0.5
    np.testing.assert_allclose(G[:2, :2], h / 6 * np.array([[2, 1], [1, 2]]), atol=1e-16)
    assert np.all(G[2] == 0)


# -- global identities ----------------------------------------------------------------


def test_mass_partition_of_unity():
    m = square(4)
    one = np.ones(m.n_vertices)
    assert abs(one @ assemble_mass(m) @ one - 1.0) < 1e-13


def test_restricted_mass_sum_is_area():
    m = square(8, subdomains=[("OBS", (0.25, 0.75, 0.5, 1.0))])
    assert abs(assemble_mass(m, "OBS").sum() - 0.25) < 1e-14
    assert abs(assemble_load(m, "OBS").sum() - 0.25) < 1e-14


def test_unknown_label():
    with pytest.raises(KeyError):
        assemble_mass(square(2), "NOPE")


def test_stiffness_row_sums_and_x1_energy():
    m = square(5)
    K = assemble_stiffness(m)
    np.testing.assert_allclose(np.asarray(K.sum(axis=1)).ravel(), 0.0, atol=1e-13)
    x1 = interpolate(m, lambda x, y: x)
    assert abs(x1 @ K @ x1 - 1.0) < 1e-13


def test_symmetric_and_psd():
    m = square(4)
    for A in (assemble_mass(m), assemble_stiffness(m)):
        d = abs(A - A.T).max()
        assert d <= 1e-14 * abs(A).max()
        assert np.linalg.eigvalsh(A.toarray()).min() > -1e-13
    assert np.linalg.eigvalsh(assemble_mass(m).toarray()).min() > 0


def _boundary_oracle(mesh, y, d):
    """1/2 * sum over boundary edges of n_d * int_e y^2 ds with outward normals."""
    total = 0.0
    edge_owner = {}
    for k, tri in enumerate(mesh.triangles):
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            edge_owner[(min(a, b), max(a, b))] = (a, b)
    for a0, b0 in mesh.boundary_edges:
        a, b = edge_owner[(min(a0, b0), max(a0, b0))]  # counter-clockwise orientation
        t = mesh.vertices[b] - mesh.vertices[a]
        h = np.hypot(*t)
        n = np.array([t[1], -t[0]]) / h
        ya, yb = y[a], y[b]
        total += 0.5 * n[d - 1] * h * (ya * ya + ya * yb + yb * yb) / 3.0
    return total


@pytest.mark.parametrize("d", [1, 2])
def test_advection_green_identity(d):
    m = generate_structured_rectangle(5, 4, extent=(0.0, 1.3, -0.2, 0.9))
    A = assemble_advection(m, d)
    rng = np.random.default_rng(0)
    for _ in range(100):
        y = rng.standard_normal(m.n_vertices)
        assert abs(y @ A @ y - _boundary_oracle(m, y, d)) < 1e-12 * max(1.0, y @ y)


def test_advection_constant_and_linear():
    m = square(6)
    one = np.ones(m.n_vertices)
    for d in (1, 2):
        np.testing.assert_allclose(assemble_advection(m, d) @ one, 0.0, atol=1e-14)
    x1 = interpolate(m, lambda x, y: x)
    assert abs(one @ assemble_advection(m, 1) @ x1 - 1.0) < 1e-13
    with pytest.raises(ValueError):
        assemble_advection(m, 3)


def test_boundary_mass_total_and_support():
    m = square(4, tagging={"west": NEUMANN, "north": NEUMANN})
    G = assemble_boundary_mass(m, NEUMANN)
    assert abs(G.sum() - 2.0) < 1e-14
    interior = np.setdiff1d(np.arange(m.n_vertices), m.tagged_vertices(NEUMANN))
    assert G[interior].nnz == 0


def test_boundary_mass_missing_tag_warns():
    m = square(2)
    with pytest.warns(UserWarning):
        G = assemble_boundary_mass(m, NEUMANN)
    assert G.nnz == 0 and G.shape == (9, 9)


def test_enumeration_order_independence():
    m = square(4, subdomains=[("A", (0, 0.5, 0, 0.5))])
    perm = np.random.default_rng(3).permutation(m.n_triangles)
    rot = m.triangles[perm][:, [1, 2, 0]]
    m2 = Mesh(m.vertices.copy(), rot, m.boundary_edges.copy(), m.boundary_tags.copy(), m.labels[perm].copy())
    for f in (lambda q: assemble_mass(q), lambda q: assemble_mass(q, "A"), assemble_stiffness,
              lambda q: assemble_advection(q, 1), lambda q: assemble_advection(q, 2)):
        assert abs(f(m) - f(m2)).max() <= 1e-14


def test_dofmap_partition():
    m = square(4, tagging={"west": NEUMANN})
    d = DofMap.from_mesh(m)
    assert np.array_equal(np.union1d(d.dirichlet_dofs, d.free_dofs), np.arange(m.n_vertices))
    assert np.intersect1d(d.dirichlet_dofs, d.free_dofs).size == 0
    assert np.array_equal(d.dirichlet_dofs, m.tagged_vertices(DIRICHLET))
    x = np.arange(d.n_free, dtype=float)
    np.testing.assert_array_equal(d.injection() @ x, d.extend(x))


def test_matrix_market_round_trip(tmp_path):
    K = assemble_stiffness(square(3))
    save_matrix(tmp_path / "K.mtx", K)
    assert abs(load_matrix(tmp_path / "K.mtx") - K).max() == 0.0


# -- trilinear form ----------------------------------------------------------------------


def _plane_oracle(mesh, a, b, c):
    """Per element: fit planes through nodal values, integrate with the edge-midpoint rule."""
    total = 0.0
    for tri in mesh.triangles:
        P = mesh.vertices[tri]
        Amat = np.column_stack([np.ones(3), P])
        ga = np.linalg.solve(Amat, a[tri])[1:]
        gb = np.linalg.solve(Amat, b[tri])[1:]
        F = ga[0] * gb[1] - ga[1] * gb[0]
        area = 0.5 * abs(np.linalg.det(np.column_stack([P[1] - P[0], P[2] - P[0]])))
        mids = [(c[tri[i]] + c[tri[(i + 1) % 3]]) / 2 for i in range(3)]
        total += F * area * np.mean(mids)
    return total


def test_trilinear_coordinate_functions():
    m = square(4)
    t = TrilinearForm(m)
    x1, x2 = interpolate(m, lambda x, y: x), interpolate(m, lambda x, y: y)
    one = np.ones(m.n_vertices)
    assert abs(t(x1, x2, one) - 1.0) < 1e-13
    assert abs(_plane_oracle(m, x1, x2, one) - 1.0) < 1e-13


def test_trilinear_against_plane_oracle():
    m = generate_structured_rectangle(3, 4, extent=(0, 2, 0, 1))
    rng = np.random.default_rng(1)
    a, b, c = rng.standard_normal((3, m.n_vertices))
    assert abs(TrilinearForm(m)(a, b, c) - _plane_oracle(m, a, b, c)) < 1e-12


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_trilinear_antisymmetry_and_linearity(seed):
    m = square(3)
    t = TrilinearForm(m)
    rng = np.random.default_rng(seed)
    v, r, w, d = rng.standard_normal((4, m.n_vertices))
    assert abs(t(v, v, w)) < 1e-12
    assert abs(t(v, r, w) + t(r, v, w)) < 1e-12
    eps = 0.37
    assert abs(t(v + eps * d, r, w) - t(v, r, w) - eps * t(d, r, w)) < 1e-12


def test_trilinear_derivative_objects():
    m = square(3)
    t = TrilinearForm(m)
    rng = np.random.default_rng(2)
    a, b, c = rng.standard_normal((3, m.n_vertices))
    n = m.n_vertices
    E = np.eye(n)
    ga = np.array([t(E[i], b, c) for i in range(n)])
    gb = np.array([t(a, E[i], c) for i in range(n)])
    gc = np.array([t(a, b, E[i]) for i in range(n)])
    np.testing.assert_allclose(t.grad_a(b, c), ga, atol=1e-13)
    np.testing.assert_allclose(t.grad_b(a, c), gb, atol=1e-13)
    np.testing.assert_allclose(t.grad_c(a, b), gc, atol=1e-13)
    H = np.array([[t(E[i], E[j], c) for j in range(n)] for i in range(n)])
    np.testing.assert_allclose(t.matrix_ab(c).toarray(), H, atol=1e-13)
    Dca = np.array([[t(E[j], b, E[k]) for j in range(n)] for k in range(n)])
    np.testing.assert_allclose(t.matrix_ca(b).toarray(), Dca, atol=1e-13)
    Dcb = np.array([[t(a, E[j], E[k]) for j in range(n)] for k in range(n)])
    np.testing.assert_allclose(t.matrix_cb(a).toarray(), Dcb, atol=1e-13)


def test_reduced_tensor_matches_direct():
    m = square(4)
    t = TrilinearForm(m)
    rng = np.random.default_rng(5)
    Va, Vb, Vc = (rng.standard_normal((m.n_vertices, k)) for k in (3, 2, 4))
    T = t.reduced_tensor(Va, Vb, Vc)
    assert T.shape == (3, 2, 4)
    for i in range(3):
        for j in range(2):
            for k in range(4):
                assert abs(T[i, j, k] - t(Va[:, i], Vb[:, j], Vc[:, k])) < 1e-12
    TT = t.reduced_tensor(Va, Va, Vc)
    c = rng.standard_normal(3)
    np.testing.assert_allclose(np.einsum("ijk,i,j->k", TT, c, c), 0.0, atol=1e-12)


# -- Poincare / trace constants ---------------------------------------------------------------


def _dense_gen_max(A, B):
    return sla.eigh(A, B, eigvals_only=True)[-1]


def test_poincare_against_dense_oracle():
    m = square(6, tagging={"west": NEUMANN})
    f = DofMap.from_mesh(m).free_dofs
    M = assemble_mass(m)[f][:, f].toarray()
    K = assemble_stiffness(m)[f][:, f].toarray()
    assert abs(compute_poincare_constant(m) - _dense_gen_max(M, K)) < 1e-9 * _dense_gen_max(M, K)


def test_trace_against_dense_oracle():
    m = square(6, tagging={"west": NEUMANN, "south": NEUMANN})
    f = DofMap.from_mesh(m).free_dofs
    G = assemble_boundary_mass(m, NEUMANN)[f][:, f].toarray()
    H = (assemble_mass(m) + assemble_stiffness(m))[f][:, f].toarray()
    ref = _dense_gen_max(G, H)
    assert abs(compute_trace_constant(m, NEUMANN) - ref) < 1e-9 * ref


def test_poincare_monotone_under_refinement():
    # nested P1 spaces: the discrete Rayleigh-quotient maximum can only grow
    # toward the continuous value 1/(2 pi^2) on the unit square
    c = [compute_poincare_constant(square(n)) for n in (4, 8, 16)]
    assert c[0] <= c[1] <= c[2] <= 1 / (2 * np.pi**2) + 1e-12


def test_gulf_coercivity_condition():
    m = gulf_mesh(16)
    cp = compute_poincare_constant(m)
    ct = compute_trace_constant(m, NEUMANN)
    assert (cp + 1.0) * ct < np.sqrt(2) / 2


def test_gulf_symmetric_part_positive_on_box():
    from ocprom.cases import gulf_case

    d = gulf_case(gulf_mesh(8))
    for mu in ([0.5, -1, -1], [0.5, 1, 1], [0.5, -1, 1], [0.5, 1, -1], [1, 0, 0]):
        A = d.A(np.array(mu, dtype=float)).toarray()
        assert np.linalg.eigvalsh(0.5 * (A + A.T)).min() > 0


def test_no_neumann_trace_is_zero():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert compute_trace_constant(square(3), NEUMANN) == 0.0
