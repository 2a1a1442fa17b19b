"""Built-in optimal control cases on synthetic rectangular domains.

``gulf``
    Advection-diffusion pollution control with a scalar source on a control
    subdomain and a tracking target on a distant observation subdomain.
``stommel_munk``
    Linear streamfunction/vorticity ocean model, distributed control.
``qg_nonlinear``
    ``stommel_munk`` plus the quasi-geostrophic Jacobian term.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .fem import (
    DofMap,
    TrilinearForm,
    assemble_advection,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    interpolate,
)
from .mesh import CONTROL, DIRICHLET, NEUMANN, OBSERVATION, Mesh, generate_structured_rectangle
from .ocp import (
    ONE,
    AffineFamily,
    OCPDefinition,
    Theta,
    TrilinearTerm,
    generate_desired_state,
)

CASES = ("gulf", "stommel_munk", "qg_nonlinear")

GULF_EXTENT = (0.0, 0.5, 0.0, 0.5)
GULF_TAGGING = {"west": NEUMANN, "south": NEUMANN, "east": DIRICHLET, "north": DIRICHLET}
# boxes as fractions of the extent; multiples of 1/8 so that grids with nx % 8 == 0 align
GULF_CONTROL_BOX = (0.125, 0.375, 0.625, 0.875)
GULF_OBSERVATION_BOX = (0.625, 0.875, 0.125, 0.375)

GULF_BOX = [(0.5, 1.0), (-1.0, 1.0), (-1.0, 1.0)]
# the linear model shares the three-component box; mu3 is inert there
QG_BOX = [(1e-4, 1.0), (0.07**3, 1.0), (1e-4, 0.045**2)]
STOMMEL_BOX = QG_BOX

STOMMEL_MU_GEN = (0.0, 0.07**3, 0.0)
QG_MU_GEN = (0.0, 0.07**3, 0.07**2)


def _scaled_box(frac, extent):
    x0, x1, y0, y1 = extent
    fx0, fx1, fy0, fy1 = frac
    return (x0 + fx0 * (x1 - x0), x0 + fx1 * (x1 - x0), y0 + fy0 * (y1 - y0), y0 + fy1 * (y1 - y0))


def gulf_mesh(n: int = 32) -> Mesh:
    """Square pollution-control analog with Neumann west/south sides."""
    return generate_structured_rectangle(
        n,
        n,
        extent=GULF_EXTENT,
        tagging=GULF_TAGGING,
        subdomains=[
            (CONTROL, _scaled_box(GULF_CONTROL_BOX, GULF_EXTENT)),
            (OBSERVATION, _scaled_box(GULF_OBSERVATION_BOX, GULF_EXTENT)),
        ],
    )


def stommel_mesh(n: int = 24) -> Mesh:
    """Unit-square ocean basin, Dirichlet everywhere."""
    return generate_structured_rectangle(n, n)


def default_mesh(name: str, n: int | None = None) -> Mesh:
    if name == "gulf":
        return gulf_mesh(n or 32)
    if name in ("stommel_munk", "qg_nonlinear"):
        return stommel_mesh(n or 24)
    raise KeyError(f"unknown case {name!r}; choose from {CASES}")


def _restrict(mat, rows, cols):
    return sp.csr_matrix(mat[rows][:, cols])


def _require_labels(mesh: Mesh, labels):
    missing = [lab for lab in labels if lab not in mesh.label_set()]
    if missing:
        raise KeyError(f"mesh lacks required subdomain label(s) {missing}")


def gulf_case(mesh: Mesh, alpha: float = 1e-7, L0: float = 1000.0, target: float = 0.2) -> OCPDefinition:
    """Scalar-source pollution control.

    ``A(mu) = mu1 K + mu2 D1 + mu3 D2`` on free dofs, ``B = -L0 int_{Omega_u} phi``,
    ``J = 1/2 int_{Omega_obs} |y - target|^2 + alpha/2 |Omega_u| u^2``.
    The target is stored as a constant vertex vector; only its product with the
    observation mass matrix enters, which is the exact projection of the
    indicator-scaled target.
    """
    _require_labels(mesh, [CONTROL, OBSERVATION])
    dofs = DofMap.from_mesh(mesh)
    f = dofs.free_dofs
    n = mesh.n_vertices
    K = assemble_stiffness(mesh)
    D1 = assemble_advection(mesh, 1)
    D2 = assemble_advection(mesh, 2)
    M = assemble_mass(mesh)
    A = AffineFamily(
        [(Theta(0), _restrict(K, f, f)), (Theta(1), _restrict(D1, f, f)), (Theta(2), _restrict(D2, f, f))]
    )
    load_u = assemble_load(mesh, CONTROL)
    area_u = float(load_u.sum())
    B = AffineFamily([(ONE, sp.csr_matrix(-L0 * load_u[f][:, None]))])
    Mobs = AffineFamily([(ONE, assemble_mass(mesh, OBSERVATION))])
    Q = AffineFamily([(ONE, sp.csr_matrix([[area_u]]))])
    g = AffineFamily([(ONE, np.zeros(len(f)))])
    z_d = AffineFamily([(ONE, np.full(n, target))])
    X = _restrict(K + M, f, f)
    nf = len(f)
    return OCPDefinition(
        name="gulf",
        A=A, B=B, M=Mobs, Q=Q, g=g, z_d=z_d,
        C=dofs.injection(),
        X_Y=X, X_U=sp.csr_matrix([[1.0]]), X_P=X.copy(),
        state_components=[("y", slice(0, nf))],
        control_components=[("u", slice(0, 1))],
        adjoint_components=[("p", slice(0, nf))],
        alpha=alpha, box=GULF_BOX, L0=L0, mesh=mesh,
        extras={"dofmap": dofs, "area_control": area_u},
    )


def _stommel_blocks(mesh: Mesh):
    dofs = DofMap.from_mesh(mesh)
    f = dofs.free_dofs
    nf = len(f)
    K = assemble_stiffness(mesh)
    M = assemble_mass(mesh)
    D1 = assemble_advection(mesh, 1)
    Kf, Mf, D1f = (_restrict(X, f, f) for X in (K, M, D1))
    Z = sp.csr_matrix((nf, nf))
    # rows: (w-test = v equation, q-test = rho equation); columns: (v, rho)
    A_const = sp.bmat([[D1f, None], [Kf, Mf]], format="csr")
    A_mu1 = sp.bmat([[Z, Mf], [Z, Z]], format="csr")
    A_mu2 = sp.bmat([[Z, Kf], [Z, Z]], format="csr")
    return dofs, K, M, A_const, A_mu1, A_mu2


def stommel_munk_case(
    mesh: Mesh,
    alpha: float = 1e-5,
    nonlinear: bool = False,
    forcing=None,
    mu_gen=None,
) -> OCPDefinition:
    """Streamfunction ``v`` / vorticity ``rho`` system with distributed control.

    The desired streamfunction is generated by a state-only solve at
    ``mu_gen`` with control ``forcing`` (default ``-sin(pi x2)``).
    """
    dofs, K, M, A_const, A_mu1, A_mu2 = _stommel_blocks(mesh)
    f = dofs.free_dofs
    nf, n = len(f), mesh.n_vertices
    A = AffineFamily([(ONE, A_const), (Theta(0), A_mu1), (Theta(1), A_mu2)])
    B = AffineFamily([(ONE, sp.vstack([-M[f], sp.csr_matrix((nf, n))]).tocsr())])
    E = dofs.injection()
    C = sp.hstack([E, sp.csr_matrix((n, nf))]).tocsr()
    Xf = _restrict(K + M, f, f)
    X2 = sp.block_diag([Xf, Xf], format="csr")
    trilinear = None
    if nonlinear:
        trilinear = TrilinearTerm(TrilinearForm(mesh), mu_index=2, v="v", rho="rho", w="w", injection=E)
    definition = OCPDefinition(
        name="qg_nonlinear" if nonlinear else "stommel_munk",
        A=A,
        B=B,
        M=AffineFamily([(ONE, M)]),
        Q=AffineFamily([(ONE, M.copy())]),
        g=AffineFamily([(ONE, np.zeros(2 * nf))]),
        z_d=AffineFamily([(ONE, np.zeros(n))]),
        C=C,
        X_Y=X2,
        X_U=M.copy(),
        X_P=X2.copy(),
        state_components=[("v", slice(0, nf)), ("rho", slice(nf, 2 * nf))],
        control_components=[("u", slice(0, n))],
        adjoint_components=[("w", slice(0, nf)), ("q", slice(nf, 2 * nf))],
        alpha=alpha,
        box=QG_BOX if nonlinear else STOMMEL_BOX,
        trilinear=trilinear,
        mesh=mesh,
        extras={"dofmap": dofs},
    )
    if forcing is None:
        forcing = interpolate(mesh, lambda x1, x2: -np.sin(np.pi * x2))
    if mu_gen is None:
        mu_gen = QG_MU_GEN if nonlinear else STOMMEL_MU_GEN
    z_d = generate_desired_state(definition, forcing, mu_gen, component="v")
    definition = definition.with_z_d(z_d)
    definition.extras.update(mu_gen=tuple(float(m) for m in mu_gen))
    return definition


def builtin_case(name: str, mesh: Mesh | None = None, **overrides) -> OCPDefinition:
    """Build one of ``gulf``, ``stommel_munk``, ``qg_nonlinear``.

    ``overrides`` are passed to the case constructor (e.g. ``alpha``).
    """
    mesh = mesh if mesh is not None else default_mesh(name)
    if name == "gulf":
        return gulf_case(mesh, **overrides)
    if name == "stommel_munk":
        return stommel_munk_case(mesh, **overrides)
    if name == "qg_nonlinear":
        return stommel_munk_case(mesh, nonlinear=True, **overrides)
    raise KeyError(f"unknown case {name!r}; choose from {CASES}")
