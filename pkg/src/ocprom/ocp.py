"""Linear-quadratic optimal control problems with affine parameter dependence.

The discrete optimality system solved for ``(y, u, p)`` is::

    [ C^T M C      0       A^T ] [y]   [ C^T M z_d ]
    [    0      alpha Q    B^T ] [u] = [     0     ]
    [    A         B        0  ] [p]   [     g     ]

with every operator given as an affine sum ``sum_q theta_q(mu) * block_q``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class WellPosednessError(RuntimeError):
    """Truth system singular or not solved to tolerance at ``mu``."""

    def __init__(self, message, mu=None):
        super().__init__(f"{message} (mu={None if mu is None else np.asarray(mu).tolist()})")
        self.mu = mu


class NewtonDivergenceError(RuntimeError):
    def __init__(self, message, mu=None, residuals=()):
        super().__init__(
            f"{message} (mu={None if mu is None else np.asarray(mu).tolist()}, "
            f"residuals={[float(f'{r:.3e}') for r in residuals]})"
        )
        self.mu = mu
        self.residuals = list(residuals)


class Theta:
    """Affine coefficient: a product of parameter components, ``1`` if empty.

    ``Theta()`` is the constant 1, ``Theta(0)`` is ``mu[0]``, ``Theta(0, 2)``
    is ``mu[0] * mu[2]``.
    """

    __slots__ = ("indices",)

    def __init__(self, *indices):
        object.__setattr__(self, "indices", tuple(sorted(int(i) for i in indices)))

    def __setattr__(self, name, value):
        raise AttributeError("Theta is immutable")

    def __call__(self, mu) -> float:
        out = 1.0
        for i in self.indices:
            out *= float(mu[i])
        return out

    def __mul__(self, other: "Theta") -> "Theta":
        return Theta(*(self.indices + other.indices))

    def __eq__(self, other):
        return isinstance(other, Theta) and self.indices == other.indices

    def __hash__(self):
        return hash(self.indices)

    def __repr__(self):
        return f"Theta({str(self)!r})"

    def __str__(self):
        return "*".join(f"mu[{i}]" for i in self.indices) or "1"

    @classmethod
    def parse(cls, text: str) -> "Theta":
        text = text.strip()
        if text == "1":
            return cls()
        idx = []
        for factor in text.split("*"):
            factor = factor.strip()
            if not (factor.startswith("mu[") and factor.endswith("]")):
                raise ValueError(f"cannot parse coefficient {text!r}")
            idx.append(int(factor[3:-1]))
        return cls(*idx)


ONE = Theta()


class AffineFamily:
    """``sum_q theta_q(mu) * block_q`` with a fixed summation order."""

    def __init__(self, terms):
        self.terms = [(theta, blk) for theta, blk in terms]
        if not self.terms:
            raise ValueError("affine family needs at least one term")
        shapes = {blk.shape for _, blk in self.terms}
        if len(shapes) != 1:
            raise ValueError(f"inconsistent block shapes {shapes}")
        self.shape = shapes.pop()

    def __len__(self):
        return len(self.terms)

    @property
    def thetas(self):
        return [t for t, _ in self.terms]

    @property
    def blocks(self):
        return [b for _, b in self.terms]

    def coefficients(self, mu) -> np.ndarray:
        return np.array([t(mu) for t, _ in self.terms])

    def __call__(self, mu):
        out = None
        for theta, blk in self.terms:
            c = theta(mu)
            out = c * blk if out is None else out + c * blk
        return out

    def is_constant(self) -> bool:
        return all(not t.indices for t in self.thetas)


@dataclass
class TrilinearTerm:
    """``mu[mu_index] * t(v, rho, w)`` with ``v, rho`` state components and ``w`` an adjoint component.

    ``form`` acts on full vertex vectors; ``injection`` maps a component's
    free dofs into vertex space.
    """

    form: object
    mu_index: int
    v: str
    rho: str
    w: str
    injection: sp.csr_matrix


@dataclass
class NewtonOptions:
    tol: float = 1e-10
    max_iter: int = 25
    damping: bool = False
    divergence_window: int = 3


@dataclass
class OCPDefinition:
    """All data of a parametrized linear-quadratic (or mildly nonlinear) OCP.

    Component layouts are ordered lists of ``(name, slice)`` into the state,
    control and adjoint vectors. State component ``i`` pairs with adjoint
    component ``i`` for aggregation.
    """

    name: str
    A: AffineFamily
    B: AffineFamily
    M: AffineFamily
    Q: AffineFamily
    g: AffineFamily
    z_d: AffineFamily
    C: sp.csr_matrix
    X_Y: sp.csr_matrix
    X_U: sp.csr_matrix
    X_P: sp.csr_matrix
    state_components: list
    control_components: list
    adjoint_components: list
    alpha: float
    box: np.ndarray
    L0: float = 1.0
    trilinear: TrilinearTerm | None = None
    mesh: object = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=float)
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        ny, nu, npp = self.n_state, self.n_control, self.n_adjoint
        expect = {
            "A": (npp, ny), "B": (npp, nu), "Q": (nu, nu), "g": (npp,),
            "M": (self.C.shape[0], self.C.shape[0]), "z_d": (self.C.shape[0],),
        }
        for key, shape in expect.items():
            if getattr(self, key).shape != shape:
                raise ValueError(f"{key} has shape {getattr(self, key).shape}, expected {shape}")
        if self.C.shape[1] != ny:
            raise ValueError("observation operator does not match the state dimension")
        for X, n in ((self.X_Y, ny), (self.X_U, nu), (self.X_P, npp)):
            if X.shape != (n, n):
                raise ValueError("norm matrix dimension mismatch")

    @property
    def n_state(self) -> int:
        return self.X_Y.shape[0]

    @property
    def n_control(self) -> int:
        return self.X_U.shape[0]

    @property
    def n_adjoint(self) -> int:
        return self.X_P.shape[0]

    @property
    def n_params(self) -> int:
        return self.box.shape[0]

    @property
    def is_nonlinear(self) -> bool:
        return self.trilinear is not None

    def component_norm_matrices(self) -> dict:
        """Norm matrix of every named component, keyed by component name."""
        out = {}
        for comps, X in (
            (self.state_components, self.X_Y),
            (self.control_components, self.X_U),
            (self.adjoint_components, self.X_P),
        ):
            for name, sl in comps:
                out[name] = X[sl, sl].tocsr()
        return out

    def check_mu(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (self.n_params,):
            raise ValueError(f"mu must have {self.n_params} components")
        return mu

    def with_z_d(self, z_d) -> "OCPDefinition":
        fields_ = dict(self.__dict__)
        fields_["extras"] = dict(self.extras)
        fields_["z_d"] = AffineFamily([(ONE, np.asarray(z_d, dtype=float))])
        return OCPDefinition(**fields_)

    def nonlinear_mu(self, mu) -> float:
        return 0.0 if self.trilinear is None else float(mu[self.trilinear.mu_index])


@dataclass
class TruthSolution:
    y: np.ndarray
    u: np.ndarray
    p: np.ndarray
    J: float
    mu: np.ndarray
    residual: float = 0.0
    iterations: int = 1
    wall_time: float = 0.0
    residual_trace: list = field(default_factory=list)

    def component(self, definition: OCPDefinition, name: str) -> np.ndarray:
        for comps, vec in (
            (definition.state_components, self.y),
            (definition.control_components, self.u),
            (definition.adjoint_components, self.p),
        ):
            for cname, sl in comps:
                if cname == name:
                    return vec[sl]
        raise KeyError(name)


def _as_sparse(blk):
    return blk if sp.issparse(blk) else sp.csr_matrix(blk)


def kkt_rhs(definition: OCPDefinition, mu) -> np.ndarray:
    M, z_d = definition.M(mu), definition.z_d(mu)
    return np.concatenate(
        [definition.C.T @ (M @ z_d), np.zeros(definition.n_control), np.asarray(definition.g(mu))]
    )


def assemble_kkt(definition: OCPDefinition, mu):
    """Sparse saddle-point matrix and right-hand side at ``mu`` (trilinear term excluded)."""
    mu = definition.check_mu(mu)
    A = _as_sparse(definition.A(mu))
    B = _as_sparse(definition.B(mu))
    Q = _as_sparse(definition.Q(mu))
    C = definition.C
    obs = (C.T @ _as_sparse(definition.M(mu)) @ C).tocsr()
    K = sp.bmat(
        [
            [obs, None, A.T],
            [None, definition.alpha * Q, B.T],
            [A, B, None],
        ],
        format="csc",
    )
    return K, kkt_rhs(definition, mu)


def objective(definition: OCPDefinition, mu, y, u) -> float:
    """``1/2 <M (Cy - z_d), Cy - z_d> + alpha/2 <Q u, u>``."""
    r = definition.C @ y - definition.z_d(mu)
    Q = definition.Q(mu)
    return float(0.5 * r @ (definition.M(mu) @ r) + 0.5 * definition.alpha * u @ (Q @ u))


def _split(definition, x):
    ny, nu = definition.n_state, definition.n_control
    return x[:ny], x[ny : ny + nu], x[ny + nu :]


def _lu_solve(K, rhs, mu):
    try:
        lu = spla.splu(K.tocsc())
    except RuntimeError as exc:
        raise WellPosednessError(f"singular truth factorization: {exc}", mu) from exc
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise WellPosednessError("non-finite truth solution", mu)
    return lu, x


def solve_truth(definition: OCPDefinition, mu, tol: float = 1e-10) -> TruthSolution:
    """Solve the linear optimality system by sparse LU (trilinear term ignored).

    One step of iterative refinement is applied if the relative residual
    exceeds ``tol``; failure after that raises :class:`WellPosednessError`.
    """
    mu = definition.check_mu(mu)
    t0 = time.perf_counter()
    K, rhs = assemble_kkt(definition, mu)
    nb = np.linalg.norm(rhs)
    if nb == 0.0:
        x = np.zeros(K.shape[0])
        res = 0.0
    else:
        lu, x = _lu_solve(K, rhs, mu)
        r = rhs - K @ x
        res = np.linalg.norm(r) / nb
        if res > tol:
            x = x + lu.solve(r)
            res = np.linalg.norm(rhs - K @ x) / nb
    elapsed = time.perf_counter() - t0
    if res > tol:
        raise WellPosednessError(f"truth residual {res:.2e} above {tol:.0e}", mu)
    y, u, p = _split(definition, x)
    return TruthSolution(y, u, p, objective(definition, mu, y, u), mu, res, 1, elapsed, [res])


def reduced_gradient(definition: OCPDefinition, mu, u) -> tuple[float, np.ndarray]:
    """``J(y(u), u)`` and its gradient ``alpha Q u + B^T p`` via the adjoint (linear state)."""
    mu = definition.check_mu(mu)
    A = _as_sparse(definition.A(mu)).tocsc()
    B = definition.B(mu)
    y = spla.spsolve(A, np.asarray(definition.g(mu)) - B @ u)
    r = definition.C @ y - definition.z_d(mu)
    adj_rhs = -(definition.C.T @ (definition.M(mu) @ r))
    p = spla.spsolve(A.T.tocsc(), adj_rhs)
    grad = definition.alpha * (definition.Q(mu) @ u) + B.T @ p
    return objective(definition, mu, y, u), np.asarray(grad).ravel()


def reduced_objective(definition: OCPDefinition, mu, u) -> float:
    mu = definition.check_mu(mu)
    A = _as_sparse(definition.A(mu)).tocsc()
    y = spla.spsolve(A, np.asarray(definition.g(mu)) - definition.B(mu) @ u)
    return objective(definition, mu, y, u)


# -- nonlinear ------------------------------------------------------------------


def _component_slice(comps, name):
    for cname, sl in comps:
        if cname == name:
            return sl
    raise KeyError(name)


class _FullNonlinearity:
    """Residual and Hessian contributions of ``mu3 * t(v, rho, w)`` at full order."""

    def __init__(self, definition: OCPDefinition):
        tri = definition.trilinear
        self.t = tri.form
        self.E = tri.injection
        self.sv = _component_slice(definition.state_components, tri.v)
        self.sr = _component_slice(definition.state_components, tri.rho)
        self.sw = _component_slice(definition.adjoint_components, tri.w)
        self.ny, self.nu, self.np_ = definition.n_state, definition.n_control, definition.n_adjoint

    def contributions(self, y, p, scale):
        """Gradient vector and Hessian (sparse, full KKT layout) of ``scale * t``."""
        E = self.E
        v, rho, w = E @ y[self.sv], E @ y[self.sr], E @ p[self.sw]
        ny, nu = self.ny, self.nu
        n = ny + nu + self.np_
        g = np.zeros(n)
        g[self.sv] = scale * (E.T @ self.t.grad_a(rho, w))
        g[self.sr] = scale * (E.T @ self.t.grad_b(v, w))
        off = ny + nu
        g[off + self.sw.start : off + self.sw.stop] = scale * (E.T @ self.t.grad_c(v, rho))

        H_vr = scale * (E.T @ self.t.matrix_ab(w) @ E)
        D_wv = scale * (E.T @ self.t.matrix_ca(rho) @ E)
        D_wr = scale * (E.T @ self.t.matrix_cb(v) @ E)
        wsl = slice(off + self.sw.start, off + self.sw.stop)
        blocks = [
            (self.sv, self.sr, H_vr), (self.sr, self.sv, H_vr.T),
            (wsl, self.sv, D_wv), (self.sv, wsl, D_wv.T),
            (wsl, self.sr, D_wr), (self.sr, wsl, D_wr.T),
        ]
        rows, cols, vals = [], [], []
        for rs, cs, blk in blocks:
            c = blk.tocoo()
            rows.append(c.row + rs.start)
            cols.append(c.col + cs.start)
            vals.append(c.data)
        H = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        ).tocsc()
        return g, H


def newton_solve(residual_and_jacobian, x0, rhs_norm, opts: NewtonOptions, mu, solve):
    """Plain Newton with optional halving on residual increase.

    Returns ``(x, residual_trace)``; residuals are relative to ``rhs_norm``.
    """
    x = x0.copy()
    scale = rhs_norm if rhs_norm > 0 else 1.0
    R, Jac = residual_and_jacobian(x)
    trace = [np.linalg.norm(R) / scale]
    growth = 0
    for _ in range(opts.max_iter):
        if trace[-1] <= opts.tol:
            return x, trace
        dx = solve(Jac, -R)
        step = 1.0
        x_new = x + dx
        R_new, Jac_new = residual_and_jacobian(x_new)
        res_new = np.linalg.norm(R_new) / scale
        if opts.damping:
            while res_new > trace[-1] and step > 1.0 / 64:
                step *= 0.5
                x_new = x + step * dx
                R_new, Jac_new = residual_and_jacobian(x_new)
                res_new = np.linalg.norm(R_new) / scale
        growth = growth + 1 if res_new > trace[-1] else 0
        x, R, Jac = x_new, R_new, Jac_new
        trace.append(res_new)
        if not np.isfinite(res_new) or growth >= opts.divergence_window:
            raise NewtonDivergenceError("Newton iteration diverged", mu, trace)
    if trace[-1] <= opts.tol:
        return x, trace
    raise NewtonDivergenceError(f"Newton did not converge in {opts.max_iter} iterations", mu, trace)


def solve_truth_nonlinear(
    definition: OCPDefinition, mu, newton_opts: NewtonOptions | None = None
) -> TruthSolution:
    """Newton on the coupled nonlinear optimality system.

    The Jacobian is the Hessian of the discrete Lagrangian, so the adjoint
    equation uses the exact derivative of the discrete trilinear term.
    Starts from the linear solution at the same ``mu``.
    """
    opts = newton_opts or NewtonOptions()
    mu = definition.check_mu(mu)
    mu3 = definition.nonlinear_mu(mu)
    t0 = time.perf_counter()
    if definition.trilinear is None or mu3 == 0.0:
        sol = solve_truth(definition, mu, tol=max(opts.tol, 1e-10))
        sol.iterations = 0
        return sol
    K, rhs = assemble_kkt(definition, mu)
    nl = _FullNonlinearity(definition)
    ny, nu = definition.n_state, definition.n_control

    def F(x):
        g, H = nl.contributions(x[:ny], x[ny + nu :], mu3)
        return K @ x - rhs + g, (K + H).tocsc()

    def lin_solve(Jac, r):
        try:
            return spla.splu(Jac).solve(r)
        except RuntimeError as exc:
            raise WellPosednessError(f"singular Newton Jacobian: {exc}", mu) from exc

    _, x0 = _lu_solve(K, rhs, mu)
    x, trace = newton_solve(F, x0, np.linalg.norm(rhs), opts, mu, lin_solve)
    elapsed = time.perf_counter() - t0
    y, u, p = _split(definition, x)
    J = objective(definition, mu, y, u)
    return TruthSolution(y, u, p, J, mu, trace[-1], len(trace) - 1, elapsed, trace)


def solve(definition: OCPDefinition, mu, newton_opts: NewtonOptions | None = None) -> TruthSolution:
    """Dispatch to the linear or Newton truth solver."""
    if definition.is_nonlinear:
        return solve_truth_nonlinear(definition, mu, newton_opts)
    return solve_truth(definition, mu)


def solve_state(definition: OCPDefinition, mu, u, newton_opts: NewtonOptions | None = None):
    """Solve only the state equation ``A(mu) y + mu3 N(y) + B u = g``."""
    opts = newton_opts or NewtonOptions()
    mu = definition.check_mu(mu)
    A = _as_sparse(definition.A(mu)).tocsc()
    b = np.asarray(definition.g(mu)) - definition.B(mu) @ u
    if not np.any(b):
        return np.zeros(definition.n_state)
    try:
        y = spla.splu(A).solve(b)
    except RuntimeError as exc:
        raise WellPosednessError(f"singular state operator: {exc}", mu) from exc
    mu3 = definition.nonlinear_mu(mu)
    if mu3 == 0.0:
        return y
    tri = definition.trilinear
    E, t = tri.injection, tri.form
    sv = _component_slice(definition.state_components, tri.v)
    sr = _component_slice(definition.state_components, tri.rho)
    # the nonlinear term tests against the adjoint slot's equation rows
    sw = _component_slice(definition.adjoint_components, tri.w)
    n = definition.n_state

    def F(y):
        v, rho = E @ y[sv], E @ y[sr]
        R = A @ y - b
        R[sw] += mu3 * (E.T @ t.grad_c(v, rho))
        Dv = mu3 * (E.T @ t.matrix_ca(rho) @ E)
        Dr = mu3 * (E.T @ t.matrix_cb(v) @ E)
        rows, cols, vals = [], [], []
        for D, cs in ((Dv, sv), (Dr, sr)):
            c = D.tocoo()
            rows.append(c.row + sw.start)
            cols.append(c.col + cs.start)
            vals.append(c.data)
        Jn = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )
        return R, (A + Jn).tocsc()

    y, _ = newton_solve(F, y, np.linalg.norm(b), opts, mu, lambda J, r: spla.splu(J).solve(r))
    return y


def generate_desired_state(definition: OCPDefinition, forcing, mu_gen, component: str | None = None):
    """Observation-space target from a state-only solve at ``mu_gen`` with control ``forcing``.

    Returns the named state component (default: the first) extended to vertex
    space through the observation operator's column layout.
    """
    forcing = np.asarray(forcing, dtype=float)
    if forcing.shape != (definition.n_control,):
        raise ValueError("forcing must be a control-space vector")
    y = solve_state(definition, mu_gen, forcing)
    name = component or definition.state_components[0][0]
    sl = _component_slice(definition.state_components, name)
    only = np.zeros_like(y)
    only[sl] = y[sl]
    return np.asarray(definition.C @ only).ravel()
