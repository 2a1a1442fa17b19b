"""Offline Galerkin projection and online reduced optimality solves.

The reduced unknown is ``(y_N, u_N, p_N)`` where each vector concatenates the
coefficients of the component bases in the component order of the
definition. With aggregation, state component ``i`` and adjoint component
``i`` share one basis spanning both POD spaces.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.io import mmread, mmwrite

from .ocp import (
    ONE,
    NewtonDivergenceError,
    NewtonOptions,
    OCPDefinition,
    Theta,
    newton_solve,
)
from .wpod import PODBasis, aggregate

log = logging.getLogger(__name__)

TENSOR = "tensor"
FULL_ORDER = "full"
MODES = (TENSOR, FULL_ORDER)


class ReducedSingularError(RuntimeError):
    def __init__(self, message, mu=None):
        super().__init__(f"{message} (mu={None if mu is None else np.asarray(mu).tolist()})")
        self.mu = mu


@dataclass
class ReducedSolution:
    coefficients: dict
    y: np.ndarray
    u: np.ndarray
    p: np.ndarray
    J: float
    mu: np.ndarray
    wall_time: float
    iterations: int = 1
    residual_trace: list = field(default_factory=list)
    reduced: np.ndarray | None = None


def _dense(mat):
    return mat.toarray() if sp.issparse(mat) else np.asarray(mat, dtype=float)


def _as_matrix(b):
    if isinstance(b, PODBasis):
        return b.vectors
    return np.asarray(b, dtype=float).reshape(len(b), -1)


def _block_diag(mats, sizes_rows):
    rows = sum(sizes_rows)
    cols = sum(m.shape[1] for m in mats)
    out = np.zeros((rows, cols))
    r = c = 0
    for m in mats:
        out[r : r + m.shape[0], c : c + m.shape[1]] = m
        r += m.shape[0]
        c += m.shape[1]
    return out


class ReducedModel:
    """Projected affine blocks plus the bases that define them.

    Parameters
    ----------
    component_bases
        Mapping from every component name (state, control and adjoint) to its
        basis matrix ``(component dofs, n)``.
    layout
        ``{"state": [...], "control": [...], "adjoint": [...]}`` lists of
        ``(name, full_slice)``.
    families
        Projected affine families: ``A, B, obs, Q, g, obs_rhs, zz`` as lists of
        ``(Theta, array)``.
    """

    def __init__(
        self,
        name,
        component_bases,
        layout,
        families,
        alpha,
        n_params,
        aggregated,
        mode=TENSOR,
        tensor=None,
        nonlinear=None,
        definition=None,
    ):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.name = name
        self.component_bases = {k: np.asarray(v) for k, v in component_bases.items()}
        self.layout = layout
        self.families = families
        self.alpha = float(alpha)
        self.n_params = int(n_params)
        self.aggregated = bool(aggregated)
        self.mode = mode
        self.tensor = tensor
        self.nonlinear = nonlinear  # dict(mu_index, v, rho, w) or None
        self.definition = definition
        self._build_slices()
        self._build_stacks()

    # -- layout ------------------------------------------------------------
    def _build_slices(self):
        self.slices = {}
        self.sizes = {}
        off = 0
        for group in ("state", "control", "adjoint"):
            start = off
            for cname, _ in self.layout[group]:
                n = self.component_bases[cname].shape[1]
                self.slices[cname] = slice(off, off + n)
                off += n
            self.sizes[group] = off - start
        self.dim = off
        self._group_slice = {
            "state": slice(0, self.sizes["state"]),
            "control": slice(self.sizes["state"], self.sizes["state"] + self.sizes["control"]),
            "adjoint": slice(self.sizes["state"] + self.sizes["control"], self.dim),
        }

    def basis(self, group: str) -> np.ndarray:
        """Block-diagonal basis of a whole group in full-order layout."""
        comps = self.layout[group]
        mats = [self.component_bases[c] for c, _ in comps]
        rows = [sl.stop - sl.start for _, sl in comps]
        return _block_diag(mats, rows)

    @property
    def system_size(self) -> int:
        return self.dim

    # -- affine stacks -------------------------------------------------------
    def _build_stacks(self):
        n = self.dim
        ys, us, ps = (self._group_slice[g] for g in ("state", "control", "adjoint"))
        terms: dict[Theta, np.ndarray] = {}

        def add(theta, rs, cs, blk):
            T = terms.setdefault(theta, np.zeros((n, n)))
            T[rs, cs] += blk

        for theta, blk in self.families["A"]:
            add(theta, ps, ys, blk)
            add(theta, ys, ps, blk.T)
        for theta, blk in self.families["B"]:
            add(theta, ps, us, blk)
            add(theta, us, ps, blk.T)
        for theta, blk in self.families["obs"]:
            add(theta, ys, ys, blk)
        for theta, blk in self.families["Q"]:
            add(theta, us, us, self.alpha * blk)
        self._k_thetas = list(terms)
        self._k_stack = np.array([terms[t] for t in self._k_thetas]) if terms else np.zeros((0, n, n))

        rhs: dict[Theta, np.ndarray] = {}
        for theta, vec in self.families["obs_rhs"]:
            rhs.setdefault(theta, np.zeros(n))[ys] += vec
        for theta, vec in self.families["g"]:
            rhs.setdefault(theta, np.zeros(n))[ps] += vec
        self._r_thetas = list(rhs)
        self._r_stack = np.array([rhs[t] for t in self._r_thetas]) if rhs else np.zeros((0, n))

    def kkt(self, mu):
        """Dense reduced saddle matrix and right-hand side at ``mu``."""
        ck = np.array([t(mu) for t in self._k_thetas])
        cr = np.array([t(mu) for t in self._r_thetas])
        return np.tensordot(ck, self._k_stack, axes=1), np.tensordot(cr, self._r_stack, axes=1)

    def objective(self, mu, x) -> float:
        y, u = x[self._group_slice["state"]], x[self._group_slice["control"]]
        J = 0.0
        for theta, blk in self.families["obs"]:
            J += 0.5 * theta(mu) * (y @ (blk @ y))
        for theta, vec in self.families["obs_rhs"]:
            J -= theta(mu) * (y @ vec)
        for theta, val in self.families["zz"]:
            J += 0.5 * theta(mu) * float(val)
        for theta, blk in self.families["Q"]:
            J += 0.5 * self.alpha * theta(mu) * (u @ (blk @ u))
        return float(J)

    # -- lifting ----------------------------------------------------------------
    def lift(self, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        out = []
        for group in ("state", "control", "adjoint"):
            parts = [self.component_bases[c] @ x[self.slices[c]] for c, _ in self.layout[group]]
            out.append(np.concatenate(parts) if parts else np.zeros(0))
        return tuple(out)

    def restrict(self, y, u, p) -> np.ndarray:
        """Euclidean coefficients ``V^T x`` per component (not an X-projection)."""
        vecs = {"state": y, "control": u, "adjoint": p}
        out = np.zeros(self.dim)
        for group, v in vecs.items():
            for c, sl in self.layout[group]:
                out[self.slices[c]] = self.component_bases[c].T @ v[sl]
        return out

    def _solution(self, x, mu, elapsed, iterations=1, trace=None):
        y, u, p = self.lift(x)
        coeffs = {c: x[self.slices[c]].copy() for c in self.slices}
        return ReducedSolution(
            coeffs, y, u, p, self.objective(mu, x), np.asarray(mu, dtype=float), elapsed,
            iterations, list(trace or []), x,
        )

    # -- nonlinear term -----------------------------------------------------------
    def nonlinear_contributions(self, x, scale):
        """Gradient and Hessian of ``scale * t(v, rho, w)`` in reduced coordinates."""
        nl = self.nonlinear
        sv, sr, sw = (self.slices[nl[k]] for k in ("v", "rho", "w"))
        a, b, c = x[sv], x[sr], x[sw]
        if self.mode == TENSOR:
            T = self.tensor
            Tc = T @ c  # (i, j)
            ga = Tc @ b
            gb = a @ Tc
            gc = np.einsum("ijk,i,j->k", T, a, b)
            H_vr = Tc
            D_wv = np.einsum("ijk,j->ki", T, b)
            D_wr = np.einsum("ijk,i->kj", T, a)
        else:
            d = self.definition
            if d is None or d.trilinear is None:
                raise RuntimeError("FULL_ORDER mode needs the full-order definition attached")
            t, E = d.trilinear.form, d.trilinear.injection
            if not hasattr(self, "_lifted"):
                self._lifted = tuple(E @ self.component_bases[nl[k]] for k in ("v", "rho", "w"))
            Vv, Vr, Vw = self._lifted
            v, rho, w = Vv @ a, Vr @ b, Vw @ c
            ga = Vv.T @ t.grad_a(rho, w)
            gb = Vr.T @ t.grad_b(v, w)
            gc = Vw.T @ t.grad_c(v, rho)
            H_vr = Vv.T @ (t.matrix_ab(w) @ Vr)
            D_wv = Vw.T @ (t.matrix_ca(rho) @ Vv)
            D_wr = Vw.T @ (t.matrix_cb(v) @ Vr)
        g = np.zeros(self.dim)
        H = np.zeros((self.dim, self.dim))
        g[sv] += scale * ga
        g[sr] += scale * gb
        g[sw] += scale * gc
        H[sv, sr] += scale * H_vr
        H[sr, sv] += scale * H_vr.T
        H[sw, sv] += scale * D_wv
        H[sv, sw] += scale * D_wv.T
        H[sw, sr] += scale * D_wr
        H[sr, sw] += scale * D_wr.T
        return g, H

    # -- serialization ---------------------------------------------------------------
    def save(self, directory) -> None:
        save_reduced_model(self, directory)


# ---------------------------------------------------------------------------------------


def _component_x(definition: OCPDefinition):
    return definition.component_norm_matrices()


def build_component_bases(definition: OCPDefinition, bases: dict, aggregated: bool) -> dict:
    """Final per-component bases, aggregating state/adjoint pairs if requested."""
    out = {}
    for group in (definition.state_components, definition.control_components, definition.adjoint_components):
        for name, sl in group:
            if name not in bases:
                raise KeyError(f"no basis supplied for component {name!r}")
            V = _as_matrix(bases[name])
            if V.shape[0] != sl.stop - sl.start:
                raise ValueError(
                    f"basis for {name!r} has {V.shape[0]} rows, component has {sl.stop - sl.start} dofs"
                )
            if V.shape[1] == 0:
                raise ValueError(f"empty basis for component {name!r}")
            out[name] = V
    if aggregated:
        X = _component_x(definition)
        for (sname, _), (pname, _) in zip(definition.state_components, definition.adjoint_components):
            Z = aggregate(out[sname], out[pname], X[sname])
            out[sname] = Z
            out[pname] = Z
    return out


def project_offline(
    definition: OCPDefinition,
    bases: dict,
    aggregated: bool = True,
    mode: str = TENSOR,
) -> ReducedModel:
    """Project every affine term once onto the (possibly aggregated) bases."""
    cb = build_component_bases(definition, bases, aggregated)
    layout = {
        "state": list(definition.state_components),
        "control": list(definition.control_components),
        "adjoint": list(definition.adjoint_components),
    }
    Vy = _block_diag([cb[c] for c, _ in layout["state"]], [sl.stop - sl.start for _, sl in layout["state"]])
    Vu = _block_diag([cb[c] for c, _ in layout["control"]], [sl.stop - sl.start for _, sl in layout["control"]])
    Vp = _block_diag([cb[c] for c, _ in layout["adjoint"]], [sl.stop - sl.start for _, sl in layout["adjoint"]])
    C = definition.C
    CVy = np.asarray(C @ Vy)

    def proj(left, blk, right):
        return left.T @ np.asarray(blk @ right)

    fam = {
        "A": [(t, proj(Vp, b, Vy)) for t, b in definition.A.terms],
        "B": [(t, proj(Vp, b, Vu)) for t, b in definition.B.terms],
        "obs": [(t, proj(CVy, b, CVy)) for t, b in definition.M.terms],
        "Q": [(t, proj(Vu, b, Vu)) for t, b in definition.Q.terms],
        "g": [(t, Vp.T @ np.asarray(b)) for t, b in definition.g.terms],
        "obs_rhs": [],
        "zz": [],
    }
    for tm, Mb in definition.M.terms:
        for tz, z in definition.z_d.terms:
            Mz = np.asarray(Mb @ z)
            fam["obs_rhs"].append((tm * tz, CVy.T @ Mz))
            for tz2, z2 in definition.z_d.terms:
                fam["zz"].append((tm * tz * tz2, np.array(float(z2 @ Mz))))

    tensor = None
    nonlinear = None
    if definition.trilinear is not None:
        tri = definition.trilinear
        nonlinear = {"mu_index": tri.mu_index, "v": tri.v, "rho": tri.rho, "w": tri.w}
        if mode == TENSOR:
            E = tri.injection
            tensor = tri.form.reduced_tensor(E @ cb[tri.v], E @ cb[tri.rho], E @ cb[tri.w])
    return ReducedModel(
        definition.name, cb, layout, fam, definition.alpha, definition.n_params,
        aggregated, mode, tensor, nonlinear, definition,
    )


def _dense_solve(K, rhs, mu):
    try:
        with warnings.catch_warnings():
            # an exactly singular pivot is reported below as ReducedSingularError
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu = sla.lu_factor(K, check_finite=False)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise ReducedSingularError(f"reduced factorization failed: {exc}", mu) from exc
    if np.any(np.diag(lu[0]) == 0.0):
        raise ReducedSingularError("singular reduced system", mu)
    x = sla.lu_solve(lu, rhs, check_finite=False)
    if not np.all(np.isfinite(x)):
        raise ReducedSingularError("non-finite reduced solution", mu)
    if log.isEnabledFor(logging.DEBUG):
        log.debug("reduced condition number %.3e at mu=%s", np.linalg.cond(K), np.asarray(mu).tolist())
    return x


def solve_reduced(model: ReducedModel, mu) -> ReducedSolution:
    """Linear reduced solve (the trilinear term, if any, is ignored)."""
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (model.n_params,):
        raise ValueError(f"mu must have {model.n_params} components")
    t0 = time.perf_counter()
    K, rhs = model.kkt(mu)
    x = _dense_solve(K, rhs, mu) if np.any(rhs) else np.zeros(model.dim)
    elapsed = time.perf_counter() - t0
    return model._solution(x, mu, elapsed)


def solve_reduced_nonlinear(
    model: ReducedModel, mu, newton_opts: NewtonOptions | None = None
) -> ReducedSolution:
    """Newton on the reduced nonlinear optimality system, from the reduced linear solution."""
    opts = newton_opts or NewtonOptions()
    mu = np.asarray(mu, dtype=float)
    if model.nonlinear is None or mu[model.nonlinear["mu_index"]] == 0.0:
        sol = solve_reduced(model, mu)
        sol.iterations = 0
        return sol
    t0 = time.perf_counter()
    scale = float(mu[model.nonlinear["mu_index"]])
    K, rhs = model.kkt(mu)
    x0 = _dense_solve(K, rhs, mu)

    def F(x):
        g, H = model.nonlinear_contributions(x, scale)
        return K @ x - rhs + g, K + H

    x, trace = newton_solve(F, x0, np.linalg.norm(rhs), opts, mu, lambda J, r: _dense_solve(J, r, mu))
    elapsed = time.perf_counter() - t0
    return model._solution(x, mu, elapsed, len(trace) - 1, trace)


def solve_online(model: ReducedModel, mu, newton_opts=None) -> ReducedSolution:
    if model.nonlinear is not None:
        return solve_reduced_nonlinear(model, mu, newton_opts)
    return solve_reduced(model, mu)


# -- serialization --------------------------------------------------------------------


def write_block(path, name: str, theta: Theta, array) -> None:
    """Text header line then little-endian float64 row-major payload."""
    # np.asarray(order="C") keeps 0-d arrays 0-d (ascontiguousarray would not)
    arr = np.asarray(array, dtype="<f8", order="C")
    shape = " ".join(str(s) for s in arr.shape)
    header = f"term={name} coefficient={theta} ndim={arr.ndim} shape={shape}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(arr.tobytes(order="C"))


def read_block(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip()
        payload = fh.read()
    fields_ = {}
    rest = header
    for key in ("term", "coefficient", "ndim"):
        k, _, rest = rest.partition(" ")
        fk, _, fv = k.partition("=")
        if fk != key:
            raise ValueError(f"bad block header in {path}: {header!r}")
        fields_[key] = fv
    if not rest.startswith("shape="):
        raise ValueError(f"bad block header in {path}: {header!r}")
    shape = tuple(int(s) for s in rest[len("shape="):].split()) if int(fields_["ndim"]) else ()
    arr = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(float)
    return fields_["term"], Theta.parse(fields_["coefficient"]), arr


def save_reduced_model(model: ReducedModel, directory) -> None:
    d = Path(directory)
    (d / "bases").mkdir(parents=True, exist_ok=True)
    (d / "blocks").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "ocprom-reduced-model/1",
        "case": model.name,
        "aggregated": model.aggregated,
        "online_assembly_mode": model.mode,
        "alpha": model.alpha,
        "n_params": model.n_params,
        "system_size": model.dim,
        "layout": {
            g: [[c, sl.start, sl.stop] for c, sl in model.layout[g]] for g in model.layout
        },
        "bases": {},
        "terms": [],
        "nonlinear": model.nonlinear,
        "tensor": None,
    }
    written = {}
    for cname, V in model.component_bases.items():
        key = id(V)
        if key in written:  # aggregated pairs share one file
            manifest["bases"][cname] = written[key]
            continue
        fname = f"bases/{cname}.mtx"
        mmwrite(str(d / fname), V, precision=17)
        manifest["bases"][cname] = written[key] = fname
    for fam_name, terms in model.families.items():
        for q, (theta, blk) in enumerate(terms):
            fname = f"blocks/{fam_name}_{q}.bin"
            write_block(d / fname, fam_name, theta, blk)
            manifest["terms"].append({"family": fam_name, "index": q, "coefficient": str(theta), "file": fname})
    if model.tensor is not None:
        write_block(d / "blocks/trilinear.bin", "trilinear", ONE, model.tensor)
        manifest["tensor"] = "blocks/trilinear.bin"
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_reduced_model(directory, definition: OCPDefinition | None = None) -> ReducedModel:
    """Inverse of :func:`save_reduced_model`; FULL_ORDER mode needs ``definition``."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    cache = {}
    bases = {}
    for cname, fname in manifest["bases"].items():
        if fname not in cache:
            cache[fname] = np.asarray(mmread(str(d / fname)), dtype=float)
        bases[cname] = cache[fname]
    families = {k: [] for k in ("A", "B", "obs", "Q", "g", "obs_rhs", "zz")}
    for term in sorted(manifest["terms"], key=lambda t: (t["family"], t["index"])):
        name, theta, arr = read_block(d / term["file"])
        families[name].append((theta, arr))
    layout = {g: [(c, slice(a, b)) for c, a, b in v] for g, v in manifest["layout"].items()}
    tensor = None
    if manifest["tensor"]:
        tensor = read_block(d / manifest["tensor"])[2]
    return ReducedModel(
        manifest["case"], bases, layout, families, manifest["alpha"], manifest["n_params"],
        manifest["aggregated"], manifest["online_assembly_mode"], tensor, manifest["nonlinear"],
        definition,
    )
