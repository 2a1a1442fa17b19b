"""Study orchestration: training snapshots, offline build, test-set statistics, CSV output."""

from __future__ import annotations

import json
import logging
import math
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cases import builtin_case, default_mesh
from .mesh import load_mesh
from .ocp import NewtonDivergenceError, NewtonOptions, WellPosednessError, solve
from .quadrature import Distribution1D, make_rule, monte_carlo_rule
from .rom import TENSOR, ReducedSingularError, project_offline, solve_online
from .wpod import SnapshotSet, pod_partitioned, save_eigenvalues_csv

log = logging.getLogger(__name__)

FIELDS = ("y", "u", "p", "J")
ERROR_FLOOR = 1e-20
SOLVE_ERRORS = (WellPosednessError, NewtonDivergenceError, ReducedSingularError, np.linalg.LinAlgError)


@dataclass
class StudyConfig:
    """Everything a study needs. JSON keys mirror the field names.

    ``dists`` holds one distribution string per parameter component
    (``uniform``, ``beta:a:b``, ``loguniform``); a single string is broadcast.
    ``train_size`` is the node count of sampling rules and the per-dimension
    node count of tensor rules.
    """

    case: str = "gulf"
    mesh_n: int | None = None
    mesh_path: str | None = None
    dists: list = field(default_factory=lambda: ["uniform"])
    rule: str = "mc"
    train_size: int = 100
    train_seed: int = 0
    test_size: int = 100
    test_seed: int = 1
    N_values: list = field(default_factory=lambda: list(range(1, 21)))
    aggregated: bool = True
    pod: str = "weighted"
    nl_mode: str = TENSOR
    density: str = "pdf"
    alpha: float | None = None
    workers: int = 1
    output: str | None = None

    def __post_init__(self):
        if self.train_size < 1 or self.test_size < 1:
            raise ValueError("training and test sizes must be >= 1")
        if isinstance(self.dists, str):
            self.dists = [self.dists]
        self.N_values = [int(n) for n in self.N_values]
        if any(n < 1 for n in self.N_values):
            raise ValueError("N values must be >= 1")

    @classmethod
    def from_json(cls, path) -> "StudyConfig":
        data = json.loads(Path(path).read_text())
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config key(s) {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def smoke(cls, **kw) -> "StudyConfig":
        """Desk-scale profile: 30 training and 20 test points."""
        base = dict(train_size=30, test_size=20, N_values=list(range(1, 11)))
        base.update(kw)
        return cls(**base)


@dataclass
class ErrorRecord:
    mu: np.ndarray
    N: int
    e_y: float
    e_u: float
    e_p: float
    e_J: float
    speedup: float
    absolute: tuple = ()

    def value(self, name: str) -> float:
        return getattr(self, f"e_{name}")


class RunningStats:
    """Welford's streaming mean and unbiased variance."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self._m2 = 0.0
        self.min = math.inf
        self.max = -math.inf

    def push(self, x: float) -> None:
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self._m2 += d * (x - self.mean)
        self.min = min(self.min, x)
        self.max = max(self.max, x)

    @property
    def std(self) -> float:
        return math.sqrt(self._m2 / (self.n - 1)) if self.n > 1 else 0.0


def _rel(diff_norm, ref_norm):
    if ref_norm == 0.0:
        return diff_norm, True
    return diff_norm / ref_norm, False


def _qnorm(X, v) -> float:
    return math.sqrt(max(float(v @ (X @ v)), 0.0))


def compute_relative_errors(truth, reduced, norms, N: int = 0) -> ErrorRecord:
    """Relative errors in the ``(X_Y, X_U, X_P)`` norms plus the objective.

    A zero truth component makes the error absolute; its field name is listed
    in ``ErrorRecord.absolute``.
    """
    X_Y, X_U, X_P = norms
    absolute = []
    vals = {}
    for name, X, a, b in (("y", X_Y, truth.y, reduced.y), ("u", X_U, truth.u, reduced.u), ("p", X_P, truth.p, reduced.p)):
        if a.shape != b.shape:
            raise ValueError(f"dof layout mismatch for {name}")
        vals[name], flag = _rel(_qnorm(X, a - b), _qnorm(X, a))
        if flag:
            absolute.append(name)
    vals["J"], flag = _rel(abs(truth.J - reduced.J), abs(truth.J))
    if flag:
        absolute.append("J")
    speed = truth.wall_time / reduced.wall_time if reduced.wall_time > 0 else math.inf
    return ErrorRecord(np.asarray(truth.mu), N, vals["y"], vals["u"], vals["p"], vals["J"], speed, tuple(absolute))


@dataclass
class StudyReport:
    config: StudyConfig
    N_values: list
    error_stats: dict  # (N, field) -> RunningStats of log10 errors
    speedup_stats: dict  # N -> RunningStats
    eigenvalues: dict
    records: list
    failures: list
    system_sizes: dict
    train_failures: list
    timings: dict

    def mean_log10(self, N: int, name: str = "y") -> float:
        return self.error_stats[(N, name)].mean

    def failure_count(self, N: int | None = None) -> int:
        return sum(1 for f in self.failures if N is None or f["N"] == N)


def build_distributions(config: StudyConfig, box) -> list:
    spec = list(config.dists)
    if len(spec) == 1:
        spec = spec * len(box)
    if len(spec) != len(box):
        raise ValueError(f"{len(spec)} distributions for {len(box)} parameters")
    return [Distribution1D.parse(s, lo, hi) for s, (lo, hi) in zip(spec, box)]


def build_definition(config: StudyConfig):
    mesh = load_mesh(config.mesh_path) if config.mesh_path else default_mesh(config.case, config.mesh_n)
    overrides = {} if config.alpha is None else {"alpha": config.alpha}
    return builtin_case(config.case, mesh, **overrides)


def _map(fn, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _safe_solve(definition, mu, opts):
    try:
        return solve(definition, mu, opts)
    except SOLVE_ERRORS as exc:
        log.warning("truth solve failed: %s", exc)
        return exc


def train_snapshots(config: StudyConfig, definition, opts: NewtonOptions | None = None):
    """Truth solves at the training rule's nodes, grouped into per-component snapshot sets.

    Failed solves are dropped together with their weights and reported.
    """
    opts = opts or NewtonOptions()
    dists = build_distributions(config, definition.box)
    train = make_rule(config.rule, dists, config.train_size, config.train_seed, config.density)
    sols = _map(lambda m: _safe_solve(definition, m, opts), list(train.nodes), config.workers)
    ok = [i for i, s in enumerate(sols) if not isinstance(s, Exception)]
    failures = [
        {"mu": train.nodes[i].tolist(), "error": str(s)} for i, s in enumerate(sols) if isinstance(s, Exception)
    ]
    if not ok:
        raise RuntimeError("every training solve failed")
    weights = train.weights[ok]
    comp_X = definition.component_norm_matrices()
    sets = {
        name: SnapshotSet(np.column_stack([sols[i].component(definition, name) for i in ok]), weights, X)
        for name, X in comp_X.items()
    }
    return sets, failures


def build_reduced_model(config: StudyConfig, N: int, definition=None, opts=None):
    """Offline phase only: returns ``(model, full_bases)``."""
    definition = definition if definition is not None else build_definition(config)
    sets, _ = train_snapshots(config, definition, opts)
    bases = pod_partitioned(sets, N, formulation=config.pod)
    model = project_offline(definition, bases, aggregated=config.aggregated, mode=config.nl_mode)
    return model, bases


def run_study(config: StudyConfig, definition=None, newton_opts: NewtonOptions | None = None) -> StudyReport:
    """Training, offline compression and test-set evaluation for every N in the range."""
    t_start = time.perf_counter()
    definition = definition if definition is not None else build_definition(config)
    dists = build_distributions(config, definition.box)
    test = monte_carlo_rule(dists, config.test_size, config.test_seed)
    opts = newton_opts or NewtonOptions()
    sets, train_failures = train_snapshots(config, definition, opts)
    t_train = time.perf_counter()
    n_max = max(config.N_values, default=1)
    full_bases = pod_partitioned(sets, n_max, formulation=config.pod)
    eigen = {name: b.eigenvalues for name, b in full_bases.items()}

    # truth test solves once; one untimed warm-up solve first
    _safe_solve(definition, test.nodes[0], opts)
    test_sols = _map(lambda m: _safe_solve(definition, m, opts), list(test.nodes), config.workers)
    t_test = time.perf_counter()

    norms = (definition.X_Y, definition.X_U, definition.X_P)
    error_stats, speedup_stats, records, failures, sizes = {}, {}, [], [], {}
    for N in config.N_values:
        bases = {name: b.truncate(N) if b.N > N else b for name, b in full_bases.items()}
        model = project_offline(definition, bases, aggregated=config.aggregated, mode=config.nl_mode)
        sizes[N] = model.dim
        stats = {f: RunningStats() for f in FIELDS}
        sp_stats = RunningStats()
        try:
            solve_online(model, test.nodes[0], opts)  # warm-up, untimed
        except SOLVE_ERRORS:
            pass
        for mu, truth in zip(test.nodes, test_sols):
            if isinstance(truth, Exception):
                failures.append({"N": N, "mu": mu.tolist(), "stage": "truth", "error": str(truth)})
                continue
            try:
                red = solve_online(model, mu, opts)
            except SOLVE_ERRORS as exc:
                failures.append({"N": N, "mu": mu.tolist(), "stage": "reduced", "error": str(exc)})
                continue
            rec = compute_relative_errors(truth, red, norms, N)
            records.append(rec)
            for f in FIELDS:
                stats[f].push(math.log10(max(rec.value(f), ERROR_FLOOR)))
            sp_stats.push(rec.speedup)
        for f in FIELDS:
            error_stats[(N, f)] = stats[f]
        speedup_stats[N] = sp_stats
        log.info("N=%d size=%d mean log10 e_y=%.3f", N, model.dim, stats["y"].mean)
    t_end = time.perf_counter()
    timings = {
        "training": t_train - t_start,
        "test_truth": t_test - t_train,
        "online": t_end - t_test,
    }
    return StudyReport(
        config, list(config.N_values), error_stats, speedup_stats, eigen, records, failures, sizes,
        train_failures, timings,
    )


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.17g}"


def emit_results(report: StudyReport, directory) -> dict:
    """Write ``errors.csv``, ``speedup.csv``, ``eigenvalues.csv`` and ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {k: d / f"{k}.csv" for k in ("errors", "speedup", "eigenvalues")}
    lines = ["N,field,mean_log10,std_log10"]
    for N in report.N_values:
        for f in FIELDS:
            s = report.error_stats[(N, f)]
            mean = s.mean if s.n else float("nan")
            lines.append(f"{N},{f},{_fmt(mean)},{_fmt(s.std)}")
    paths["errors"].write_text("\n".join(lines) + "\n")
    lines = ["N,avg,min,max,std"]
    for N in report.N_values:
        s = report.speedup_stats[N]
        if s.n:
            lines.append(f"{N},{_fmt(s.mean)},{_fmt(s.min)},{_fmt(s.max)},{_fmt(s.std)}")
        else:
            lines.append(f"{N},nan,nan,nan,nan")
    paths["speedup"].write_text("\n".join(lines) + "\n")
    eig = report.eigenvalues if report.N_values else {}
    save_eigenvalues_csv(paths["eigenvalues"], eig)
    manifest = {
        "package_version": __version__,
        "config": asdict(report.config),
        "system_sizes": {str(k): v for k, v in report.system_sizes.items()},
        "test_failures": len(report.failures),
        "training_failures": len(report.train_failures),
        "failures": report.failures,
        "files": {k: p.name for k, p in paths.items()},
        "notes": "speedup.csv is wall-clock based and machine dependent; errors.csv and eigenvalues.csv are deterministic",
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    out = {k: str(p) for k, p in paths.items()}
    out["manifest"] = str(d / "manifest.json")
    return out
