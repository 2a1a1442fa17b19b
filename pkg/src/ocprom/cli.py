"""Command-line interface.

Subcommands::

    ocprom mesh-gen    --case gulf --n 32 --output gulf32.mesh
    ocprom truth-solve --case gulf --mu 0.75 0.2 -0.3
    ocprom offline     --case gulf --N 20 --output model/
    ocprom online      --model model/ --mu 0.75 0.2 -0.3
    ocprom study       --config study.json --output results/

Study-type commands accept a JSON config (keys are the fields of
:class:`ocprom.harness.StudyConfig`); explicit flags override it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .cases import CASES, default_mesh
from .harness import (
    StudyConfig,
    build_definition,
    build_reduced_model,
    emit_results,
    run_study,
)
from .mesh import DIRICHLET, NEUMANN, SIDES, generate_structured_rectangle, save_mesh
from .ocp import NewtonOptions, solve
from .quadrature import RULE_ALIASES
from .rom import MODES, load_reduced_model, save_reduced_model, solve_online
from .wpod import save_eigenvalues_csv

log = logging.getLogger("ocprom")


def _add_case_args(p):
    p.add_argument("--config", type=Path, help="JSON study configuration")
    p.add_argument("--case", choices=CASES)
    p.add_argument("--mesh", dest="mesh_path", help="mesh file (overrides --n)")
    p.add_argument("--n", dest="mesh_n", type=int, help="cells per side of the built-in mesh")
    p.add_argument("--alpha", type=float, help="control penalty override")


def _add_study_args(p):
    _add_case_args(p)
    p.add_argument("--seed", type=int, help="training seed; the test seed is seed + 1")
    p.add_argument("--rule", choices=sorted(set(RULE_ALIASES) | set(RULE_ALIASES.values())))
    p.add_argument(
        "--dist",
        dest="dists",
        action="append",
        help="per-component law: uniform | beta:a:b | loguniform (repeat per component; one value broadcasts)",
    )
    p.add_argument("--train-size", type=int)
    p.add_argument("--test-size", type=int)
    p.add_argument("--no-aggregation", dest="aggregated", action="store_false", default=None)
    p.add_argument("--pod", choices=("snapshot", "weighted"))
    p.add_argument("--nl-mode", choices=MODES)
    p.add_argument("--density", choices=("pdf", "transform"), help="Clenshaw-Curtis weighting")
    p.add_argument("--workers", type=int)


def _config_from(args) -> StudyConfig:
    data = {}
    if getattr(args, "config", None):
        data = asdict(StudyConfig.from_json(args.config))
    for key in (
        "case", "mesh_path", "mesh_n", "alpha", "rule", "dists", "train_size", "test_size",
        "aggregated", "pod", "nl_mode", "density", "workers",
    ):
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    if getattr(args, "seed", None) is not None:
        data["train_seed"] = args.seed
        data["test_seed"] = args.seed + 1
    if getattr(args, "N_values", None):
        data["N_values"] = args.N_values
    return StudyConfig(**data)


def _parse_range(text: str) -> list:
    """``"1:20"`` (inclusive), ``"1,5,10"`` or a single integer."""
    if ":" in text:
        parts = [int(t) for t in text.split(":")]
        lo, hi = parts[0], parts[1]
        step = parts[2] if len(parts) > 2 else 1
        return list(range(lo, hi + 1, step))
    return [int(t) for t in text.split(",") if t]


def cmd_mesh_gen(args) -> int:
    if args.case:
        mesh = default_mesh(args.case, args.mesh_n)
    else:
        tagging = {s: NEUMANN for s in (args.neumann or [])}
        mesh = generate_structured_rectangle(
            args.mesh_n or 8, args.ny or args.mesh_n or 8, extent=tuple(args.extent), tagging=tagging
        )
    save_mesh(mesh, args.output)
    print(f"wrote {args.output}: {mesh.n_vertices} vertices, {mesh.n_triangles} triangles, "
          f"{len(mesh.boundary_edges)} boundary edges")
    return 0


def _newton(args):
    return NewtonOptions(tol=args.newton_tol, max_iter=args.newton_max_iter, damping=args.damping)


def cmd_truth_solve(args) -> int:
    config = _config_from(args)
    definition = build_definition(config)
    mu = np.asarray(args.mu, dtype=float)
    sol = solve(definition, mu, _newton(args))
    summary = {
        "case": definition.name,
        "mu": mu.tolist(),
        "J": sol.J,
        "residual": float(sol.residual),
        "iterations": sol.iterations,
        "wall_time": sol.wall_time,
        "n_state": definition.n_state,
        "n_control": definition.n_control,
    }
    print(json.dumps(summary, indent=2))
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        for name, vec in (("y", sol.y), ("u", sol.u), ("p", sol.p)):
            np.savetxt(out / f"{name}.txt", vec, fmt="%.17g")
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return 0


def cmd_offline(args) -> int:
    config = _config_from(args)
    definition = build_definition(config)
    model, bases = build_reduced_model(config, args.N, definition)
    out = Path(args.output)
    save_reduced_model(model, out)
    save_eigenvalues_csv(out / "eigenvalues.csv", {k: b.eigenvalues for k, b in bases.items()})
    (out / "study_config.json").write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")
    print(f"reduced model for {definition.name}: system size {model.dim}, "
          f"aggregated={model.aggregated}, mode={model.mode} -> {out}")
    return 0


def cmd_online(args) -> int:
    mdir = Path(args.model)
    manifest = json.loads((mdir / "manifest.json").read_text())
    definition = None
    if manifest["online_assembly_mode"] != "tensor" and manifest["nonlinear"]:
        cfg_path = mdir / "study_config.json"
        definition = build_definition(StudyConfig.from_json(cfg_path))
    model = load_reduced_model(mdir, definition)
    sol = solve_online(model, np.asarray(args.mu, dtype=float), _newton(args))
    print(json.dumps({
        "case": model.name,
        "mu": sol.mu.tolist(),
        "J": sol.J,
        "system_size": model.dim,
        "iterations": sol.iterations,
        "wall_time": sol.wall_time,
    }, indent=2))
    return 0


def cmd_study(args) -> int:
    config = _config_from(args)
    if args.output:
        config.output = str(args.output)
    if not config.output:
        raise SystemExit("study needs --output or an 'output' config key")
    report = run_study(config, newton_opts=_newton(args))
    paths = emit_results(report, config.output)
    for N in report.N_values:
        s = report.error_stats[(N, "y")]
        sp = report.speedup_stats[N]
        print(f"N={N:3d} size={report.system_sizes[N]:4d} mean_log10_e_y={s.mean:8.3f} "
              f"speedup={sp.mean:8.1f}")
    print(f"failures: {len(report.failures)} test, {len(report.train_failures)} training")
    print("wrote " + ", ".join(paths.values()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ocprom", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh-gen", help="write a structured mesh")
    p.add_argument("--case", choices=CASES, help="built-in case geometry")
    p.add_argument("--n", dest="mesh_n", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--extent", type=float, nargs=4, default=(0.0, 1.0, 0.0, 1.0), metavar=("X0", "X1", "Y0", "Y1"))
    p.add_argument("--neumann", nargs="*", choices=SIDES, help=f"sides tagged {NEUMANN} (others {DIRICHLET})")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_mesh_gen)

    def newton_flags(q):
        q.add_argument("--newton-tol", type=float, default=1e-10)
        q.add_argument("--newton-max-iter", type=int, default=25)
        q.add_argument("--damping", action="store_true")

    p = sub.add_parser("truth-solve", help="solve the full-order optimality system at one mu")
    _add_case_args(p)
    p.add_argument("--mu", type=float, nargs="+", required=True)
    p.add_argument("--output", help="directory for y.txt, u.txt, p.txt")
    newton_flags(p)
    p.set_defaults(func=cmd_truth_solve)

    p = sub.add_parser("offline", help="train, compress and project a reduced model")
    _add_study_args(p)
    p.add_argument("--N", type=int, required=True, help="POD modes per field")
    p.add_argument("--output", required=True)
    newton_flags(p)
    p.set_defaults(func=cmd_offline)

    p = sub.add_parser("online", help="solve a saved reduced model at one mu")
    p.add_argument("--model", required=True)
    p.add_argument("--mu", type=float, nargs="+", required=True)
    newton_flags(p)
    p.set_defaults(func=cmd_online)

    p = sub.add_parser("study", help="error-decay and speedup study")
    _add_study_args(p)
    p.add_argument("--N", dest="N_values", type=_parse_range, help="N range, e.g. 1:20 or 1,5,10")
    p.add_argument("--output")
    newton_flags(p)
    p.set_defaults(func=cmd_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
