"""Command-line front end: scenario ingestion, pipeline stages, reports.

Subcommands mirror the pipeline: `riccati` solves and dumps the two matrix
solutions, `phi` the backward pair, `simulate` the closed-loop ensemble,
`verify` the full optimality battery, and `report` renders previously written
artifacts.  Exit codes: 0 success, 2 validation/input failure (message names
the failing clause or artifact), 3 numerical divergence.

Every stage writes CSV bodies deterministically (same manifest, same bytes);
wall-clock timings live only in manifest.json.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .core import SpecError, load_spec, validate_assumptions
from .cost import evaluate_cost_mc, value_function
from .matode import IntegrationDivergedError
from .mfbsde import ConditioningError
from .riccati import KernelSingularError, solve_riccati
from .synthesis import stationarity_residual
from .verify import PROFILES, run_verification, solve_phi, synthesize

__all__ = ["RunManifest", "main"]

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGED = 3


@dataclass
class RunManifest:
    """Provenance of a stage run; identical manifests reproduce identical CSVs."""

    command: str
    scenario: str
    seed: int
    paths: int
    substeps: int
    degree: int
    out_dir: str
    tol_profile: str
    version: str = __version__
    timings: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> None:
        payload = {
            "command": self.command,
            "scenario": self.scenario,
            "seed": self.seed,
            "paths": self.paths,
            "substeps": self.substeps,
            "degree": self.degree,
            "out_dir": self.out_dir,
            "tol_profile": self.tol_profile,
            "version": self.version,
            "timings": self.timings,
        }
        (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _np_default(o):
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _json_dump(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_np_default) + "\n")


def _mat_cols(prefix: str, r: int, c: int) -> list[str]:
    return [f"{prefix}_{i}{j}" for i in range(r) for j in range(c)]


def _vec_cols(prefix: str, n: int) -> list[str]:
    return [f"{prefix}_{i}" for i in range(n)]


def _stage_riccati(spec, args, out: Path, timings: dict):
    t0 = time.perf_counter()
    ric = solve_riccati(spec, substeps=args.substeps)
    timings["riccati_s"] = time.perf_counter() - t0
    n = spec.n
    header = (["t"] + _mat_cols("sigma", n, n) + _mat_cols("gamma", n, n)
              + ["min_eig_sigma", "min_eig_gamma", "cond_kernel"])
    rows = []
    for k in range(spec.grid.N + 1):
        s_eigs = np.linalg.eigvalsh((ric.sigma[k] + ric.sigma[k].T) / 2)
        g_eigs = np.linalg.eigvalsh((ric.gamma[k] + ric.gamma[k].T) / 2)
        rows.append([spec.grid.nodes[k], *ric.sigma[k].ravel(), *ric.gamma[k].ravel(),
                     s_eigs[0], g_eigs[0], ric.cond_k1[k]])
    _write_csv(out / "riccati.csv", header, rows)
    return ric


def _stage_phi(spec, args, out: Path, timings: dict, ric=None):
    if ric is None:
        ric = _stage_riccati(spec, args, out, timings)
    t0 = time.perf_counter()
    pair = solve_phi(spec, ric, args.paths, args.seed, degree=args.degree, substeps=args.substeps)
    timings["phi_s"] = time.perf_counter() - t0
    n = spec.n
    header = ["t"] + _vec_cols("mean_phi", n) + _vec_cols("mean_beta", n)
    extra_cols: list[str] = []
    if pair.kind == "linear-gaussian":
        extra_cols = _vec_cols("p", n) + _vec_cols("q", n)
    elif pair.kind == "regression":
        d = pair.degree
        extra_cols = (["basis_mu", "basis_sd"]
                      + [f"coef_phi_p{p}_{i}" for p in range(d + 1) for i in range(n)]
                      + [f"coef_beta_p{p}_{i}" for p in range(d + 1) for i in range(n)])
    rows = []
    for k in range(spec.grid.N + 1):
        row = [spec.grid.nodes[k], *pair.mean_phi[k], *pair.mean_beta[k]]
        if pair.kind == "linear-gaussian":
            row += [*pair.p_nodes[k], *pair.q_nodes[k]]
        elif pair.kind == "regression":
            row += [pair.basis_mu[k], pair.basis_sd[k],
                    *pair.coef_phi[k].ravel(), *pair.coef_beta[k].ravel()]
        rows.append(row)
    _write_csv(out / "phi.csv", header + extra_cols, rows)
    return ric, pair


def _stage_simulate(spec, args, out: Path, timings: dict):
    t0 = time.perf_counter()
    ric, pair, ens = synthesize(spec, args.paths, args.seed, substeps=args.substeps, degree=args.degree)
    timings["simulate_s"] = time.perf_counter() - t0

    n, m = spec.n, spec.m
    header = (["t"] + _vec_cols("mean_x_ode", n)
              + _vec_cols("emp_mean_x", n) + _vec_cols("emp_sd_x", n)
              + _vec_cols("emp_mean_y", n) + _vec_cols("emp_mean_z", n)
              + _vec_cols("emp_mean_u", m) + _vec_cols("mean_u", m))
    rows = []
    for k in range(spec.grid.N + 1):
        rows.append([
            spec.grid.nodes[k], *ens.mean_x_nodes[k],
            *ens.X[:, k].mean(axis=0), *ens.X[:, k].std(axis=0, ddof=1),
            *ens.Y[:, k].mean(axis=0), *ens.Z[:, k].mean(axis=0),
            *ens.u[:, k].mean(axis=0), *ens.mean_u[k],
        ])
    _write_csv(out / "ensemble_summary.csv", header, rows)

    dump = min(args.dump_paths, ens.n_paths)
    if dump > 0:
        pheader = (["path", "t", "w"] + _vec_cols("x", n) + _vec_cols("y", n)
                   + _vec_cols("z", n) + _vec_cols("u", m))
        prows = []
        for p in range(dump):
            for k in range(spec.grid.N + 1):
                prows.append([p, spec.grid.nodes[k], ens.W[p, k],
                              *ens.X[p, k], *ens.Y[p, k], *ens.Z[p, k], *ens.u[p, k]])
        _write_csv(out / "paths.csv", pheader, prows)

    j_mc, j_se = evaluate_cost_mc(spec, ens)
    v_val = value_function(spec, ric, pair)
    xi = spec.terminal.evaluate(ens.W[:, -1])
    summary = {
        "paths": ens.n_paths,
        "seed": ens.seed,
        "j_mc": j_mc,
        "j_se": j_se,
        "v_formula": v_val,
        "stationarity_residual": stationarity_residual(spec, ens),
        "terminal_max_error": float(np.abs(ens.Y[:, -1] - xi).max()),
    }
    _json_dump(out / "summary.json", summary)
    return ric, pair, ens


def _stage_verify(spec, args, out: Path, timings: dict) -> bool:
    t0 = time.perf_counter()
    report, checks, extras = run_verification(
        spec, args.paths, args.seed, substeps=args.substeps,
        profile=args.tol_profile, degree=args.degree)
    timings["verify_s"] = time.perf_counter() - t0
    payload = report.as_dict()
    payload["checks"] = [c.as_dict() for c in checks]
    payload["extras"] = extras
    _json_dump(out / "verify.json", payload)

    width = max(len(c.name) for c in checks)
    print(f"{'check':<{width}}  status  detail")
    for c in checks:
        print(f"{c.name:<{width}}  {'PASS' if c.passed else 'FAIL':<6}  {c.detail}")
    ok = all(c.passed for c in checks)
    print(f"\nJ_mc = {report.j_mc:.6g} +- {report.j_se:.2g}, V = {report.v_formula:.6g}, "
          f"stationarity = {report.stationarity:.3g}")
    return ok


def _stage_report(out: Path) -> int:
    missing = [name for name in ("manifest.json",) if not (out / name).exists()]
    artifacts = [p for p in ("riccati.csv", "phi.csv", "ensemble_summary.csv", "summary.json", "verify.json")
                 if (out / p).exists()]
    if missing or not artifacts:
        print("missing artifacts: run a pipeline stage first", file=sys.stderr)
        return EXIT_VALIDATION
    manifest = json.loads((out / "manifest.json").read_text())
    print(f"run: {manifest['command']} scenario={manifest['scenario']} seed={manifest['seed']} "
          f"paths={manifest['paths']} version={manifest['version']}")
    for name in artifacts:
        print(f"  artifact: {name}")
    if (out / "summary.json").exists():
        s = json.loads((out / "summary.json").read_text())
        print(f"  J_mc = {s['j_mc']:.6g} +- {s['j_se']:.2g}; V = {s['v_formula']:.6g}; "
              f"stationarity = {s['stationarity_residual']:.3g}")
    if (out / "verify.json").exists():
        v = json.loads((out / "verify.json").read_text())
        for c in v.get("checks", []):
            print(f"  [{'PASS' if c['passed'] else 'FAIL'}] {c['name']}: {c['detail']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mflq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("riccati", "solve the two matrix equations and dump per-node CSV"),
        ("phi", "solve the backward pair and dump per-node CSV"),
        ("simulate", "simulate the closed-loop ensemble and dump summaries"),
        ("verify", "run the full verification battery"),
        ("report", "render previously written artifacts"),
    ]:
        sp = sub.add_parser(name, help=helptext)
        if name != "report":
            sp.add_argument("--scenario", required=True, help="path to scenario TOML")
            sp.add_argument("--seed", type=int, default=0)
            sp.add_argument("--paths", type=int, default=10_000)
            sp.add_argument("--substeps", type=int, default=4)
            sp.add_argument("--degree", type=int, default=3, help="regression basis degree")
            sp.add_argument("--tol-profile", choices=sorted(PROFILES), default="strict")
            if name == "simulate":
                sp.add_argument("--dump-paths", type=int, default=100,
                                help="number of paths to write to paths.csv")
        sp.add_argument("--out", default="out", help="artifact directory")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.command == "report":
        return _stage_report(out)

    try:
        spec = load_spec(args.scenario)
    except FileNotFoundError:
        print(f"scenario not found: {args.scenario}", file=sys.stderr)
        return EXIT_VALIDATION
    except SpecError as exc:
        print(f"scenario invalid: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    report = validate_assumptions(spec)
    if not report.passed:
        clauses = ", ".join(e.clause for e in report.failures())
        print(f"assumption check failed: {clauses}", file=sys.stderr)
        print(report, file=sys.stderr)
        return EXIT_VALIDATION

    manifest = RunManifest(
        command=args.command, scenario=str(args.scenario), seed=args.seed,
        paths=args.paths, substeps=args.substeps, degree=args.degree,
        out_dir=str(out), tol_profile=args.tol_profile,
    )
    status = EXIT_OK
    try:
        if args.command == "riccati":
            _stage_riccati(spec, args, out, manifest.timings)
        elif args.command == "phi":
            _stage_phi(spec, args, out, manifest.timings)
        elif args.command == "simulate":
            _stage_simulate(spec, args, out, manifest.timings)
        elif args.command == "verify":
            ok = _stage_verify(spec, args, out, manifest.timings)
            status = EXIT_OK if ok else 1
    except (IntegrationDivergedError, KernelSingularError) as exc:
        print(f"numerical failure in stage {args.command}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConditioningError as exc:
        print(f"regression conditioning failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    manifest.write(out)
    return status


if __name__ == "__main__":
    sys.exit(main())
