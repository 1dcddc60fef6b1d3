"""Batch front end: scenario in, branch tables and verdict reports out.

Exit codes: 0 every asserted check passed, 1 an asserted check failed,
2 the scenario or command line is invalid, 3 the run aborted (a partial
report flagged ``"complete": false`` is still written).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .branchtrack import BranchSet, TGrid, TrackingError, track
from .diagnostics import (
    Branch, DiagnosticsConfig, InsufficientSamplesError, diagnose_branch,
    laplace_energy, supersymmetry_gap,
)
from .eigensolve import RESIDUAL_TOL, SolverError
from .operators import OperatorFamily, validity_horizon
from .scenario import Scenario, ScenarioError, build_family, load_scenario

log = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_ABORTED = 0, 1, 2, 3
CSV_COLUMNS = ("branch", "t", "lambda", "lambda_dot_hf", "scaled_energy",
               "laplace_energy", "residual", "step_quality")
SWEEP_COLUMNS = ("param", "value", "status", "exit_code", "mu", "omega", "fit_residual", "passed")
SWEEP_PARAMS = ("n_points", "t_max", "k")
TAIL_SAMPLES = 10
SUPERSYMMETRY_TIMES = (10.0, 20.0)
CONJECTURE_TOL = 1e-2
SCHEMA_VERSION = 1


@dataclass
class RunResult:
    exit_code: int
    report: dict
    out_dir: Path | None = None


# ---- numerics driver -------------------------------------------------------

def tracking_grid(s: Scenario, horizon: float) -> TGrid:
    """Uniform base grid, with extra nodes when the fit window is too sparse."""
    base = np.linspace(s.tgrid.t_min, s.tgrid.t_max, s.tgrid.base_steps + 1)
    t_hi = min(s.tgrid.t_max, horizon)
    t_lo = t_hi - s.diagnostics.tail_fraction * (t_hi - s.tgrid.t_min)
    inside = np.count_nonzero((base >= t_lo) & (base <= t_hi))
    if inside < TAIL_SAMPLES and t_hi > t_lo:
        nodes = list(base)
        for t in np.linspace(t_lo, t_hi, TAIL_SAMPLES):
            if np.min(np.abs(np.asarray(nodes) - t)) >= 2 * s.min_step:
                nodes.append(float(t))
        base = np.array(sorted(nodes))
    return TGrid(base, s.min_step)


def diagnostics_config(s: Scenario) -> DiagnosticsConfig:
    d = s.diagnostics
    return DiagnosticsConfig(tail_fraction=d.tail_fraction, radii=d.radii,
                             tn_count=d.tn_count, sobolev_orders=d.sobolev_orders)


def branch_rows(family: OperatorFamily, branches: BranchSet) -> list[tuple]:
    rows = []
    for j in range(branches.k):
        br = Branch.from_set(branches, j)
        lap = laplace_energy(br, family)
        for i, t in enumerate(branches.t):
            scaled = branches.values[i, j] / t**2 if t > 0 else math.nan
            rows.append((j, t, branches.values[i, j], branches.slopes[i, j], scaled,
                         lap[i], branches.residuals[i, j], branches.quality[i, j]))
    return rows


def format_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([row[0], *("%.17g" % float(x) for x in row[1:])])
    return buf.getvalue()


def _check(name: str, passed: bool, detail: str = "", branch: int | None = None,
           asserted: bool = True) -> dict:
    return {"name": name, "branch": branch, "asserted": asserted,
            "passed": bool(passed), "detail": detail}


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def tracking_summary(branches: BranchSet) -> dict:
    canon = branches.gauge_fixed()
    bound = RESIDUAL_TOL * (1 + np.abs(branches.values))
    base = set(np.round(branches.base_t, 12))
    return {
        "nodes": branches.n_nodes,
        "base_nodes": len(branches.base_t),
        "refined_nodes": sum(1 for t in branches.t if round(float(t), 12) not in base),
        "min_step_quality": float(branches.quality.min()),
        "cluster_tracked_nodes": int(branches.cluster_tracked.sum()),
        "exchanged_nodes": int(branches.exchanged.sum()) if branches.exchanged is not None else 0,
        "max_residual": float(branches.residuals.max()),
        "residuals_ok": bool(np.all(branches.residuals <= bound)),
        "invariant_problems": canon.check_invariants(),
    }


def _expectation_checks(s: Scenario, reports: list[dict]) -> list[dict]:
    checks = []
    for e in s.expect:
        targets = range(len(reports)) if e.branch is None else [e.branch]
        for j in targets:
            if j >= len(reports):
                checks.append(_check(f"expect_{e.quantity}", False, "branch not tracked", j))
                continue
            value = reports[j].get(e.quantity)
            ok = value is not None and abs(value - e.target) <= e.tolerance()
            checks.append(_check(f"expect_{e.quantity}", ok,
                                 f"{value!r} vs {e.target:g} +- {e.tolerance():.3g}", j))
    return checks


def build_report(s: Scenario, family: OperatorFamily, branches: BranchSet,
                 strict: bool = False, partner: OperatorFamily | None = None) -> dict:
    """Full diagnostics report for a tracked run (deterministic, gauge-free)."""
    horizon = validity_horizon(family.grid)
    tracking = tracking_summary(branches)
    checks = [
        _check("tracking_invariants", not tracking["invariant_problems"],
               "; ".join(tracking["invariant_problems"][:5])),
        _check("eigen_residuals", tracking["residuals_ok"],
               f"max residual {tracking['max_residual']:.3g}"),
    ]
    config = diagnostics_config(s)
    reports = []
    for j in range(branches.k):
        rep = diagnose_branch(branches, j, family, config)
        reports.append(rep.data)
        for name, ok in rep.checks.items():
            checks.append(_check(name, ok, branch=j))
        gap = rep.data["conjecture_gap"]
        checks.append(_check("conjecture_gap", abs(gap) < CONJECTURE_TOL,
                             f"mu - min V = {gap:.3g}", j, asserted=strict))
        unbounded = [k for k, v in rep.data["equivalence_ratios"].items() if not v["bounded"]]
        checks.append(_check("equivalence_bounded", not unbounded,
                             ", ".join(unbounded), j, asserted=strict))
    checks += _expectation_checks(s, reports)

    susy = None
    if partner is not None:
        susy = []
        for t in SUPERSYMMETRY_TIMES:
            if not s.tgrid.t_min <= t <= s.tgrid.t_max:
                continue
            gap, tol = supersymmetry_gap(family, partner, t)
            susy.append({"t": t, "gap": gap, "tolerance": tol})
            checks.append(_check("supersymmetry", gap <= tol, f"t={t:g}: {gap:.3g} <= {tol:.3g}"))

    passed = all(c["passed"] for c in checks if c["asserted"])
    return _clean({
        "schema_version": SCHEMA_VERSION,
        "tool": {"name": "eigenbranch", "version": __version__},
        "scenario": s.to_dict(),
        "complete": True,
        "error": None,
        "strict": strict,
        "passed": passed,
        "validity_horizon": horizon,
        "beyond_horizon": s.tgrid.t_max > horizon,
        "tracking": tracking,
        "branches": reports,
        "supersymmetry": susy,
        "checks": checks,
    })


def _partial_report(s: Scenario, error: str, strict: bool, horizon=None) -> dict:
    return _clean({
        "schema_version": SCHEMA_VERSION,
        "tool": {"name": "eigenbranch", "version": __version__},
        "scenario": s.to_dict(),
        "complete": False,
        "error": error,
        "strict": strict,
        "passed": False,
        "validity_horizon": horizon,
        "beyond_horizon": None,
        "tracking": None,
        "branches": [],
        "supersymmetry": None,
        "checks": [],
    })


def summary_text(report: dict) -> str:
    s = report["scenario"]
    lines = [f"scenario {s['name']}: n_points={s['geometry']['n_points']} rank={s['rank']} "
             f"k={s['track']['k']} t=[{s['tgrid']['t_min']:g}, {s['tgrid']['t_max']:g}]"]
    if not report["complete"]:
        lines.append(f"INCOMPLETE  {report['error']}")
        lines.append("verdict: ABORTED")
        return "\n".join(lines) + "\n"
    lines.append(f"validity horizon {report['validity_horizon']:.4g}"
                 + ("  (t_max beyond horizon)" if report["beyond_horizon"] else ""))
    tr = report["tracking"]
    lines.append(f"tracking: {tr['nodes']} nodes ({tr['refined_nodes']} refined), "
                 f"min step quality {tr['min_step_quality']:.3f}")
    for b in report["branches"]:
        lines.append(f"branch {b['branch']}: mu={b['mu']:.6g} omega={b['omega']:.6g} "
                     f"fit_residual={b['fit_residual']:.2g} conjecture_gap={b['conjecture_gap']:.3g}")
    for c in report["checks"]:
        if c["asserted"]:
            tag = "PASS" if c["passed"] else "FAIL"
        else:
            tag = "info" if c["passed"] else "WARN"
        where = "" if c["branch"] is None else f" [branch {c['branch']}]"
        detail = f"  {c['detail']}" if c["detail"] else ""
        lines.append(f"{tag:5} {c['name']}{where}{detail}")
    lines.append("verdict: " + ("PASS" if report["passed"] else "FAIL"))
    return "\n".join(lines) + "\n"


def write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


def run(s: Scenario, out_dir: str | Path | None = None, strict: bool = False,
        workers: int = 1) -> RunResult:
    """Track, diagnose, and (if ``out_dir`` is given) write the three artifacts."""
    out = Path(out_dir) if out_dir is not None else None
    family = build_family(s)
    horizon = validity_horizon(family.grid)
    family.warn_if_beyond_horizon(s.tgrid.t_max)
    partner = None
    if s.family_kind == "witten":
        partner = build_family(s, degree_override=1 - s.family["degree"])

    rows = None
    try:
        branches = track(family, tracking_grid(s, horizon), s.track.k,
                         s.track.tau, s.track.eps_deg, workers=workers)
        rows = branch_rows(family, branches)
        report = build_report(s, family, branches, strict, partner)
        code = EXIT_OK if report["passed"] else EXIT_FAILED
    except (SolverError, TrackingError, InsufficientSamplesError) as exc:
        log.error("run aborted: %s", exc)
        report = _partial_report(s, f"{type(exc).__name__}: {exc}", strict, horizon)
        code = EXIT_ABORTED

    if out is not None:
        if rows is not None:
            write_atomic(out / "branches.csv", format_csv(rows))
        write_atomic(out / "report.json", dump_report(report))
        write_atomic(out / "summary.txt", summary_text(report))
    return RunResult(code, report, out)


def sweep(s: Scenario, param: str, values, out_dir: str | Path, strict: bool = False,
          branch: int = 0) -> list[dict]:
    """One run per value of ``param``; writes ``sweep.csv`` plus one run folder per row."""
    if param not in SWEEP_PARAMS:
        raise ScenarioError("param", f"must be one of {', '.join(SWEEP_PARAMS)}")
    values = list(values)
    if not values:
        raise ScenarioError("values", "at least one value is required")
    out = Path(out_dir)
    rows = []
    for v in values:
        row = {"param": param, "value": v, "status": "failed", "exit_code": None,
               "mu": None, "omega": None, "fit_residual": None, "passed": False}
        try:
            sub = s.with_overrides(**{param: v})
            res = run(sub, out / f"{param}-{v:g}", strict)
            row["exit_code"] = res.exit_code
            if res.report["complete"]:
                row["status"] = "complete"
                row["passed"] = res.report["passed"]
                if branch < len(res.report["branches"]):
                    b = res.report["branches"][branch]
                    row.update(mu=b["mu"], omega=b["omega"], fit_residual=b["fit_residual"])
        except Exception as exc:  # a row failure must not end the sweep
            log.error("sweep row %s=%s failed: %s", param, v, exc)
            row["exit_code"] = EXIT_CONFIG if isinstance(exc, ScenarioError) else EXIT_ABORTED
        rows.append(row)
        write_atomic(out / "sweep.csv", _sweep_csv(rows))
    return rows


def _sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for r in rows:
        writer.writerow([
            r["param"], "%.17g" % r["value"], r["status"],
            "" if r["exit_code"] is None else r["exit_code"],
            *("" if r[c] is None else "%.17g" % r[c] for c in ("mu", "omega", "fit_residual")),
            str(r["passed"]).lower(),
        ])
    return buf.getvalue()


# ---- command line ----------------------------------------------------------

def parse_values(text: str, param: str) -> list:
    items = [p.strip() for p in text.split(",") if p.strip()]
    if not items:
        raise ScenarioError("values", "at least one value is required")
    try:
        return [int(p) if param in ("n_points", "k") else float(p) for p in items]
    except ValueError:
        raise ScenarioError("values", f"cannot parse {text!r} as values for {param}") from None


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eigenbranch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--k", type=int, help="override track.k")
        p.add_argument("--t-max", type=float, help="override tgrid.t_max")
        p.add_argument("--n", type=int, help="override geometry.n_points")
        p.add_argument("--strict", action="store_true",
                       help="assert conjecture_gap and equivalence boundedness too")

    p_run = sub.add_parser("run", help="track and diagnose one scenario")
    common(p_run)
    p_run.add_argument("--workers", type=int, default=1, help="threads for the eigensolves")
    p_sweep = sub.add_parser("sweep", help="repeat a scenario over one parameter")
    common(p_sweep)
    p_sweep.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p_sweep.add_argument("--values", required=True, help="comma separated values")
    p_sweep.add_argument("--branch", type=int, default=0, help="branch reported in sweep.csv")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        s = load_scenario(args.scenario).with_overrides(args.n, args.t_max, args.k)
        if args.command == "sweep":
            values = parse_values(args.values, args.param)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "run":
        result = run(s, args.out, args.strict, max(1, args.workers))
        sys.stdout.write(summary_text(result.report))
        return result.exit_code

    rows = sweep(s, args.param, values, args.out, args.strict, args.branch)
    for r in rows:
        print(f"{args.param}={r['value']:g}: {r['status']} mu={r['mu']} omega={r['omega']}")
    if any(r["status"] != "complete" for r in rows):
        return EXIT_ABORTED
    return EXIT_OK if all(r["passed"] for r in rows) else EXIT_FAILED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
