"""Declarative scenario documents (JSON) and the families they describe."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .functions import PeriodicFunction, UnknownFunctionError, parse_function
from .operators import (
    CircleGrid, GridSizeError, MatrixField, OperatorFamily, ScalarFunctionSamples,
    build_potential_family, build_witten_family, make_family, rotated_diagonal_field,
)

FAMILY_KINDS = ("builtin", "witten", "matrix2", "table")


class ScenarioError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class TGridSpec:
    t_min: float = 0.0
    t_max: float = 40.0
    base_steps: int = 80


@dataclass(frozen=True)
class TrackSpec:
    k: int = 6
    tau: float = 0.75
    eps_deg: float = 1e-6
    min_step: float | None = None


@dataclass(frozen=True)
class DiagnosticsSpec:
    tail_fraction: float = 0.2
    radii: tuple[float, ...] = (0.25, 0.5, 1.0)
    tn_count: int = 6
    sobolev_orders: tuple[int, ...] = (1, 2)


@dataclass(frozen=True)
class Expectation:
    quantity: str
    target: float
    branch: int | None = None  # None: every branch
    abs_tol: float = 0.0
    rel_tol: float = 0.0

    def tolerance(self) -> float:
        return self.abs_tol + self.rel_tol * abs(self.target)


@dataclass(frozen=True)
class Scenario:
    name: str
    n_points: int
    family_kind: str
    family: dict
    rank: int = 1
    tgrid: TGridSpec = TGridSpec()
    track: TrackSpec = TrackSpec()
    diagnostics: DiagnosticsSpec = DiagnosticsSpec()
    expect: tuple[Expectation, ...] = ()
    base_dir: str = field(default=".", compare=False)

    @property
    def min_step(self) -> float:
        if self.track.min_step is not None:
            return self.track.min_step
        return 1e-4 * (self.tgrid.t_max - self.tgrid.t_min)

    def with_overrides(self, n_points=None, t_max=None, k=None) -> "Scenario":
        out = self
        if n_points is not None:
            out = replace(out, n_points=int(n_points))
        if t_max is not None:
            out = replace(out, tgrid=replace(out.tgrid, t_max=float(t_max)))
        if k is not None:
            out = replace(out, track=replace(out.track, k=int(k)))
        _validate(out)
        return out

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "geometry": {"n_points": self.n_points},
            "rank": self.rank,
            self.family_kind: self.family,
            "tgrid": asdict(self.tgrid),
            "track": {**asdict(self.track), "min_step": self.min_step},
            "diagnostics": {k: list(v) if isinstance(v, tuple) else v
                            for k, v in asdict(self.diagnostics).items()},
        }
        if self.expect:
            d["expect"] = [asdict(e) for e in self.expect]
        return d


def _require_mapping(obj, path):
    if not isinstance(obj, dict):
        raise ScenarioError(path, f"expected an object, got {type(obj).__name__}")
    return obj


def _check_keys(obj: dict, allowed, path: str):
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise ScenarioError(f"{path}.{extra[0]}" if path else extra[0], "unknown field")


def _number(obj, key, path, default=None, kind=float):
    if key not in obj:
        if default is None:
            raise ScenarioError(f"{path}.{key}", "required field missing")
        return default
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ScenarioError(f"{path}.{key}", f"expected a number, got {val!r}")
    if kind is int:
        if int(val) != val:
            raise ScenarioError(f"{path}.{key}", f"expected an integer, got {val!r}")
        return int(val)
    return float(val)


def _function(spec, path) -> PeriodicFunction:
    try:
        return parse_function(spec)
    except UnknownFunctionError as exc:
        raise ScenarioError(path, str(exc)) from None


def parse_scenario(text: str, base_dir: str | Path = ".", name: str | None = None) -> Scenario:
    """Validate a JSON scenario document and fill in defaults."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError("", f"unparseable document: {exc}") from None
    doc = _require_mapping(doc, "(root)")
    _check_keys(doc, {"name", "geometry", "rank", "tgrid", "track", "diagnostics", "expect",
                      "description", *FAMILY_KINDS}, "")

    geometry = _require_mapping(doc.get("geometry", {}), "geometry")
    _check_keys(geometry, {"n_points"}, "geometry")
    n_points = _number(geometry, "n_points", "geometry", kind=int)
    rank = _number(doc, "rank", "", default=1, kind=int) if "rank" in doc else 1

    kinds = [k for k in FAMILY_KINDS if k in doc]
    if len(kinds) != 1:
        raise ScenarioError("(root)", f"exactly one family of {', '.join(FAMILY_KINDS)} is required")
    kind = kinds[0]
    family = dict(_require_mapping(doc[kind], kind))
    family = _normalize_family(kind, family, rank)
    if kind == "matrix2" and "rank" not in doc:
        rank = 2

    tg = _require_mapping(doc.get("tgrid", {}), "tgrid")
    _check_keys(tg, {"t_min", "t_max", "base_steps"}, "tgrid")
    tgrid = TGridSpec(
        _number(tg, "t_min", "tgrid", 0.0),
        _number(tg, "t_max", "tgrid", 40.0),
        _number(tg, "base_steps", "tgrid", 80, int),
    )
    tr = _require_mapping(doc.get("track", {}), "track")
    _check_keys(tr, {"k", "tau", "eps_deg", "min_step"}, "track")
    track = TrackSpec(
        _number(tr, "k", "track", 6, int),
        _number(tr, "tau", "track", 0.75),
        _number(tr, "eps_deg", "track", 1e-6),
        _number(tr, "min_step", "track", None) if "min_step" in tr else None,
    )
    dg = _require_mapping(doc.get("diagnostics", {}), "diagnostics")
    _check_keys(dg, {"tail_fraction", "radii", "tn_count", "sobolev_orders"}, "diagnostics")
    diagnostics = DiagnosticsSpec(
        _number(dg, "tail_fraction", "diagnostics", 0.2),
        tuple(float(r) for r in dg.get("radii", (0.25, 0.5, 1.0))),
        _number(dg, "tn_count", "diagnostics", 6, int),
        tuple(int(s) for s in dg.get("sobolev_orders", (1, 2))),
    )
    expect = tuple(_expectation(e, f"expect[{i}]") for i, e in enumerate(doc.get("expect", [])))

    scenario = Scenario(
        name=str(doc.get("name", name or "scenario")),
        n_points=n_points,
        family_kind=kind,
        family=family,
        rank=rank,
        tgrid=tgrid,
        track=track,
        diagnostics=diagnostics,
        expect=expect,
        base_dir=str(base_dir),
    )
    _validate(scenario)
    return scenario


def _normalize_family(kind: str, fam: dict, rank: int) -> dict:
    if kind == "builtin":
        _check_keys(fam, {"v", "a"}, kind)
        if "v" not in fam:
            raise ScenarioError("builtin.v", "required field missing")
        return {"v": str(_function(fam["v"], "builtin.v")),
                "a": str(_function(fam.get("a", "zero"), "builtin.a"))}
    if kind == "witten":
        _check_keys(fam, {"f", "degree"}, kind)
        if "f" not in fam:
            raise ScenarioError("witten.f", "required field missing")
        degree = fam.get("degree", 0)
        if degree not in (0, 1):
            raise ScenarioError("witten.degree", f"must be 0 or 1, got {degree!r}")
        if rank != 1:
            raise ScenarioError("rank", "Witten families on the circle have rank 1")
        return {"f": str(_function(fam["f"], "witten.f")), "degree": int(degree)}
    if kind == "matrix2":
        _check_keys(fam, {"eigenvalues", "rotation_rate", "a"}, kind)
        eig = fam.get("eigenvalues")
        if not isinstance(eig, list) or len(eig) != 2:
            raise ScenarioError("matrix2.eigenvalues", "expected a list of two functions")
        rate = _number(fam, "rotation_rate", "matrix2", 1.0)
        if abs(2 * rate - round(2 * rate)) > 1e-12:
            raise ScenarioError("matrix2.rotation_rate", "must be a multiple of 1/2")
        return {"eigenvalues": [str(_function(e, f"matrix2.eigenvalues[{i}]")) for i, e in enumerate(eig)],
                "rotation_rate": rate,
                "a": str(_function(fam.get("a", "zero"), "matrix2.a"))}
    _check_keys(fam, {"path"}, kind)
    if not isinstance(fam.get("path"), str):
        raise ScenarioError("table.path", "expected a file path")
    return {"path": fam["path"]}


def _expectation(entry, path) -> Expectation:
    entry = _require_mapping(entry, path)
    _check_keys(entry, {"quantity", "target", "branch", "abs_tol", "rel_tol"}, path)
    if entry.get("quantity") not in ("mu", "omega", "constant", "conjecture_gap", "critical_value_gap"):
        raise ScenarioError(f"{path}.quantity", f"unsupported quantity {entry.get('quantity')!r}")
    branch = entry.get("branch", "all")
    if branch != "all" and (not isinstance(branch, int) or branch < 0):
        raise ScenarioError(f"{path}.branch", "expected a branch index or 'all'")
    return Expectation(
        entry["quantity"], _number(entry, "target", path),
        None if branch == "all" else branch,
        _number(entry, "abs_tol", path, 0.0), _number(entry, "rel_tol", path, 0.0),
    )


def _validate(s: Scenario):
    if s.n_points < 8:
        raise ScenarioError("geometry.n_points", "must be at least 8")
    if s.rank < 1:
        raise ScenarioError("rank", "must be positive")
    if s.family_kind == "matrix2" and s.rank != 2:
        raise ScenarioError("rank", "matrix2 families have rank 2")
    if s.tgrid.t_min < 0:
        raise ScenarioError("tgrid.t_min", "must be nonnegative")
    if not s.tgrid.t_max > s.tgrid.t_min:
        raise ScenarioError("tgrid.t_max", "must exceed tgrid.t_min")
    if s.tgrid.base_steps < 8:
        raise ScenarioError("tgrid.base_steps", "must be at least 8")
    if s.track.k < 1:
        raise ScenarioError("track.k", "must be at least 1")
    if s.track.k > s.n_points * s.rank:
        raise ScenarioError("track.k", "exceeds the dimension of the discretized problem")
    if not 0 < s.track.tau < 1:
        raise ScenarioError("track.tau", "must lie in (0, 1)")
    if s.track.eps_deg <= 0:
        raise ScenarioError("track.eps_deg", "must be positive")
    step = (s.tgrid.t_max - s.tgrid.t_min) / s.tgrid.base_steps
    if not 0 < s.min_step <= step:
        raise ScenarioError("track.min_step", "must be positive and at most the base step")
    if not 0 < s.diagnostics.tail_fraction <= 0.5:
        raise ScenarioError("diagnostics.tail_fraction", "must lie in (0, 0.5]")
    if s.diagnostics.tn_count < 1:
        raise ScenarioError("diagnostics.tn_count", "must be at least 1")
    if any(r <= 0 for r in s.diagnostics.radii) or not s.diagnostics.radii:
        raise ScenarioError("diagnostics.radii", "must be a nonempty list of positive radii")
    if any(o < 1 for o in s.diagnostics.sobolev_orders):
        raise ScenarioError("diagnostics.sobolev_orders", "orders must be positive integers")


def load_scenario(ref: str | Path) -> Scenario:
    """Load a scenario from a path, or by name from the bundled set."""
    path = Path(ref)
    if path.is_file():
        return parse_scenario(path.read_text(), path.parent, path.stem)
    bundled = bundled_scenarios()
    if str(ref) in bundled:
        res = resources.files("eigenbranch") / "scenarios" / f"{ref}.json"
        return parse_scenario(res.read_text(), ".", str(ref))
    raise ScenarioError("", f"no scenario file or bundled scenario named {ref!r}")


def bundled_scenarios() -> list[str]:
    folder = resources.files("eigenbranch") / "scenarios"
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def _read_table(path: Path, grid: CircleGrid, rank: int):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != grid.n_points:
        raise ScenarioError("table.path", f"table has {len(rows)} rows, grid has {grid.n_points} points")
    cols = rows[0].keys() if rows else []

    def field_from(prefix: str, required: bool):
        if rank == 1 and prefix in cols:
            return MatrixField.scalar([float(r[prefix]) for r in rows])
        names = [f"{prefix}_{i}{j}" for i in range(1, rank + 1) for j in range(i, rank + 1)]
        if not all(n in cols for n in names):
            if required:
                raise ScenarioError("table.path", f"missing column(s) for field {prefix}")
            return None
        vals = np.zeros((grid.n_points, rank, rank))
        for i in range(rank):
            for j in range(i, rank):
                col = [float(r[f"{prefix}_{i + 1}{j + 1}"]) for r in rows]
                vals[:, i, j] = vals[:, j, i] = col
        return MatrixField(vals)

    return field_from("v", True), field_from("a", False)


def build_family(s: Scenario, degree_override: int | None = None) -> OperatorFamily:
    grid = CircleGrid(s.n_points)
    fam = s.family
    if s.family_kind == "builtin":
        return build_potential_family(grid, parse_function(fam["v"]), parse_function(fam["a"]),
                                      s.rank, s.name)
    if s.family_kind == "witten":
        degree = fam["degree"] if degree_override is None else degree_override
        return build_witten_family(grid, parse_function(fam["f"]), degree, s.name)
    if s.family_kind == "matrix2":
        v = rotated_diagonal_field(grid, [parse_function(e) for e in fam["eigenvalues"]],
                                   fam["rotation_rate"])
        a = MatrixField.scalar(parse_function(fam["a"])(grid.points)[0], 2)
        return make_family(grid, v, a, s.name)
    path = Path(fam["path"])
    if not path.is_absolute():
        path = Path(s.base_dir) / path
    if not path.is_file():
        raise ScenarioError("table.path", f"file not found: {path}")
    v, a = _read_table(path, grid, s.rank)
    scalar = ScalarFunctionSamples.from_values(grid, v.values[:, 0, 0]) if v.is_scalar() else None
    return make_family(grid, v, a, s.name, scalar)


__all__ = [
    "Scenario", "ScenarioError", "TGridSpec", "TrackSpec", "DiagnosticsSpec", "Expectation",
    "parse_scenario", "load_scenario", "bundled_scenarios", "build_family", "GridSizeError",
]
