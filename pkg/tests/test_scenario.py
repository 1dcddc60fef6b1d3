import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eigenbranch.scenario import (
    ScenarioError, build_family, bundled_scenarios, load_scenario, parse_scenario,
)

DATA = Path(__file__).parent / "data"
MINIMAL = {
    "geometry": {"n_points": 256},
    "witten": {"f": "cos", "degree": 0},
    "tgrid": {"t_min": 0, "t_max": 40, "base_steps": 80},
    "track": {"k": 6},
}


def doc(**changes):
    d = json.loads(json.dumps(MINIMAL))
    for path, value in changes.items():
        *head, last = path.split("__")
        node = d
        for key in head:
            node = node.setdefault(key, {})
        if value is None:
            node.pop(last, None)
        else:
            node[last] = value
    return json.dumps(d)


def error_path(text, **kw):
    with pytest.raises(ScenarioError) as info:
        parse_scenario(text, **kw)
    return info.value.path


def test_minimal_document_defaults():
    s = parse_scenario(doc())
    assert s.track.tau == 0.75 and s.diagnostics.tail_fraction == 0.2
    assert s.track.eps_deg == 1e-6 and s.diagnostics.radii == (0.25, 0.5, 1.0)
    assert s.diagnostics.tn_count == 6 and s.diagnostics.sobolev_orders == (1, 2)
    assert s.min_step == pytest.approx(4e-3)
    assert s.rank == 1 and s.family_kind == "witten"


def test_t_max_below_t_min():
    assert error_path(doc(tgrid__t_min=10, tgrid__t_max=5)) == "tgrid.t_max"


def test_builtin_scalar_family():
    s = parse_scenario(doc(witten=None, builtin={"v": "sin2", "a": "zero"}))
    fam = build_family(s)
    assert fam.rank == 1 and fam.is_scalar_potential
    np.testing.assert_allclose(fam.field_v.values[:, 0, 0], np.sin(fam.grid.points) ** 2)


@pytest.mark.parametrize("changes, path", [
    ({"witten__f": "tanh"}, "witten.f"),
    ({"witten__degree": 2}, "witten.degree"),
    ({"geometry__n_points": 4}, "geometry.n_points"),
    ({"geometry__n_points": 12.5}, "geometry.n_points"),
    ({"tgrid__t_min": -1}, "tgrid.t_min"),
    ({"tgrid__base_steps": 7}, "tgrid.base_steps"),
    ({"track__k": 0}, "track.k"),
    ({"track__tau": 1.0}, "track.tau"),
    ({"track__tau": "high"}, "track.tau"),
    ({"track__min_step": 5.0}, "track.min_step"),
    ({"diagnostics__tail_fraction": 0.6}, "diagnostics.tail_fraction"),
    ({"diagnostics__tail_fraction": 0.0}, "diagnostics.tail_fraction"),
    ({"track__colour": 1}, "track.colour"),
    ({"geometry": None}, "geometry.n_points"),
])
def test_field_path_errors(changes, path):
    assert error_path(doc(**changes)) == path


def test_unparseable_document():
    assert error_path("{not json") == ""
    assert error_path("[1, 2]") == "(root)"


def test_exactly_one_family():
    assert error_path(doc(builtin={"v": "sin2"})) == "(root)"
    assert error_path(doc(witten=None)) == "(root)"


def test_matrix2_family():
    s = parse_scenario(doc(witten=None, matrix2={"eigenvalues": ["sin2", "poly_trig:2,1,0,0"], "rotation_rate": 1}))
    assert s.rank == 2
    fam = build_family(s)
    x = fam.grid.points
    expected = np.sort(np.column_stack([np.sin(x) ** 2, 2 + np.cos(x)]), axis=1)
    np.testing.assert_allclose(np.linalg.eigvalsh(fam.field_v.values), expected, atol=1e-12)
    assert error_path(doc(witten=None, matrix2={"eigenvalues": ["cos"]})) == "matrix2.eigenvalues"
    assert error_path(doc(witten=None, matrix2={"eigenvalues": ["cos", "cos"], "rotation_rate": 0.3})) \
        == "matrix2.rotation_rate"


def test_table_rank1():
    s = parse_scenario(doc(witten=None, geometry={"n_points": 64}, table={"path": "sin2_64.csv"}), base_dir=DATA)
    fam = build_family(s)
    np.testing.assert_allclose(fam.field_v.values[:, 0, 0], np.sin(fam.grid.points) ** 2, atol=1e-15)
    assert fam.is_scalar_potential and not fam.field_a.values.any()


def test_table_rank2():
    s = parse_scenario(doc(witten=None, geometry={"n_points": 64}, rank=2, table={"path": "rotated_64.csv"}),
                       base_dir=DATA)
    fam = build_family(s)
    x = fam.grid.points
    expected = np.sort(np.column_stack([np.sin(x) ** 2, 2 + np.cos(x)]), axis=1)
    np.testing.assert_allclose(np.linalg.eigvalsh(fam.field_v.values), expected, atol=1e-12)


def test_table_errors():
    wrong_n = parse_scenario(doc(witten=None, table={"path": "sin2_64.csv"}), base_dir=DATA)
    with pytest.raises(ScenarioError, match="rows"):
        build_family(wrong_n)
    missing = parse_scenario(doc(witten=None, table={"path": "nope.csv"}), base_dir=DATA)
    with pytest.raises(ScenarioError, match="not found"):
        build_family(missing)


def test_expectations():
    s = parse_scenario(doc(expect=[{"quantity": "mu", "target": 0, "abs_tol": 0.01, "branch": 0},
                                   {"quantity": "omega", "target": 2, "rel_tol": 0.1}]))
    assert s.expect[0].branch == 0 and s.expect[1].branch is None
    assert s.expect[1].tolerance() == pytest.approx(0.2)
    assert error_path(doc(expect=[{"quantity": "lambda", "target": 0}])) == "expect[0].quantity"


def test_bundled_scenarios_load_and_build():
    names = bundled_scenarios()
    assert names == ["constant", "doublewell", "matrix2", "witten-cos-0", "witten-cos-1"]
    for name in names:
        s = load_scenario(name)
        assert s.name == name
        assert build_family(s).dimension == s.n_points * s.rank


def test_load_by_path(tmp_path):
    p = tmp_path / "mine.json"
    p.write_text(doc())
    assert load_scenario(p).name == "mine"
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "absent.json")


def test_overrides():
    s = parse_scenario(doc()).with_overrides(n_points=128, t_max=20, k=3)
    assert (s.n_points, s.tgrid.t_max, s.track.k) == (128, 20.0, 3)
    with pytest.raises(ScenarioError):
        parse_scenario(doc()).with_overrides(n_points=4)


def test_echo_round_trip():
    s = parse_scenario(doc())
    again = parse_scenario(json.dumps(s.to_dict()))
    # the echo records the resolved min_step
    assert again.min_step == s.min_step
    assert replace(again, track=s.track) == s


@given(st.integers(-5, 600), st.floats(-5, 50), st.floats(-5, 50), st.integers(0, 100), st.floats(-0.5, 1.5))
def test_parse_either_validates_or_names_a_field(n, t_min, t_max, steps, tau):
    text = doc(geometry__n_points=n, tgrid__t_min=t_min, tgrid__t_max=t_max,
               tgrid__base_steps=steps, track__tau=tau)
    try:
        s = parse_scenario(text)
    except ScenarioError as exc:
        assert exc.path.split(".")[0] in {"geometry", "tgrid", "track"}
        return
    assert s.n_points >= 8 and 0 <= s.tgrid.t_min < s.tgrid.t_max and s.tgrid.base_steps >= 8
    assert 0 < s.track.tau < 1
