import json
from importlib import resources

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from eigenbranch.branchtrack import TGrid, track
from eigenbranch.cli import run
from eigenbranch.functions import parse_function
from eigenbranch.operators import CircleGrid, build_potential_family, build_witten_family
from eigenbranch.scenario import load_scenario

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def report_schema():
    text = (resources.files("eigenbranch") / "schemas" / "report.schema.json").read_text()
    return json.loads(text)


@pytest.fixture(scope="session")
def bundled_runs(tmp_path_factory):
    """Full-resolution runs of every bundled scenario, shared by the suite."""
    root = tmp_path_factory.mktemp("bundled")
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = run(load_scenario(name), root / name)
        return cache[name]

    return get


@pytest.fixture(scope="session")
def doublewell_512():
    grid = CircleGrid(512)
    family = build_potential_family(grid, parse_function("sin2"), label="doublewell")
    return family, track(family, TGrid.uniform(0.0, 40.0, 80), 6)


@pytest.fixture(scope="session")
def witten_256():
    grid = CircleGrid(256)
    family = build_witten_family(grid, parse_function("cos"), 0, label="witten")
    return family, track(family, TGrid.uniform(0.0, 40.0, 80), 6)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
