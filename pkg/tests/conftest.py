import copy

import numpy as np
import pytest

from implicit_mesh.geometry import atlas_mesh, icosphere
from implicit_mesh.shape_space import TemplateFitConfig, build_shape_space, fit_template
from implicit_mesh.synthetic import default_template

ACCEPTANCE_LINES = {}  # criterion number -> PASS/FAIL line, filled by test_acceptance


class IdentityNet:
    """Stand-in network returning its sphere input unchanged."""

    in_width = 3
    out_width = 3
    prefix = "identity"

    def __call__(self, x):
        return x

    frozen_call = __call__

    def parameters(self):
        return {}


@pytest.fixture(scope="session")
def _sphere_fit():
    space = build_shape_space(seed=0)
    result = fit_template(space, atlas_mesh(icosphere(4)), TemplateFitConfig())
    return space, result


@pytest.fixture
def sphere_fit(_sphere_fit):
    """Mean shape fitted to the unit sphere with the default schedule, and the fit report."""
    space, result = _sphere_fit
    return copy.deepcopy(space), result


@pytest.fixture(scope="session")
def _template_space():
    space = build_shape_space(seed=0)
    fit_template(space, default_template(), TemplateFitConfig())
    return space


@pytest.fixture
def template_space(_template_space):
    """Mean shape fitted to the default category template (fresh copy per test)."""
    return copy.deepcopy(_template_space)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
