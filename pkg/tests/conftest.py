import numpy as np
import pytest
from hypothesis import settings

from fpno.mesh import DEFAULT_HOLE, ElemKind, build_unit_square_mesh

settings.register_profile("repo", deadline=None, max_examples=40)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def tri4():
    return build_unit_square_mesh(4, ElemKind.P1_TRI)


@pytest.fixture(scope="session")
def quad4():
    return build_unit_square_mesh(4, ElemKind.Q1_QUAD)


@pytest.fixture(scope="session")
def quad8_hole():
    return build_unit_square_mesh(8, ElemKind.Q1_QUAD, hole=DEFAULT_HOLE)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_jacobian_error(problem, u, w, eps=1e-6):
    """Relative error between ``J w`` and the central difference of the residual."""
    jw = problem.jacobian(u) @ w
    fd = (problem.residual(u + eps * w) - problem.residual(u - eps * w)) / (2 * eps)
    return np.linalg.norm(jw - fd) / np.linalg.norm(jw)


# -- acceptance reporting ------------------------------------------------------

_ACCEPTANCE = {}


@pytest.fixture
def detail(request):
    """Free-text note shown next to the criterion's pass/fail line."""
    notes = []
    request.node.user_properties.append(("detail", notes))
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    notes = dict(item.user_properties).get("detail", [])
    _ACCEPTANCE[marker.args[0]] = (rep.passed, "; ".join(notes))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, note = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}"
                                    + (f"  ({note})" if note else ""))
