import numpy as np
import pytest
from hypothesis import settings

# fixed example sequence so every run of the suite checks the same cases
settings.register_profile("repro", derandomize=True)
settings.load_profile("repro")

from polarsfp.scene import plane_scene, render_scene, sphere_scene


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def sphere64():
    scene = sphere_scene(size=64)
    return scene, render_scene(scene)


@pytest.fixture(scope="session")
def sphere64_ortho():
    scene = sphere_scene(size=64)
    return scene, render_scene(scene, "orthographic")


@pytest.fixture(scope="session")
def plane48():
    scene = plane_scene(size=48)
    return scene, render_scene(scene)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for cid, title, ok, detail in sorted(ACCEPTANCE, key=lambda row: int(row[0][1:])):
        terminalreporter.write_line(f"{cid:>3} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
