import numpy as np
import pytest

from salient3d.fixtures import generate_synthetic_scene
from salient3d.fusion import fuse_point_features


@pytest.fixture(scope="session")
def small_scene():
    return generate_synthetic_scene(seed=1, n_foreground=120, n_ground=150, n_clutter=60)


@pytest.fixture(scope="session")
def small_cloud(small_scene):
    return fuse_point_features(small_scene.sfm, small_scene.store)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in name or rep.when != "call" and outcome != "error":
                continue
            tag = name.split("test_criterion_")[1]
            num, label = tag.split("_", 1)
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((int(num), f"criterion {int(num):2d} {label.replace('_', ' ')}: "
                                    f"{'PASS' if outcome == 'passed' else 'FAIL'}" + (f" ({detail})" if detail else "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
