from __future__ import annotations

import numpy as np
import pytest

from surroundgt.calib_geometry import FisheyeIntrinsics
from surroundgt.synthetic import demo_intrinsics, write_fixture_dataset

# a monotone fourth-order set of the size a real 190° lens produces on 1280x966
REALISTIC_COEFFS = (339.749, -31.988, 48.275, -7.201)


@pytest.fixture
def identity_fisheye():
    return FisheyeIntrinsics(1.0, 0.0, 0.0, 0.0, cx=640.0, cy=483.0, width=1280, height=966)


@pytest.fixture(scope="session")
def realistic_fisheye():
    return FisheyeIntrinsics(*REALISTIC_COEFFS, cx=640.0, cy=483.0, width=1280, height=966)


@pytest.fixture
def small_fisheye():
    return demo_intrinsics(160, 120)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("export")
    write_fixture_dataset(root, n_frames=10)
    return root


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def report(request):
    """Record one acceptance line: ``report("C1", "title", ok, "detail")``."""
    lines = request.config.stash[_ACCEPTANCE]

    def _report(tag: str, title: str, ok: bool, detail: str = "") -> bool:
        line = f"{tag} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        lines.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
