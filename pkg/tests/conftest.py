import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import numpy as np  # noqa: E402
import pytest  # noqa: E402
from hypothesis import settings  # noqa: E402

from dualsplat.scene import Camera, init_scene  # noqa: E402

settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("repo")


def random_scene(seed, n=20, dtype=np.float64, extent=0.7, scale=(0.1, 0.35), features=False):
    rng = np.random.default_rng(seed)
    geo, local = init_scene(([-extent] * 3, [extent] * 3), n, n, seed, dtype=dtype, geo_features=features)
    for g in (geo, local):
        g.log_scales[:] = np.log(rng.uniform(*scale, size=(n, 2)))
        g.raw_opacities[:] = rng.normal(0.5, 1.5, size=n)
    geo.payload.diffuse_rgb[:] = rng.normal(size=(n, 3))
    geo.payload.raw_roughness[:] = rng.normal(size=n)
    local.payload.features[:] = rng.normal(size=local.payload.features.shape)
    if features:
        geo.payload.features[:] = rng.normal(size=geo.payload.features.shape)
    return geo, local


def front_camera(w=32, h=32, eye=(0.2, -0.3, -3.0), fov=np.pi / 3):
    return Camera.look_at(eye, [0, 0, 0], [0, -1, 0], w, h, fov)


@pytest.fixture
def scene20():
    return random_scene(0)


@pytest.fixture
def cam32():
    return front_camera()


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion."""

    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        print(line)
        request.config.stash[ACCEPTANCE_LINES].append(line)
        return ok

    return record
