import numpy as np
import pytest

from bayes_sds import data, unet


@pytest.fixture(scope="session")
def tiny_dataset():
    """60 observations on an 8x8 grid with 2 feature channels."""
    spec = data.ScenarioSpec(grid_h=8, grid_w=8, channels=2, seed=3)
    return data.gen_dataset(60, spec)


@pytest.fixture
def tiny_model(tiny_dataset):
    c, h, w = tiny_dataset.shape
    return unet.build(unet.ArchConfig(c, h, w, depth=2, base_filters=4, dlc=2, p_do=0.3), 0)


def rng(seed=0):
    return np.random.default_rng(seed)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line, then assert it."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number, ok, detail):
        lines.append((number, bool(ok), detail))
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(lines, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
