import numpy as np
import pytest
from hypothesis import settings

from traitbranch.core import GaussianBump, GaussianKernel, Constant, build_grid, make_model

# jitted kernels compile on first call, so wall-clock deadlines are meaningless
settings.register_profile("traitbranch", deadline=None, max_examples=60)
settings.load_profile("traitbranch")


def pytest_addoption(parser):
    parser.addoption("--skip-slow", action="store_true", help="skip tests marked slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--skip-slow"):
        skip = pytest.mark.skip(reason="--skip-slow given")
        for item in items:
            if "slow" in item.keywords:
                item.add_marker(skip)


def constant_model(net=-0.5, p=0.25, log_K=10.0, window=(-1.0, 1.0), death=1.0, sigma=1.0, delta=None,
                   boundary="absorb"):
    grid = build_grid(window, log_K=log_K, delta=delta)
    return make_model(grid, Constant(death + net), Constant(death), p, GaussianKernel(sigma), boundary=boundary)


def demo_model(log_K=3.0, window=(-0.56, 0.56), delta=None):
    """Bump-shaped birth, unit death, p = 0.3: the eleven-site demo at ln K = 3."""
    grid = build_grid(window, log_K=log_K, delta=delta)
    return make_model(grid, GaussianBump(0.4, 0.1), Constant(1.0), 0.3, GaussianKernel(1.0))


@pytest.fixture
def eleven_site():
    m = demo_model()
    assert m.grid.size == 11
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for the terminal summary and fail the test if needed."""

    def record(label: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} {label}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
