import numpy as np
import pytest

from lookahead_bo.gp import Dataset, FittedGP, Hyperparameters


def pytest_addoption(parser):
    parser.addoption("--run-long", action="store_true", default=False,
                     help="also run opt-in long experiments")


CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[CRITERIA] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-long"):
        return
    skip = pytest.mark.skip(reason="opt-in long experiment; pass --run-long")
    for item in items:
        if "long" in item.keywords:
            item.add_marker(skip)


def random_instance(rng, n=None, d=None, t_max=2.0, hyp=None):
    """A random dataset and GP with moderate length-scales."""
    d = int(rng.integers(1, 4)) if d is None else d
    n = int(rng.integers(1, 21)) if n is None else n
    X = rng.uniform(size=(n, d))
    t = np.sort(rng.uniform(0.0, t_max, size=n))
    t = t + 1e-3 * np.arange(n)  # strictly increasing
    y = rng.normal(size=n)
    if hyp is None:
        hyp = Hyperparameters(
            theta_x=float(rng.uniform(0.15, 0.6)),
            theta_t=float(rng.uniform(0.5, 2.0)),
            noise_variance=float(10 ** rng.uniform(-4, -1)),
            output_scale=float(rng.uniform(0.5, 2.0)),
        )
    data = Dataset(X, t, y)
    return FittedGP(data, hyp), data, hyp


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def make_instance():
    return random_instance
