import numpy as np
import pytest

from diffmargin.data import Dataset


def random_separable(rng, dim, n_total, min_gap=0.2):
    """Gaussian points labelled by a random hyperplane, with a guaranteed gap."""
    w = rng.normal(size=dim)
    w /= np.linalg.norm(w)
    b = rng.normal(scale=0.3)
    pts = []
    while len(pts) < n_total:
        p = rng.normal(size=dim)
        if abs(p @ w + b) >= min_gap / 2:
            pts.append(p)
    pts = np.array(pts)
    labels = np.where(pts @ w + b > 0, 1, -1)
    if labels.min() == labels.max():
        labels[0] = -labels[0]
        pts[0] = pts[0] - 2 * (pts[0] @ w + b) * w
    return Dataset(pts, labels, name="random-separable")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
