from pathlib import Path

import numpy as np
import pytest

from numstr.data import DigitSet, load_idx

ROOT = Path(__file__).resolve().parents[1]
DIGIT_IMAGES = ROOT / "data" / "digits-images-idx3-ubyte"
DIGIT_LABELS = ROOT / "data" / "digits-labels-idx1-ubyte"


def fake_digits(n=60, seed=0):
    """Dark-on-white rectangles of varied size; enough to exercise composition."""
    rng = np.random.default_rng(seed)
    images = []
    for _ in range(n):
        h, w = int(rng.integers(14, 21)), int(rng.integers(4, 17))
        r = np.full((h, w), 255, np.uint8)
        r[:, :] = rng.integers(0, 200, size=(h, w))
        images.append(r)
    return DigitSet(images, [int(v) for v in rng.integers(0, 10, n)], list(range(n)))


@pytest.fixture
def digits():
    return fake_digits()


def ensure_digit_idx():
    import sys

    sys.path.insert(0, str(ROOT / "scripts"))
    from make_digit_idx import ensure

    return ensure(DIGIT_IMAGES.parent)


@pytest.fixture(scope="session")
def mnist_paths():
    return ensure_digit_idx()


@pytest.fixture(scope="session")
def mnist(mnist_paths):
    images, labels = mnist_paths
    return load_idx(images.read_bytes(), labels.read_bytes())


# ---------------------------------------------------------------- acceptance report

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[marker[0]] = (marker[1], report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        text, outcome = _CRITERIA[number]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict} - {text}")
