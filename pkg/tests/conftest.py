import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from proofrl.env import EnvConfig  # noqa: E402
from proofrl.synth import gen_ground_truth  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    return EnvConfig.small()


@pytest.fixture(scope="session")
def voronoi_128():
    """A 128 px Voronoi ground truth with its membrane image."""
    return gen_ground_truth(128, 128, 12, 5)


def dumbbell(size=32, neck_row=None, neck_height=250, lobe_height=10):
    """Two square lobes joined by a one-pixel-wide neck.

    Returns ``(labels, altitude, neck_pixel)``. Altitude is low in the
    lobes, high on the neck pixel and maximal outside the segment.
    """
    labels = np.zeros((size, size), dtype=np.uint32)
    alt = np.full((size, size), 255.0)
    q = size // 2
    labels[2:q + 6, 2:q - 2] = 1
    labels[2:q + 6, q + 2:size - 2] = 1
    row = neck_row if neck_row is not None else q // 2 + 2
    labels[row, q - 2:q + 2] = 1
    alt[labels == 1] = lobe_height
    alt[row, q - 2:q + 2] = neck_height
    alt[row, q] = neck_height + 2  # the saddle sits on a single pixel
    return labels, alt, (q, row)


@pytest.fixture
def verdict(request):
    """Record one pass/fail line per acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


_VERDICTS = pytest.StashKey()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
