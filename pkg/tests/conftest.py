import numpy as np
import pytest

from gprebn.normalization import AffineParams, BNLayerState, RunningStats


def random_layer(rng, d, eps=1e-5, test_n=3, src_n=5):
    """BN layer with random affine parameters and initialized running tracks."""
    return BNLayerState(
        AffineParams(rng.uniform(0.5, 2.0, d), rng.uniform(-1.0, 1.0, d)),
        RunningStats(rng.uniform(-1, 1, d), rng.uniform(0.3, 3.0, d), src_n, "ema"),
        RunningStats(rng.uniform(-1, 1, d), rng.uniform(0.3, 3.0, d), test_n, "cma"),
        epsilon=eps,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_report_header(config):
    from gprebn import BACKEND
    return f"gprebn kernel backend: {BACKEND}"


def pytest_terminal_summary(terminalreporter):
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if getattr(rep, "when", None) != "call":
                continue
            lines.extend(v for k, v in getattr(rep, "user_properties", ()) if k == "acceptance")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
