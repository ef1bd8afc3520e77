import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("fast", max_examples=20, deadline=None)
settings.register_profile("default", deadline=None)
settings.load_profile("default")

from tape.frame_analysis import DeterministicToyProvider  # noqa: E402
from tape.net import NetConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return NetConfig(T=2, D=2, M=2, C=8, stages=1, depth=2, bottleneck_depth=2, extractor_depth=1)


@pytest.fixture
def small_cfg():
    return NetConfig(T=3, D=2, M=4, C=16, stages=2, depth=2, bottleneck_depth=1, extractor_depth=1)


@pytest.fixture
def toy_provider():
    return DeterministicToyProvider()


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line; the summary is printed at the end of the run."""

    def record(number, ok: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
