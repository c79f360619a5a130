import numpy as np
import pytest

from mmfusion.config import RunConfig
from mmfusion.data import SynthSpec, gen_synth

# criterion lines collected by the acceptance module, echoed at session end
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    """Narrow widths so model-level tests stay fast."""
    return RunConfig({"lowlevel.d_s": 8, "lowlevel.d": 8, "lowlevel.ffn_width": 16,
                      "lowlevel.prompts": 2, "lowlevel.layers": 1})


@pytest.fixture(scope="session")
def xor_small():
    return gen_synth(SynthSpec(samples=120, length=4, dim=8))
