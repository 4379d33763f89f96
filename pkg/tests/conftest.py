import pytest
import torch

from layered_jscc.channel import ChannelSpec
from layered_jscc.data import synthetic_images
from layered_jscc.schemes import LayerPlan, SchemeModel

CIFAR_N = 32 * 32 * 3
NOISELESS = ChannelSpec(snr_db=200.0)


@pytest.fixture
def plan2():
    return LayerPlan.from_ratios(["1/12", "1/12"], CIFAR_N)


@pytest.fixture
def images():
    return synthetic_images(4, seed=5)


def make(kind, plan, seed=0, **kw):
    return SchemeModel(kind, plan, seed=seed, **kw)


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


# (criterion number, status, detail) rows filled in by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status:<7} {detail}")
