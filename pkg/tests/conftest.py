import numpy as np
import pytest
import torch
from hypothesis import settings

from vesselcyclegan.synthetic import pretrain_toy_segmenter, toy_specs, toy_unpaired_sets

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_segmenter_ckpt():
    return pretrain_toy_segmenter(seed=0)


@pytest.fixture(scope="session")
def toy_specs_fixture():
    return toy_specs()


@pytest.fixture(scope="session")
def toy_sets():
    return toy_unpaired_sets(4, 64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
