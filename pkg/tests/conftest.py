import pytest
import torch

from pmg.model import ArchConfig, build_model

torch.set_num_threads(1)

# 8x8 inputs, three stages (8 -> 4 -> 2 -> 1), two supervised
TINY_ARCH = dict(num_stages=3, supervised_stages=2, num_classes=3, vector_dim=8, channels=(4, 6, 8))


@pytest.fixture
def tiny_model():
    model = build_model(ArchConfig(**TINY_ARCH), seed=0).double()
    return model


@pytest.fixture
def tiny_batch():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(4, 3, 8, 8, generator=g, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 1])
    return x, y


@pytest.fixture
def desk_model():
    return build_model(ArchConfig(num_classes=8), seed=0)


@pytest.fixture
def desk_batch():
    g = torch.Generator().manual_seed(2)
    return torch.randn(4, 3, 64, 64, generator=g), torch.tensor([0, 3, 5, 7])


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
