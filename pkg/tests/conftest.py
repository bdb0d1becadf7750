import pytest
import torch

from dar.numerics import set_precision


@pytest.fixture(autouse=True)
def f64():
    """Every test runs at 64-bit unless it switches precision itself."""
    set_precision("float64")
    yield
    set_precision("float32")


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)
