import hypothesis
import numpy as np
import pytest
import torch

from dipcf.core_model import build_predictor
from dipcf.loss_estimator import LossEstimatorHead

hypothesis.settings.register_profile("default", deadline=None, max_examples=50)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=10)
hypothesis.settings.load_profile("default")


def central_difference(fn, x, h=1e-6):
    """Numerical gradient of scalar ``fn`` at float64 tensor ``x``."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn(x))
            flat[i] = orig - h
            down = float(fn(x))
            flat[i] = orig
            g[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b):
    a = torch.as_tensor(a, dtype=torch.float64).flatten()
    b = torch.as_tensor(b, dtype=torch.float64).flatten()
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-300))


@pytest.fixture
def fd():
    return central_difference


@pytest.fixture
def rel_err():
    return relative_error


def make_tiny(size=8, num_classes=3, dtype=torch.float64, seed=0):
    """A small random predictor + head, marked as trained, in eval mode."""
    torch.manual_seed(seed)
    model = build_predictor(num_classes, input_shape=(size, size, 3), stage_channels=(4, 6, 8, 10),
                            blocks_per_stage=1)
    head = LossEstimatorHead(model.stage_channels, hidden_dim=8)
    model.set_normalization([0.5, 0.5, 0.5], [0.25, 0.25, 0.25])
    head.trained = True
    return model.to(dtype).eval(), head.to(dtype).eval()


@pytest.fixture
def tiny():
    return make_tiny()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one pass/fail line per acceptance criterion."""
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
