import sys

import numpy as np
import pytest
import torch
from torch import nn

from hsplid.datasets import build_synthetic_shapes
from hsplid.models import ArchitectureSpec, SaliencyNet, build_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_split():
    return build_synthetic_shapes(10, k=4, seed=3)


def mlp(seed=0, input_shape=(1, 4, 4), latent=6, k=3, hidden=5, activation="tanh", dtype=torch.float64):
    arch = ArchitectureSpec("mlp_small", input_shape, latent, k, hidden, activation)
    return build_model(arch, seed=seed).to(dtype)


def linear_net(W, A=None):
    """h(x) = W A x with a flatten front end; A defaults to the identity."""
    W = torch.as_tensor(W, dtype=torch.float64)
    k, m = W.shape
    d = m if A is None else torch.as_tensor(A).shape[1]
    lin = nn.Linear(d, m, bias=False).double()
    with torch.no_grad():
        lin.weight.copy_(torch.eye(m, dtype=torch.float64) if A is None else torch.as_tensor(A, dtype=torch.float64))
    net = SaliencyNet(nn.Sequential(nn.Flatten(), lin), m, k).double()
    with torch.no_grad():
        net.head.weight.copy_(W)
    return net


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
