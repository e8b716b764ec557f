import os

import numpy as np
import pytest
import torch

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _scalar(v) -> float:
    return v.detach().item() if torch.is_tensor(v) else float(v)


def central_fd(f, t: torch.Tensor, eps: float) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``f()`` w.r.t. every entry of ``t`` (in place)."""
    g = torch.zeros_like(t)
    flat, gflat = t.data.view(-1), g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = _scalar(f())
        flat[i] = orig - eps
        lo = _scalar(f())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    den = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / den
