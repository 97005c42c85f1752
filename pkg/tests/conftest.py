import numpy as np
import pytest
import torch

from fccdn.network import NetworkConfig, build_model


def pytest_configure(config):
    torch.use_deterministic_algorithms(True)


def fd_relative_error(fn, tensor: torch.Tensor, eps: float = 1e-5) -> float:
    """Relative error between autograd and central differences of scalar ``fn()`` w.r.t. ``tensor``.

    ``tensor`` must be a leaf in double precision with at most 64 elements.
    """
    assert tensor.dtype == torch.float64 and tensor.numel() <= 64
    if tensor.grad is not None:
        tensor.grad = None
    fn().backward()
    analytic = tensor.grad.detach().clone().ravel()
    numeric = torch.zeros_like(analytic)
    flat = tensor.data.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * eps)
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / scale


def projected_sum(out: torch.Tensor, seed: int = 0) -> torch.Tensor:
    """Fixed random linear functional of ``out``; avoids the degenerate plain sum under batch norm."""
    g = torch.Generator().manual_seed(seed)
    return (out * torch.randn(out.shape, generator=g, dtype=out.dtype)).sum()


@pytest.fixture
def tiny_cfg():
    return NetworkConfig.fccdn(width_multiplier=0.125, stage_depths=(1, 1, 1, 1))


@pytest.fixture
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg, seed=0).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_record():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
        _ACCEPTANCE_LINES.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
