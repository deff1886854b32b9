from dataclasses import replace

import pytest
import torch
from hypothesis import HealthCheck, settings

from fptlab.model import ModelConfig, init_model, outlier_fixture
from fptlab.transforms import preservation_batches

settings.register_profile(
    "default", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("default")

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Record ``(criterion, passed, detail)`` for the end-of-run summary."""

    def log(criterion: int, passed: bool, detail: str) -> None:
        _ACCEPTANCE[criterion] = (bool(passed), detail)

    return log


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def default_model():
    return init_model(ModelConfig())


@pytest.fixture(scope="session")
def normed_model(default_model):
    """Default model with non-trivial RMSNorm scales (exercises norm folding)."""
    g = torch.Generator().manual_seed(7)
    params = default_model
    for i, b in enumerate(params.blocks):
        params = params.replace_block(
            i,
            norm_attn=1 + 0.3 * torch.rand(b.norm_attn.shape, generator=g, dtype=torch.float64),
            norm_mlp=1 + 0.3 * torch.rand(b.norm_mlp.shape, generator=g, dtype=torch.float64),
        )
    return replace(params, norm_final=1 + 0.3 * torch.rand(params.norm_final.shape, generator=g, dtype=torch.float64))


@pytest.fixture(scope="session")
def fixture_model():
    return outlier_fixture()


@pytest.fixture(scope="session")
def batches(default_model):
    return preservation_batches(default_model, n_batches=8, batch=4, seq_len=32, seed=0)


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(d_model=16, n_blocks=1, n_q_heads=4, n_kv_heads=2, d_head=4, d_ffn=24, vocab=31, seed=3)
