import pytest

from hybridseq.config import ModelConfig
from hybridseq.model import HybridModel
from hybridseq.tome import synthetic_sequence


def small_config(layers="M A M A", **kw):
    base = dict(layers=layers, hidden_dim=16, ssm_state=4, attn_heads=2, mamba_heads=2, vocab=32, seed=3)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def toy_config():
    return small_config()


@pytest.fixture
def toy_model(toy_config):
    return HybridModel(toy_config)


@pytest.fixture
def toy_seq(toy_model):
    return synthetic_sequence(toy_model, frames=4, tokens_per_frame=8, seed=1, instruction_len=4, response_len=2)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
