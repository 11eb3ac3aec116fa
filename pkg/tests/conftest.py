import numpy as np
import pytest
from hypothesis import settings

from arcslot.config import ModelConfig
from arcslot.model import ArcAligner

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def tiny_config(**overrides) -> ModelConfig:
    kw = dict(d=16, n_layers=2, n_heads=2, ffn_mult=2, max_seq_len=48, d_r=16, lora_rank=4, gate_hidden=8, content_vocab=12)
    kw.update(overrides)
    return ModelConfig(**kw)


def perturbed(model: ArcAligner, seed: int = 0, scale: float = 0.05) -> ArcAligner:
    """Give LoRA up-maps and the projector's final affine nonzero values."""
    rng = np.random.default_rng(seed)
    for name, t in model.params.items():
        if (name.startswith("lora.") and name.endswith(".B")) or name in ("proj.W2", "proj.b2"):
            t.data[...] = rng.normal(0.0, scale, size=t.shape)
    return model


@pytest.fixture
def tiny_model():
    return ArcAligner.initialize(tiny_config(), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
