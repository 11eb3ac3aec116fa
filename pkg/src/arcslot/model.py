"""Parameter container tying the backbone, encoder, projector, adapters and gates together."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, parse_gated_layers
from .slots import init_codebook, init_projector
from .transformer import Params, init_base_params
from .adapter import init_lora
from .vocab import Vocab, get_vocab

GROUP_PREFIX = {
    "base": "base.",
    "encoder": "encoder.",
    "projector": "proj.",
    "lora": "lora.",
    "gate": "gate.",
}


class PipelineError(RuntimeError):
    """A training stage was started without its prerequisite."""


def init_gates(cfg: ModelConfig, rng: np.random.Generator, std: float = 0.02) -> Params:
    """Per gated layer: d -> gate_hidden -> 1, SiLU between; output bias starts at gate_bias_init."""
    p: Params = {}
    for layer in cfg.gated_layers:
        pre = f"gate.layer{layer}."
        p[pre + "W1"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(cfg.d), size=(cfg.gate_hidden, cfg.d)))
        p[pre + "b1"] = Tensor(np.zeros(cfg.gate_hidden))
        p[pre + "W2"] = Tensor(rng.normal(0.0, std, size=(1, cfg.gate_hidden)))
        p[pre + "b2"] = Tensor(np.full(1, cfg.gate_bias_init))
    return p


class ArcAligner:
    """All parameters of one model plus its config and vocabulary.

    ``stage`` records the last completed training stage (0 = base pretrained,
    -1 = fresh random backbone) so later stages can check their prerequisite.
    """

    def __init__(self, cfg: ModelConfig, params: Params, stage: int = -1):
        self.cfg = cfg
        self.vocab: Vocab = get_vocab(cfg.content_vocab)
        self.params = params
        self.stage = stage
        self.meta: dict = {}

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int | None = None) -> "ArcAligner":
        vocab = get_vocab(cfg.content_vocab)
        if cfg.vocab_size == 0:
            cfg = cfg.replace(vocab_size=len(vocab))
        elif cfg.vocab_size < len(vocab):
            raise ValueError(f"vocab_size={cfg.vocab_size} is smaller than the built-in vocabulary ({len(vocab)})")
        seed = cfg.seed if seed is None else seed
        streams = np.random.SeedSequence(seed).spawn(5)
        rngs = [np.random.default_rng(s) for s in streams]
        params: Params = {}
        params.update(init_base_params(cfg, cfg.vocab_size, rngs[0]))
        params["encoder.codebook"] = init_codebook(cfg, rngs[1])
        params.update(init_projector(cfg, rngs[2]))
        params.update(init_lora(cfg, rngs[3]))
        params.update(init_gates(cfg, rngs[4]))
        return cls(cfg, params)

    # -- parameter groups

    def group(self, name: str) -> dict[str, Tensor]:
        prefix = GROUP_PREFIX[name]
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def set_trainable(self, groups) -> list[Tensor]:
        """Enable gradients for exactly ``groups``; returns those tensors in name order."""
        groups = set(groups)
        unknown = groups - set(GROUP_PREFIX)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        out = []
        for name in sorted(self.params):
            t = self.params[name]
            group = next(g for g, pre in GROUP_PREFIX.items() if name.startswith(pre))
            t.requires_grad = group in groups
            t.grad = None
            if t.requires_grad:
                out.append(t)
        return out

    def trainable_names(self) -> list[str]:
        return sorted(k for k, v in self.params.items() if v.requires_grad)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def clone(self) -> "ArcAligner":
        params = {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        out = ArcAligner(self.cfg, params, self.stage)
        out.meta = dict(self.meta)
        return out

    # -- persistence

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        meta = {"stage": self.stage, "config": _config_to_meta(self.cfg)}
        meta.update(extra_meta or {})
        save_checkpoint(path, {k: v.data for k, v in self.params.items()}, meta)

    @classmethod
    def load(cls, path: str | Path) -> "ArcAligner":
        tensors, meta = load_checkpoint(path)
        cfg = _config_from_meta(meta["config"])
        model = cls(cfg, {k: Tensor(v) for k, v in tensors.items()}, stage=int(meta.get("stage", -1)))
        model.meta = meta
        return model


def _config_to_meta(cfg: ModelConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["gated_layers"] = list(cfg.gated_layers)
    return d


def _config_from_meta(d: dict) -> ModelConfig:
    d = dict(d)
    gl = d.get("gated_layers")
    d["gated_layers"] = parse_gated_layers(gl) if isinstance(gl, str) else tuple(gl)
    return ModelConfig(**d)
