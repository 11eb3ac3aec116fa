"""Model, data and stage hyperparameters plus the flat ``key = value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

STAGE_TRAINABLE = {
    1: ("projector", "lora"),
    2: ("projector", "lora"),
    3: ("projector", "lora", "gate"),
}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 0  # 0 means "size of the built-in vocabulary"
    d: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    max_seq_len: int = 192
    d_r: int = 64
    lora_rank: int = 8
    lora_alpha: float = 32.0
    lora_dropout: float = 0.05
    max_loops: int = 3
    gated_layers: tuple[int, ...] | None = None  # None means every layer
    gate_hidden: int = 32
    gate_bias_init: float = -1.0
    content_vocab: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.gated_layers is None:
            self.gated_layers = tuple(range(self.n_layers))
        self.gated_layers = tuple(sorted(set(int(i) for i in self.gated_layers)))
        self.validate()

    def validate(self) -> None:
        positive = ("d", "n_layers", "n_heads", "ffn_mult", "max_seq_len", "d_r", "lora_rank", "gate_hidden", "content_vocab")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.max_loops < 1:
            raise ConfigError(f"max_loops must be >= 1, got {self.max_loops}")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ConfigError(f"lora_dropout must lie in [0, 1), got {self.lora_dropout}")
        if self.lora_alpha <= 0:
            raise ConfigError("lora_alpha must be positive")
        bad = [i for i in self.gated_layers if not 0 <= i < self.n_layers]
        if bad:
            raise ConfigError(f"gated_layers {bad} outside 0..{self.n_layers - 1}")

    @property
    def lora_scaling(self) -> float:
        return self.lora_alpha / self.lora_rank

    @property
    def d_proj(self) -> int:
        return 2 * self.d

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class DataConfig:
    seg_len_min: int = 24
    seg_len_max: int = 24
    seg_count_min: int = 3
    seg_count_max: int = 3
    qa_segments: int = 3
    two_hop_fraction: float = 0.0
    base_recitation_fraction: float = 0.25

    def __post_init__(self):
        if not 1 <= self.seg_len_min <= self.seg_len_max:
            raise ConfigError("need 1 <= seg_len_min <= seg_len_max")
        if not 1 <= self.seg_count_min <= self.seg_count_max:
            raise ConfigError("need 1 <= seg_count_min <= seg_count_max")
        if self.qa_segments < 2:
            raise ConfigError("qa_segments must be >= 2 (answer pair plus a distractor)")
        if not 0.0 <= self.two_hop_fraction <= 1.0:
            raise ConfigError("two_hop_fraction must lie in [0, 1]")
        if not 0.0 <= self.base_recitation_fraction <= 1.0:
            raise ConfigError("base_recitation_fraction must lie in [0, 1]")


SCHEDULES = ("linear", "hold_linear")


@dataclass
class StageSpec:
    stage: int
    trainable: tuple[str, ...] = ()
    gating_enabled: bool = False
    kind: str = "reconstruction"
    steps: int = 1000
    learning_rate: float = 2e-4
    warmup_ratio: float = 0.03
    schedule: str = "linear"
    batch_size: int = 8
    grad_accum: int = 1
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    log_every: int = 50

    def __post_init__(self):
        if self.stage not in (0, 1, 2, 3):
            raise ConfigError(f"unknown stage {self.stage}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.steps < 1 or self.batch_size < 1 or self.grad_accum < 1:
            raise ConfigError("steps, batch_size and grad_accum must be >= 1")
        self.trainable = tuple(self.trainable)

    @classmethod
    def for_stage(cls, stage: int, **overrides) -> "StageSpec":
        """Stage defaults: which groups train, whether gates run, which corpus.

        Learning rates are toy-scale: at 2e-5 the slot QA accuracy of Stage II
        is still near chance after 2k steps, at 1e-3 it saturates within 500.
        """
        if stage == 0:
            base = dict(trainable=("base",), gating_enabled=False, kind="base", steps=10000, learning_rate=1e-3, batch_size=16, schedule="hold_linear")
        elif stage == 1:
            base = dict(trainable=STAGE_TRAINABLE[1], gating_enabled=False, kind="reconstruction", steps=4000, learning_rate=1e-3)
        elif stage == 2:
            base = dict(trainable=STAGE_TRAINABLE[2], gating_enabled=False, kind="qa", steps=3000, learning_rate=1e-3, batch_size=16)
        elif stage == 3:
            base = dict(trainable=STAGE_TRAINABLE[3], gating_enabled=True, kind="qa", steps=1500, learning_rate=1e-3, batch_size=16)
        else:
            raise ConfigError(f"unknown stage {stage}")
        base.update(overrides)
        return cls(stage=stage, **base)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    stage_overrides: dict[int, dict[str, Any]] = field(default_factory=dict)

    def stage_spec(self, stage: int) -> StageSpec:
        return StageSpec.for_stage(stage, **self.stage_overrides.get(stage, {}))


# ---------------------------------------------------------------- text format

_STAGE_KEYS = {f.name for f in fields(StageSpec)} - {"stage", "trainable", "gating_enabled", "kind"}


def _parse_value(target_type, raw: str):
    raw = raw.strip()
    if target_type in (int, "int"):
        return int(raw)
    if target_type in (float, "float"):
        return float(raw)
    if target_type in (bool, "bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    return raw


def _field_types(cls) -> dict[str, Any]:
    hints = {"int": int, "float": float, "bool": bool, "str": str}
    out = {}
    for f in fields(cls):
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "str")
        out[f.name] = hints.get(t, t)
    return out


def parse_gated_layers(raw: str, n_layers: int | None = None) -> tuple[int, ...] | None:
    raw = raw.strip()
    if raw == "all":
        return None if n_layers is None else tuple(range(n_layers))
    if raw in ("", "none"):
        return ()
    return tuple(int(p) for p in raw.split(","))


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines.

    Keys are ModelConfig, DataConfig or StageSpec field names. StageSpec keys
    apply to every stage unless written as ``stage<k>.<key>``, which wins.
    """
    base = base or RunConfig()
    model_kw = dataclasses.asdict(base.model)
    data_kw = dataclasses.asdict(base.data)
    stage_kw: dict[int, dict[str, Any]] = {k: dict(v) for k, v in base.stage_overrides.items()}
    shared: dict[str, Any] = {}
    prefixed: list[tuple[int, str, Any]] = []
    explicit: set[str] = set()
    model_types, data_types, stage_types = _field_types(ModelConfig), _field_types(DataConfig), _field_types(StageSpec)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        explicit.add(key)
        if key == "gated_layers":
            model_kw[key] = parse_gated_layers(raw)
        elif key in model_types:
            model_kw[key] = _parse_value(model_types[key], raw)
        elif key in data_types:
            data_kw[key] = _parse_value(data_types[key], raw)
        elif key in _STAGE_KEYS:
            shared[key] = _parse_value(stage_types[key], raw)
        elif key.startswith("stage") and "." in key:
            head, sub = key.split(".", 1)
            try:
                stage = int(head[len("stage"):])
            except ValueError:
                raise ConfigError(f"line {lineno}: bad stage prefix in {key!r}") from None
            if sub not in _STAGE_KEYS:
                raise ConfigError(f"line {lineno}: unknown stage key {sub!r}")
            prefixed.append((stage, sub, _parse_value(stage_types[sub], raw)))
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    if model_kw["gated_layers"] == tuple(range(base.model.n_layers)) and "gated_layers" not in explicit:
        model_kw["gated_layers"] = None  # "all layers" follows n_layers
    for stage in (0, 1, 2, 3):
        if shared:
            stage_kw.setdefault(stage, {}).update(shared)
    for stage, sub, value in prefixed:
        stage_kw.setdefault(stage, {})[sub] = value
    return RunConfig(ModelConfig(**model_kw), DataConfig(**data_kw), stage_kw)


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(), base)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(ModelConfig):
        value = getattr(cfg.model, f.name)
        if f.name == "gated_layers":
            value = ",".join(str(i) for i in value) if value else "none"
        lines.append(f"{f.name} = {value}")
    for f in fields(DataConfig):
        lines.append(f"{f.name} = {getattr(cfg.data, f.name)}")
    for stage in sorted(cfg.stage_overrides):
        for key, value in sorted(cfg.stage_overrides[stage].items()):
            lines.append(f"stage{stage}.{key} = {value}")
    return "\n".join(lines) + "\n"
