import pytest

from arcslot.config import STAGE_TRAINABLE, ConfigError, DataConfig, ModelConfig, RunConfig, StageSpec, format_config, parse_config_text


def test_model_config_defaults_and_validation():
    cfg = ModelConfig()
    assert (cfg.d, cfg.n_layers, cfg.max_loops, cfg.gated_layers) == (64, 4, 3, (0, 1, 2, 3))
    assert cfg.lora_scaling == 4.0 and cfg.d_proj == 128
    for bad in (dict(d=30, n_heads=4), dict(max_loops=0), dict(gated_layers=(4,)), dict(lora_dropout=1.0), dict(lora_rank=0)):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)


def test_gated_layers_normalised():
    assert ModelConfig(gated_layers=[3, 1, 1]).gated_layers == (1, 3)
    assert ModelConfig(gated_layers=()).gated_layers == ()


def test_data_config_validation():
    with pytest.raises(ConfigError):
        DataConfig(seg_len_min=5, seg_len_max=4)
    with pytest.raises(ConfigError):
        DataConfig(qa_segments=1)


def test_stage_specs():
    assert StageSpec.for_stage(1).trainable == STAGE_TRAINABLE[1] == ("projector", "lora")
    assert StageSpec.for_stage(3).trainable == ("projector", "lora", "gate")
    assert not StageSpec.for_stage(2).gating_enabled and StageSpec.for_stage(3).gating_enabled
    assert StageSpec.for_stage(0).trainable == ("base",)
    assert StageSpec.for_stage(2, steps=7).steps == 7
    with pytest.raises(ConfigError):
        StageSpec.for_stage(4)
    with pytest.raises(ConfigError):
        StageSpec(1, schedule="cosine")


def test_parse_config_text():
    cfg = parse_config_text(
        """
        # toy run
        d = 32
        n_heads = 4
        gated_layers = 0,2
        seg_len_max = 30
        steps = 100          # every stage
        stage2.learning_rate = 0.001
        stage2.steps = 5
        """
    )
    assert cfg.model.d == 32 and cfg.model.gated_layers == (0, 2)
    assert cfg.data.seg_len_max == 30
    assert cfg.stage_spec(1).steps == 100
    assert cfg.stage_spec(2).steps == 5 and cfg.stage_spec(2).learning_rate == 0.001


@pytest.mark.parametrize("text", ["nonsense = 1", "d 32", "stage9x.steps = 1", "stage1.bogus = 2", "d = abc"])
def test_parse_config_errors(text):
    with pytest.raises((ConfigError, ValueError)):
        parse_config_text(text)


def test_format_round_trip():
    cfg = parse_config_text("gated_layers = none\nstage3.steps = 4\nmax_loops = 2")
    again = parse_config_text(format_config(cfg))
    assert again.model == cfg.model and again.data == cfg.data and again.stage_overrides == cfg.stage_overrides
    assert isinstance(RunConfig().stage_spec(0), StageSpec)
