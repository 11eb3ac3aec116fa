import math

import numpy as np
import pytest

from arcslot import autodiff as ad
from arcslot.autodiff import ContractError, Tensor
from arcslot.config import DataConfig, StageSpec
from arcslot.data import gen_qa_corpus, gen_reconstruction_corpus
from arcslot.model import ArcAligner, PipelineError
from arcslot.training import (
    AdamW,
    check_prerequisite,
    clip_grad_norm,
    end_to_end_gradcheck,
    hold_linear_schedule,
    linear_schedule,
    nll_loss,
    run_stage,
)

import oracles
from conftest import tiny_config

SMALL = DataConfig(seg_len_min=3, seg_len_max=5, seg_count_min=2, seg_count_max=3, qa_segments=3)


def test_nll_of_uniform_logits_is_log_vocab():
    logits = Tensor(np.zeros((2, 5, 32)))
    loss = nll_loss(logits, np.zeros((2, 5), np.int64), np.ones((2, 5))).item()
    assert abs(loss - 3.4657359) < 1e-6
    assert abs(loss - math.log(32)) < 1e-6


def test_nll_matches_reference_and_ignores_masked(rng):
    x = rng.normal(size=(2, 4, 7))
    ids = rng.integers(0, 7, size=(2, 4))
    mask = np.array([[1, 1, 0, 0], [0, 1, 1, 1]], np.float32)
    got = nll_loss(Tensor(x), ids, mask).item()
    lp = oracles.log_softmax(x.astype(np.float32).astype(np.float64))
    picked = np.take_along_axis(lp, ids[..., None], -1)[..., 0]
    assert abs(got - float(-(picked * mask).sum() / mask.sum())) < 1e-6
    other = x.copy()
    other[0, 3] += 100.0
    assert nll_loss(Tensor(other), ids, mask).item() == got


def test_nll_empty_mask():
    with pytest.raises(ContractError):
        nll_loss(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), np.int64), np.zeros((1, 2)))


def test_adamw_matches_reference_update(rng):
    w0, grads = rng.normal(size=5).astype(np.float32), [rng.normal(size=5).astype(np.float32) for _ in range(3)]
    p = Tensor(w0.copy(), requires_grad=True)
    opt = AdamW([p], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1)
    w, m, v = w0.astype(np.float64), np.zeros(5), np.zeros(5)
    for t, g in enumerate(grads, 1):
        p.grad = g.copy()
        opt.step(0.01)
        g = g.astype(np.float64)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * 0.1 * w
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.abs(p.data - w).max() < 1e-5


def test_linear_schedule_values():
    lrs = [linear_schedule(s, 100, 1.0, 0.1) for s in range(100)]
    assert lrs[0] == pytest.approx(0.1) and lrs[9] == pytest.approx(1.0)
    assert lrs[10] == pytest.approx(1.0) and lrs[55] == pytest.approx(0.5)
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:])) and lrs[-1] > 0
    assert linear_schedule(0, 10, 2.0, 0.0) == 2.0


def test_hold_linear_schedule_values():
    lrs = [hold_linear_schedule(s, 100, 1.0, 0.1) for s in range(100)]
    assert lrs[0] == pytest.approx(0.1) and lrs[9] == 1.0
    assert all(lr == 1.0 for lr in lrs[10:70])
    assert lrs[70] == 1.0 and lrs[85] == pytest.approx(0.5) and lrs[99] == pytest.approx(1 / 30)


def test_clip_grad_norm():
    a, b = Tensor(np.zeros(2)), Tensor(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0], np.float32), np.array([4.0], np.float32)
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert math.sqrt(float((a.grad**2).sum() + (b.grad**2).sum())) == pytest.approx(1.0, rel=1e-5)
    a.grad = np.array([0.3, 0.0], np.float32)
    b.grad = None
    clip_grad_norm([a, b], 1.0)
    assert a.grad.tolist() == pytest.approx([0.3, 0.0])


def test_prerequisites():
    model = ArcAligner.initialize(tiny_config())
    model.stage = 1
    check_prerequisite(model, 2)
    with pytest.raises(PipelineError, match="Stage II"):
        check_prerequisite(model, 3)
    with pytest.raises(PipelineError):
        check_prerequisite(model, 0)


def _changed(before, model):
    return {k for k, v in model.params.items() if not np.array_equal(before[k], v.data)}


@pytest.mark.parametrize("stage", [1, 2, 3])
def test_one_step_changes_exactly_the_stage_groups(stage):
    model = ArcAligner.initialize(tiny_config())
    model.stage = stage - 1
    data = (gen_reconstruction_corpus if stage == 1 else gen_qa_corpus)(SMALL, model.vocab, 8, 0)
    if stage == 3:
        for layer in model.cfg.gated_layers:
            model.params[f"gate.layer{layer}.b2"].data[...] = 0.5
    before = model.snapshot()
    run_stage(StageSpec.for_stage(stage, steps=1, learning_rate=1e-2, batch_size=4), model, data)
    changed = _changed(before, model)
    groups = {"projector": "proj.", "lora": "lora.", "gate": "gate."}
    expected = tuple(groups[g] for g in StageSpec.for_stage(stage).trainable)
    assert changed and all(k.startswith(expected) for k in changed)
    assert not any(k.startswith(("base.", "encoder.")) for k in changed)
    if stage == 3:
        assert any(k.startswith("gate.") for k in changed)
    assert model.trainable_names() == []


def test_training_reduces_loss_and_writes_checkpoint(tmp_path):
    model = ArcAligner.initialize(tiny_config())
    model.stage = 0
    data = gen_reconstruction_corpus(SMALL, model.vocab, 64, 0)
    lines = []
    result = run_stage(
        StageSpec.for_stage(1, steps=40, learning_rate=3e-3, batch_size=8, log_every=10), model, data, checkpoint=tmp_path / "s1.ckpt", on_log=lines.append
    )
    assert np.mean(result.losses[-5:]) < np.mean(result.losses[:5])
    assert lines[0].startswith("step=10 stage=1 loss=") and len(lines) == 4
    assert ArcAligner.load(tmp_path / "s1.ckpt").stage == 1


def test_end_to_end_gradcheck_passes():
    report = end_to_end_gradcheck(seed=0, coords=24)
    assert report.passed and len(report.analytic) == 24
    assert np.count_nonzero(report.analytic) == 24
