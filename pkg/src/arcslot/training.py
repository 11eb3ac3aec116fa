"""NLL objective, AdamW, and the staged training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .config import DataConfig, StageSpec
from .data import Batch, SyntheticExample, collate, iterate_batches
from .gate import GateTrace, model_forward
from .model import ArcAligner, PipelineError
from .slots import AssembledInput, SlotLayout, assemble_hidden, project

log = logging.getLogger(__name__)


def nll_loss(logits: Tensor, target_ids, target_mask) -> Tensor:
    """Mean negative log-likelihood of ``target_ids`` over positions where ``target_mask`` is 1."""
    mask = np.asarray(target_mask, dtype=np.float32)
    total = float(mask.sum())
    if total == 0:
        raise ContractError("nll_loss needs at least one target token")
    logp = ad.log_softmax_rows(logits)
    picked = ad.pick_last(logp, np.asarray(target_ids))
    return ad.mul(ad.sum(ad.mul(picked, mask)), -1.0 / total)


def forward_batch(
    model: ArcAligner,
    batch: Batch,
    mode: str = "infer",
    gating_enabled: bool = True,
    rng: np.random.Generator | None = None,
    gate_offsets: dict | None = None,
) -> tuple[Tensor, GateTrace]:
    ids = batch.ids
    if batch.E is not None:
        slot_rows = project(model.params, model.cfg, batch.E)
        H0 = assemble_hidden(model.params, model.cfg, ids, batch.positions, slot_rows)
    else:
        H0 = assemble_hidden(model.params, model.cfg, ids, (), None)
    inp = AssembledInput(ids, SlotLayout(batch.positions, ids.shape[-1]), H0)
    return model_forward(model, inp, mode=mode, gating_enabled=gating_enabled, rng=rng, gate_offsets=gate_offsets)


class AdamW:
    """Adam with decoupled weight decay; moment buffers only for the given tensors."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data -= np.float32(lr * self.weight_decay) * p.data
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(np.float32)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def linear_schedule(step: int, total: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear warmup then linear decay to zero; ``step`` is 0-based."""
    warmup = math.ceil(warmup_ratio * total)
    if step < warmup:
        return base_lr * (step + 1) / warmup
    return base_lr * max(0.0, (total - step) / max(1, total - warmup))


def hold_linear_schedule(step: int, total: int, base_lr: float, warmup_ratio: float, hold: float = 0.7) -> float:
    """Linear warmup, flat until ``hold`` of the run, then linear decay to zero."""
    warmup = math.ceil(warmup_ratio * total)
    if step < warmup:
        return base_lr * (step + 1) / warmup
    start = max(warmup, int(hold * total))
    if step < start:
        return base_lr
    return base_lr * max(0.0, (total - step) / max(1, total - start))


SCHEDULE_FUNCTIONS = {"linear": linear_schedule, "hold_linear": hold_linear_schedule}


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if max_norm and norm > max_norm:
        scale = np.float32(max_norm / (norm + 1e-6))
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class StageResult:
    stage: int
    losses: list[float] = field(default_factory=list)
    log_lines: list[str] = field(default_factory=list)
    checkpoint: Path | None = None
    seconds: float = 0.0


def check_prerequisite(model: ArcAligner, stage: int) -> None:
    if stage == 0 and model.stage > 0:
        raise PipelineError("base pretraining would overwrite a backbone already used by later stages")
    if stage >= 2 and model.stage < stage - 1:
        names = {1: "Stage I", 2: "Stage II"}
        raise PipelineError(f"stage {stage} needs a {names[stage - 1]} checkpoint (model is at stage {model.stage})")


def run_stage(
    spec: StageSpec,
    model: ArcAligner,
    data: Sequence[SyntheticExample],
    seed: int = 0,
    checkpoint: str | Path | None = None,
    on_log: Callable[[str], None] | None = None,
    extra_meta: dict | None = None,
) -> StageResult:
    """Train ``spec.trainable`` groups for ``spec.steps`` optimizer steps.

    Stage 0 is backbone pretraining on plain-text renderings of ``data``;
    stages 1-3 feed compressed slots. Everything outside the trainable groups
    has ``requires_grad`` off and is never touched by the optimizer.
    """
    check_prerequisite(model, spec.stage)
    params = model.set_trainable(spec.trainable)
    opt = AdamW(params, weight_decay=spec.weight_decay)
    rng = np.random.default_rng(seed)
    batches = iterate_batches(data, spec.batch_size, rng)
    form = "text" if spec.stage == 0 else "slots"
    codebook = model.params["encoder.codebook"].data
    result = StageResult(spec.stage)
    started = time.perf_counter()
    try:
        for step in range(spec.steps):
            lr = SCHEDULE_FUNCTIONS[spec.schedule](step, spec.steps, spec.learning_rate, spec.warmup_ratio)
            total = 0.0
            for _ in range(spec.grad_accum):
                batch = collate(next(batches), model.vocab, codebook, form=form)
                logits, _ = forward_batch(model, batch, "train", spec.gating_enabled, rng)
                loss = nll_loss(logits, batch.targets, batch.loss_mask)
                if spec.grad_accum > 1:
                    loss = ad.mul(loss, 1.0 / spec.grad_accum)
                loss.backward()
                total += loss.item()
            clip_grad_norm(params, spec.clip_norm)
            opt.step(lr)
            opt.zero_grad()
            result.losses.append(total)
            if (step + 1) % spec.log_every == 0 or step == spec.steps - 1:
                line = f"step={step + 1} stage={spec.stage} loss={total:.6f} lr={lr:.6g}"
                result.log_lines.append(line)
                log.info(line)
                if on_log:
                    on_log(line)
    finally:
        model.set_trainable(())
    model.stage = max(model.stage, spec.stage)
    result.seconds = time.perf_counter() - started
    if checkpoint is not None:
        model.save(checkpoint, {"seed": seed, **(extra_meta or {})})
        result.checkpoint = Path(checkpoint)
    return result


# ---------------------------------------------------------------- end-to-end gradient check


def gradcheck_model(seed: int = 0) -> ArcAligner:
    """2-layer model with every trainable group perturbed away from its zero init.

    Gate output biases alternate between +1.5 and -1.5 so probabilities sit
    well away from the 0.5 threshold and both branches of the gate occur.
    """
    from .config import ModelConfig

    cfg = ModelConfig(n_layers=2, max_seq_len=96, seed=seed, lora_dropout=0.0)
    model = ArcAligner.initialize(cfg)
    rng = np.random.default_rng(seed + 1)
    for name, t in model.params.items():
        if name.startswith("lora.") and name.endswith(".B"):
            t.data[...] = rng.normal(0.0, 0.05, size=t.shape)
        elif name == "proj.W2":
            t.data[...] = rng.normal(0.0, 0.05, size=t.shape)
    for i, layer in enumerate(cfg.gated_layers):
        model.params[f"gate.layer{layer}.b2"].data[...] = 1.5 if i % 2 == 0 else -1.5
    return model


def end_to_end_gradcheck(
    seed: int = 0,
    coords: int = 64,
    h: float = 1e-3,
    tol: float = 1e-2,
    model: ArcAligner | None = None,
) -> ad.GradCheckReport:
    """Finite differences of the Stage III training loss w.r.t. projector, LoRA and gate parameters.

    ``coords`` coordinates are split evenly across the three groups. The
    straight-through offsets are frozen at the base point (see ``ste_gate``).
    LoRA and gate tensors of the last layer are not sampled: they only touch
    slot rows of the final hidden state, which no target reads, so their
    gradient is identically zero.
    """
    from .config import DataConfig
    from .data import gen_qa_corpus

    model = model or gradcheck_model(seed)
    data = gen_qa_corpus(DataConfig(seg_len_min=4, seg_len_max=4), model.vocab, 2, seed)
    batch = collate(data, model.vocab, model.params["encoder.codebook"].data)
    offsets: dict = {}

    def f(_):
        logits, _ = forward_batch(model, batch, "train", True, None, offsets)
        return nll_loss(logits, batch.targets, batch.loss_mask)

    rng = np.random.default_rng(seed)
    groups = ("projector", "lora", "gate")
    analytic, numeric = [], []
    worst = 0.0
    for i, group in enumerate(groups):
        last = f"layer{model.cfg.n_layers - 1}."
        tensors = [model.params[k] for k in sorted(model.group(group)) if group == "projector" or last not in k]
        n = coords // len(groups) + (1 if i < coords % len(groups) else 0)
        model.set_trainable((group,))
        report = ad.check_gradients(f, tensors, h=h, tol=tol, coords=n, rng=rng)
        analytic.append(report.analytic)
        numeric.append(report.numeric)
        worst = max(worst, report.max_rel_error)
    model.set_trainable(())
    return ad.GradCheckReport(worst, tol, np.concatenate(analytic), np.concatenate(numeric))
