"""Gate-controlled recursive refinement of slot rows and the full aligner forward pass.

At every layer the selective-LoRA block runs once. At gated layers up to
``max_loops - 1`` further candidate passes follow; a per-layer gate network
decides, slot by slot, whether each candidate replaces the slot's state.
Training uses the straight-through gate ``g + stopgrad(1[g >= 0.5] - g)``;
inference uses the hard indicator and stops as soon as every gate is closed.
Non-slot rows are reset to their post-mandatory values after every step.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapter import adapted_layer_forward, adapted_rows, broadcast_mask
from .autodiff import ContractError, Tensor
from .model import ArcAligner
from .slots import AssembledInput
from .transformer import CapacityError, base_layer_forward, logits as output_logits

THRESHOLD = 0.5


@dataclass
class GateTrace:
    """Per gated layer, an int array [..., m] of total passes per slot (mandatory included)."""

    max_loops: int
    counts: dict[int, np.ndarray] = field(default_factory=dict)
    probs: dict[int, list[np.ndarray]] = field(default_factory=dict)
    extra_passes: int = 0

    @classmethod
    def start(cls, layers, batch_shape: tuple[int, ...], m: int, max_loops: int) -> "GateTrace":
        return cls(max_loops, {layer: np.ones(batch_shape + (m,), dtype=np.int64) for layer in layers})

    def example(self, i: int) -> "GateTrace":
        """Trace of one example out of a batched trace."""
        return GateTrace(self.max_loops, {k: v[i] for k, v in self.counts.items()})


def gate_probability(model: ArcAligner, layer: int, H_slots: Tensor) -> Tensor:
    """sigmoid(MLP_layer(H_slots)): one refinement probability per slot row."""
    pre = f"gate.layer{layer}."
    if layer not in model.cfg.gated_layers or pre + "W1" not in model.params:
        raise ContractError(f"layer {layer} has no gate")
    p = model.params
    hidden = ad.silu(ad.linear(H_slots, p[pre + "W1"], p[pre + "b1"]))
    return ad.sigmoid(ad.linear(hidden, p[pre + "W2"], p[pre + "b2"]))


def hard_gate(g) -> np.ndarray:
    data = g.data if isinstance(g, Tensor) else np.asarray(g)
    return (data >= THRESHOLD).astype(np.float32)


def ste_gate(g: Tensor, offset: np.ndarray | None = None) -> Tensor:
    """Hard 0/1 gate in the forward pass, identity gradient to ``g``.

    ``offset`` replaces the stop-gradient term ``1[g >= 0.5] - g`` with a fixed
    array. Finite-difference checks use this to freeze the offset recorded at
    the base point, which turns the gate into a smooth function of ``g`` whose
    exact derivative is the straight-through gradient.
    """
    g = g if isinstance(g, Tensor) else Tensor(g)
    if offset is not None:
        return ad.add(g, Tensor(offset))
    return ad.add(g, ad.stop_gradient(ad.sub(Tensor(hard_gate(g)), g)))


def recursive_refine(
    model: ArcAligner,
    layer: int,
    H: Tensor,
    positions,
    mode: str,
    trace: GateTrace | None = None,
    rng: np.random.Generator | None = None,
    offsets: dict | None = None,
) -> Tensor:
    """Gated extra passes at ``layer`` starting from the post-mandatory state ``H``.

    ``offsets`` (train mode only) records the STE offsets per (layer, step) on
    first use and replays them afterwards; see ``ste_gate``.
    """
    if mode not in ("train", "infer"):
        raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
    positions = tuple(positions)
    if not positions:
        return H
    cur = H
    for step in range(model.cfg.max_loops - 1):
        slots = ad.take_rows(cur, positions)
        g = gate_probability(model, layer, slots)
        fired = hard_gate(g)
        if mode == "infer":
            if not fired.any():
                break
            gate = Tensor(fired)
        elif offsets is None:
            gate = ste_gate(g)
        else:
            key = (layer, step)
            if key not in offsets:
                offsets[key] = (hard_gate(g) - g.data).astype(np.float32)
                fired = hard_gate(g)
            else:
                fired = ((g.data + offsets[key]) >= THRESHOLD).astype(np.float32)
            gate = ste_gate(g, offsets[key])
        if trace is not None:
            trace.counts[layer] += fired[..., 0].astype(np.int64)
            trace.probs.setdefault(layer, []).append(g.data[..., 0].copy())
            trace.extra_passes += 1
        # Only slot rows of the candidate are used, so only they are computed.
        candidate = adapted_rows(model.params, model.cfg, layer, cur, positions, rng)
        updated = ad.add(slots, ad.mul(gate, ad.sub(candidate, slots)))
        cur = ad.scatter_rows(H, positions, updated)
    return cur


def model_forward(
    model: ArcAligner,
    inp: AssembledInput,
    mode: str = "infer",
    gating_enabled: bool = True,
    rng: np.random.Generator | None = None,
    gate_offsets: dict | None = None,
) -> tuple[Tensor, GateTrace]:
    """Mandatory selective-LoRA pass per layer, gated recursion where enabled, then logits.

    ``rng`` drives LoRA dropout and is only honoured in train mode.
    """
    cfg = model.cfg
    if mode not in ("train", "infer"):
        raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
    if inp.layout.n > cfg.max_seq_len:
        raise CapacityError(f"sequence of length {inp.layout.n} exceeds max_seq_len={cfg.max_seq_len}")
    rng = rng if mode == "train" else None
    positions = inp.layout.positions
    H = inp.H0
    gated = set(cfg.gated_layers) if gating_enabled and cfg.max_loops > 1 else set()
    trace = GateTrace.start(cfg.gated_layers, H.shape[:-2], len(positions), cfg.max_loops)
    mask = broadcast_mask(inp.layout.n, positions)
    for layer in range(cfg.n_layers):
        if positions:
            H = adapted_layer_forward(model.params, cfg, layer, H, mask, rng)
        else:
            # With no slot rows the masked residual is identically zero.
            H = base_layer_forward(model.params, cfg, layer, H)
        if layer in gated:
            H = recursive_refine(model, layer, H, positions, mode, trace, rng, gate_offsets)
    return output_logits(model.params, cfg, H), trace


# ---------------------------------------------------------------- trace text format

_LINE = re.compile(r"^layer=(\d+) traj=\[(.*)\]$")


def format_cell(count: int, max_loops: int) -> str:
    cell = "L" * count
    cell += "0" * max(0, max_loops - 1 - len(cell))
    if count < max_loops:
        cell += "."
    return cell


def parse_cell(cell: str, max_loops: int) -> int:
    count = len(cell) - len(cell.lstrip("L"))
    if not 1 <= count <= max_loops or format_cell(count, max_loops) != cell:
        raise ValueError(f"malformed trace cell {cell!r} for max_loops={max_loops}")
    return count


def format_trace(trace: GateTrace) -> str:
    """One ``layer=<l> traj=[...]`` line per gated layer for a single (unbatched) trace."""
    lines = []
    for layer in sorted(trace.counts):
        counts = np.asarray(trace.counts[layer]).reshape(-1)
        cells = ", ".join(format_cell(int(c), trace.max_loops) for c in counts)
        lines.append(f"layer={layer} traj=[{cells}]")
    return "\n".join(lines)


def parse_trace(text: str, max_loops: int) -> GateTrace:
    counts = {}
    for line in text.strip().splitlines():
        match = _LINE.match(line.strip())
        if not match:
            raise ValueError(f"not a trace line: {line!r}")
        body = match.group(2).strip()
        cells = [c.strip() for c in body.split(",")] if body else []
        counts[int(match.group(1))] = np.array([parse_cell(c, max_loops) for c in cells], dtype=np.int64)
    return GateTrace(max_loops, counts)
