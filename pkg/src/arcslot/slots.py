"""Context-slot interface: toy context encoder, projector, templates, input assembly."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .config import ModelConfig
from .transformer import Params, embed_tokens
from .vocab import Vocab, VocabularyError


class SegmentationError(ValueError):
    pass


class TemplateError(ValueError):
    pass


# ---------------------------------------------------------------- encoder


def init_codebook(cfg: ModelConfig, rng: np.random.Generator) -> Tensor:
    """Frozen random codebook, one d_r row per content token.

    Rows are orthogonal (scaled to norm sqrt(d_r)) whenever d_r >= content_vocab,
    so a mean-pooled segment still determines its token counts.
    """
    k, dr = cfg.content_vocab, cfg.d_r
    g = rng.standard_normal((dr, k))
    if dr >= k:
        q, _ = np.linalg.qr(g)
        rows = q.T
    else:
        rows = (g / np.linalg.norm(g, axis=0, keepdims=True)).T
    return Tensor(rows * np.sqrt(dr))


@dataclass
class CompressedContext:
    E: np.ndarray  # [m, d_r]
    source_token_count: int

    @property
    def m(self) -> int:
        return self.E.shape[0]

    @property
    def compression_ratio(self) -> float:
        return self.source_token_count / self.m


def encode_context(codebook: Tensor, vocab: Vocab, segments: Sequence[Sequence[int]]) -> CompressedContext:
    """Mean-pool codebook rows per segment: one compressed embedding per segment."""
    if len(segments) == 0:
        raise SegmentationError("context has no segments")
    rows = []
    total = 0
    for i, seg in enumerate(segments):
        if len(seg) == 0:
            raise SegmentationError(f"segment {i} is empty")
        ids = np.asarray(seg, dtype=np.int64)
        if not all(vocab.is_content(int(t)) for t in ids):
            raise VocabularyError(f"segment {i} contains non-content tokens")
        rows.append(codebook.data[ids - vocab.content_offset].mean(axis=0))
        total += len(seg)
    return CompressedContext(np.stack(rows).astype(np.float32), total)


# ---------------------------------------------------------------- projector


def init_projector(cfg: ModelConfig, rng: np.random.Generator, zero_final: bool = True) -> Params:
    """Two affine maps d_r -> 2d -> d with SiLU between; final map zero by default."""
    hidden = cfg.d_proj
    W2 = np.zeros((cfg.d, hidden)) if zero_final else rng.normal(0.0, 0.02, size=(cfg.d, hidden))
    return {
        "proj.W1": Tensor(rng.normal(0.0, 1.0 / np.sqrt(cfg.d_r), size=(hidden, cfg.d_r))),
        "proj.b1": Tensor(np.zeros(hidden)),
        "proj.W2": Tensor(W2),
        "proj.b2": Tensor(np.zeros(cfg.d)),
    }


def project(params: Params, cfg: ModelConfig, E) -> Tensor:
    """Row-wise projector applied to [m, d_r] (or [B, m, d_r]) embeddings."""
    E = E if isinstance(E, Tensor) else Tensor(E.E if isinstance(E, CompressedContext) else E)
    if E.shape[-1] != cfg.d_r:
        raise DimensionError(f"compressed embeddings have width {E.shape[-1]}, projector expects d_r={cfg.d_r}")
    h = ad.silu(ad.linear(E, params["proj.W1"], params["proj.b1"]))
    return ad.linear(h, params["proj.W2"], params["proj.b2"])


# ---------------------------------------------------------------- templates

_MARKER = re.compile(r"\[[^\]]*\]")
KNOWN_MARKERS = ("[B]", "[B*]", "[Q]", "[T]")


@dataclass(frozen=True)
class Template:
    """Whitespace-tokenised prompt with markers.

    ``[B]`` is one slot, ``[B*]`` expands to one slot per compressed segment,
    ``[Q]`` is the question and ``[T]`` the target (which must come last).
    """

    text: str

    def __post_init__(self):
        for mark in _MARKER.findall(self.text):
            if mark not in KNOWN_MARKERS:
                raise TemplateError(f"unknown marker {mark} in template {self.text!r}")
        parts = self.text.split()
        if "[T]" in parts and parts[-1] != "[T]":
            raise TemplateError("the [T] marker must end the template")
        if parts.count("[T]") > 1 or parts.count("[Q]") > 1 or parts.count("[B*]") > 1:
            raise TemplateError(f"repeated [T], [Q] or [B*] marker in {self.text!r}")
        if "[B*]" in parts and "[B]" in parts:
            raise TemplateError("mixing [B] and [B*] markers is ambiguous")

    @property
    def fixed_slots(self) -> int | None:
        parts = self.text.split()
        return None if "[B*]" in parts else parts.count("[B]")

    def layout(self, vocab: Vocab, m: int, question: Sequence[int] = ()) -> tuple[list[int], list[int]]:
        """Prompt token ids (target excluded) and slot positions for ``m`` slots."""
        fixed = self.fixed_slots
        if fixed is not None and fixed != m:
            raise TemplateError(f"template declares {fixed} slot(s) but the context has {m}")
        ids = [vocab.bos]
        slots = []
        for w in self.text.split():
            if w in ("[B]", "[B*]"):
                count = 1 if w == "[B]" else m
                slots.extend(range(len(ids), len(ids) + count))
                ids.extend([vocab.slot] * count)
            elif w == "[Q]":
                ids.extend(int(t) for t in question)
            elif w == "[T]":
                break
            else:
                ids.extend(vocab.encode_words(w))
        return ids, slots

    def with_text(self, vocab: Vocab, segments: Sequence[Sequence[int]], question: Sequence[int] = ()) -> list[int]:
        """Uncompressed variant: every background marker replaced by the raw context tokens."""
        ids = [vocab.bos]
        flat = [int(t) for seg in segments for t in seg]
        placed = False
        for w in self.text.split():
            if w in ("[B]", "[B*]"):
                if not placed:
                    ids.extend(flat)
                    placed = True
            elif w == "[Q]":
                ids.extend(int(t) for t in question)
            elif w == "[T]":
                break
            else:
                ids.extend(vocab.encode_words(w))
        return ids


def load_template(path: str | Path) -> Template:
    return Template(" ".join(Path(path).read_text().split()))


# Stage I instruction skeletons, one per intent.
RECONSTRUCTION_TEMPLATES = (
    Template("Background : [B*] . This is equivalent to : [T]"),
    Template("Rewrite the background in your own words : [B*] -> [T]"),
    Template("Provide a restatement of the background : [B*] . Return : [T]"),
    Template("[B*] is a paraphrase of what ? Answer with : [T]"),
    Template("These two expressions convey the same meaning : (1) [B*] (2) [T]"),
    Template("Restate [B*] using a single sentence . Output only [T]"),
)

# The answer directly follows the queried key, so a lookup is "find the key,
# copy the token after it". With "Answer :" in between, small backbones stay
# at chance on the text form for 9k+ steps.
QA_TEMPLATE = Template("Refer to the background document : [B*] Question : [Q] [T]")
QA_NO_CONTEXT_TEMPLATE = Template("Question : [Q] [T]")


# ---------------------------------------------------------------- assembly


@dataclass
class SlotLayout:
    positions: tuple[int, ...]
    n: int

    def __post_init__(self):
        pos = tuple(int(p) for p in self.positions)
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise TemplateError(f"slot positions must be strictly increasing, got {pos}")
        if pos and (pos[0] < 0 or pos[-1] >= self.n):
            raise TemplateError(f"slot positions {pos} fall outside a length-{self.n} sequence")
        self.positions = pos

    @property
    def m(self) -> int:
        return len(self.positions)

    def mask(self) -> np.ndarray:
        """Binary [n, 1] broadcast mask with ones at slot rows."""
        out = np.zeros((self.n, 1), dtype=np.float32)
        out[list(self.positions), 0] = 1.0
        return out


@dataclass
class AssembledInput:
    token_ids: np.ndarray  # [n] or [B, n]
    layout: SlotLayout
    H0: Tensor  # [n, d] or [B, n, d]


def assemble_hidden(params: Params, cfg: ModelConfig, token_ids, positions: Sequence[int], slot_embeddings: Tensor | None) -> Tensor:
    """Initial hidden states: projected slot rows at ``positions``, token embeddings elsewhere."""
    H = embed_tokens(params, cfg, token_ids)
    if not positions:
        return H
    return ad.scatter_rows(H, positions, slot_embeddings)


def assemble(
    params: Params,
    cfg: ModelConfig,
    vocab: Vocab,
    template: Template,
    context: CompressedContext,
    question: Sequence[int] = (),
    target: Sequence[int] = (),
) -> AssembledInput:
    """Single-example assembly; ``target`` (teacher-forced tokens) is appended after the prompt."""
    ids, slots = template.layout(vocab, context.m, question)
    ids = np.asarray(ids + [int(t) for t in target], dtype=np.int64)
    layout = SlotLayout(tuple(slots), len(ids))
    H0 = assemble_hidden(params, cfg, ids, layout.positions, project(params, cfg, context.E))
    return AssembledInput(ids, layout, H0)
