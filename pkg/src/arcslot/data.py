"""Seeded synthetic corpora and batch collation.

Reconstruction examples are random content-token segments whose target is the
segments concatenated. QA examples are key/value lookups: each segment holds
one pair, the question names a key and the target is that key's value. Keys,
bridge tokens and values come from disjoint bands of the content vocabulary so
a mean-pooled segment is unambiguous about which token plays which role.
Two-hop examples chain a key to a bridge token in one segment and the bridge
to the value in another.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .config import DataConfig
from .slots import QA_NO_CONTEXT_TEMPLATE, QA_TEMPLATE, RECONSTRUCTION_TEMPLATES, Template
from .vocab import Vocab


@dataclass
class SyntheticExample:
    context_segments: list[list[int]]
    target: list[int]
    question: list[int] = field(default_factory=list)
    kind: str = "reconstruction"
    template: int = 0
    hops: int = 1
    answer_segments: list[int] = field(default_factory=list)

    @property
    def source_token_count(self) -> int:
        return sum(len(s) for s in self.context_segments)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "SyntheticExample":
        return cls(**json.loads(line))


def qa_bands(vocab: Vocab) -> tuple[range, range, range]:
    """Content indices for keys, bridge tokens and values."""
    k = vocab.content_size
    a, b = k // 3, 2 * k // 3
    return range(0, a), range(a, b), range(b, k)


def gen_reconstruction_corpus(cfg: DataConfig, vocab: Vocab, count: int, seed: int) -> list[SyntheticExample]:
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        n_seg = int(rng.integers(cfg.seg_count_min, cfg.seg_count_max + 1))
        segments = []
        for _ in range(n_seg):
            length = int(rng.integers(cfg.seg_len_min, cfg.seg_len_max + 1))
            segments.append([vocab.content_id(int(t)) for t in rng.integers(0, vocab.content_size, size=length)])
        target = [t for seg in segments for t in seg]
        template = int(rng.integers(len(RECONSTRUCTION_TEMPLATES)))
        out.append(SyntheticExample(segments, target, kind="reconstruction", template=template))
    return out


def gen_qa_corpus(cfg: DataConfig, vocab: Vocab, count: int, seed: int) -> list[SyntheticExample]:
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    keys, bridges, values = qa_bands(vocab)
    hop_word = vocab.encode_words("hop")[0]
    n_seg = cfg.qa_segments
    out = []
    for _ in range(count):
        two_hop = rng.random() < cfg.two_hop_fraction
        ks = rng.choice(keys, size=n_seg, replace=False)
        vs = rng.choice(values, size=n_seg, replace=False)
        segments = [[vocab.content_id(int(k)), vocab.content_id(int(v))] for k, v in zip(ks, vs)]
        if two_hop:
            # segment 0: key -> bridge, segment 1: bridge -> value; the rest are distractors
            bridge = int(rng.choice(bridges))
            segments[0][1] = vocab.content_id(bridge)
            segments[1][0] = vocab.content_id(bridge)
            question = [hop_word, vocab.content_id(int(ks[0]))]
            target = [vocab.content_id(int(vs[1]))]
            needed = [0, 1]
        else:
            question = [vocab.content_id(int(ks[0]))]
            target = [vocab.content_id(int(vs[0]))]
            needed = [0]
        order = rng.permutation(n_seg)
        segments = [segments[i] for i in order]
        where = {int(old): new for new, old in enumerate(order)}
        out.append(
            SyntheticExample(
                segments,
                target,
                question=question,
                kind="qa",
                hops=2 if two_hop else 1,
                answer_segments=sorted(where[i] for i in needed),
            )
        )
    return out


def gen_base_corpus(cfg: DataConfig, vocab: Vocab, count: int, seed: int) -> list[SyntheticExample]:
    """Backbone pretraining mix of recitation and QA, both later rendered as plain text.

    QA batches are short and cheap, and key lookup takes a few thousand of
    them to appear; recitation then learns quickly on top of it.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    n_rec = round(count * cfg.base_recitation_fraction)
    rec = gen_reconstruction_corpus(cfg, vocab, n_rec, seed) if n_rec else []
    qa = gen_qa_corpus(cfg, vocab, count - n_rec, seed + 1) if count > n_rec else []
    return rec + qa


CORPUS_SEEDS = {"base": 11, "reconstruction": 21, "qa": 31, "reconstruction-test": 41, "qa-test": 51}
DEFAULT_COUNTS = {"base": 20000, "reconstruction": 20000, "qa": 20000, "reconstruction-test": 256, "qa-test": 256}


def standard_corpus(
    kind: str,
    cfg: DataConfig,
    vocab: Vocab,
    model_seed: int,
    count: int | None = None,
    seed_offset: int = 0,
) -> list[SyntheticExample]:
    """The corpora used by the command line, seeded from the model seed.

    Training and test corpora of the same task use different seeds, so test
    sets are held out.
    """
    gen = {
        "base": gen_base_corpus,
        "reconstruction": gen_reconstruction_corpus,
        "qa": gen_qa_corpus,
        "reconstruction-test": gen_reconstruction_corpus,
        "qa-test": gen_qa_corpus,
    }[kind]
    seed = model_seed * 1000 + CORPUS_SEEDS[kind] + seed_offset
    return gen(cfg, vocab, count or DEFAULT_COUNTS[kind], seed)


def save_corpus(path: str | Path, examples: Sequence[SyntheticExample]) -> None:
    Path(path).write_text("".join(e.to_json() + "\n" for e in examples))


def load_corpus(path: str | Path) -> list[SyntheticExample]:
    return [SyntheticExample.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------- collation


def template_for(ex: SyntheticExample) -> Template:
    return RECONSTRUCTION_TEMPLATES[ex.template] if ex.kind == "reconstruction" else QA_TEMPLATE


@dataclass
class Batch:
    ids: np.ndarray  # [B, n] prompt + target + EOS, right-padded
    targets: np.ndarray  # [B, n] next-token ids
    loss_mask: np.ndarray  # [B, n] 1 where targets[.., p] is a supervised target token
    positions: tuple[int, ...]
    E: np.ndarray | None  # [B, m, d_r] compressed contexts, None for slot-free text batches
    prompt_len: np.ndarray  # [B]
    examples: list[SyntheticExample]


def prompt_ids(ex: SyntheticExample, vocab: Vocab, form: str = "slots") -> tuple[list[int], list[int]]:
    """Prompt ids and slot positions. ``form`` is 'slots', 'text' (raw context) or 'none' (no context)."""
    tpl = template_for(ex)
    if form == "slots":
        return tpl.layout(vocab, len(ex.context_segments), ex.question)
    if form == "text":
        return tpl.with_text(vocab, ex.context_segments, ex.question), []
    if form == "none":
        if ex.kind != "qa":
            raise ValueError("only QA examples have a no-context form")
        ids, _ = QA_NO_CONTEXT_TEMPLATE.layout(vocab, 0, ex.question)
        return ids, []
    raise ValueError(f"unknown prompt form {form!r}")


def collate(
    examples: Sequence[SyntheticExample],
    vocab: Vocab,
    codebook: np.ndarray | None = None,
    form: str = "slots",
    with_target: bool = True,
) -> Batch:
    """Right-pad a batch. Slot batches must share one slot layout."""
    from .slots import encode_context
    from .autodiff import Tensor

    rows, positions, plens = [], None, []
    for ex in examples:
        ids, slots = prompt_ids(ex, vocab, form)
        if positions is None:
            positions = tuple(slots)
        elif tuple(slots) != positions:
            raise ValueError("examples in one batch must share a slot layout")
        plens.append(len(ids))
        rows.append(ids + (list(ex.target) + [vocab.eos] if with_target else []))
    n = max(len(r) for r in rows)
    ids = np.full((len(rows), n), vocab.pad, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
    targets = np.full_like(ids, vocab.pad)
    targets[:, :-1] = ids[:, 1:]
    mask = np.zeros(ids.shape, dtype=np.float32)
    if with_target:
        for i, (r, p) in enumerate(zip(rows, plens)):
            mask[i, p - 1 : len(r) - 1] = 1.0
    E = None
    if form == "slots":
        if codebook is None:
            raise ValueError("slot batches need the encoder codebook")
        cb = Tensor(codebook)
        E = np.stack([encode_context(cb, vocab, ex.context_segments).E for ex in examples])
    return Batch(ids, targets, mask, positions or (), E, np.asarray(plens), list(examples))


def layout_key(ex: SyntheticExample) -> tuple:
    return (ex.kind, ex.template, len(ex.context_segments), len(ex.question))


def iterate_batches(
    examples: Sequence[SyntheticExample],
    batch_size: int,
    rng: np.random.Generator,
) -> Iterator[list[SyntheticExample]]:
    """Endless random batches, each drawn from examples sharing one slot layout."""
    buckets: dict[tuple, list[int]] = defaultdict(list)
    for i, ex in enumerate(examples):
        buckets[layout_key(ex)].append(i)
    keys = sorted(buckets)
    weights = np.array([len(buckets[k]) for k in keys], dtype=np.float64)
    weights /= weights.sum()
    while True:
        key = keys[int(rng.choice(len(keys), p=weights))]
        pool = buckets[key]
        pick = rng.choice(len(pool), size=batch_size, replace=len(pool) < batch_size)
        yield [examples[pool[int(i)]] for i in pick]


def batches_in_order(examples: Sequence[SyntheticExample], batch_size: int) -> Iterator[list[SyntheticExample]]:
    """Deterministic pass over every example, grouped by slot layout."""
    buckets: dict[tuple, list[SyntheticExample]] = defaultdict(list)
    for ex in examples:
        buckets[layout_key(ex)].append(ex)
    for key in sorted(buckets):
        pool = buckets[key]
        for start in range(0, len(pool), batch_size):
            yield pool[start : start + batch_size]
