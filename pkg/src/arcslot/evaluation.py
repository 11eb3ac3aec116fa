"""Reconstruction perplexity, QA metrics, gate statistics and 4-way bucketing."""

from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autodiff import ContractError
from .data import SyntheticExample, batches_in_order, collate
from .gate import GateTrace
from .model import ArcAligner
from .slots import init_projector
from .training import forward_batch, nll_loss

# ---------------------------------------------------------------- text metrics

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    text = text.lower().translate(_PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def non_strict_em(prediction: str, gold: str) -> int:
    """1 when the normalised gold answer occurs in the prediction on word boundaries."""
    pred, ref = normalize_answer(prediction), normalize_answer(gold)
    if not ref:
        return int(not pred)
    return int(f" {ref} " in f" {pred} ")


def token_f1(prediction: str, gold: str) -> float:
    pred, ref = normalize_answer(prediction).split(), normalize_answer(gold).split()
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    common = sum((Counter(pred) & Counter(ref)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred)
    recall = common / len(ref)
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------- perplexity


def mean_nll(
    model: ArcAligner,
    examples: Sequence[SyntheticExample],
    form: str = "slots",
    gating_enabled: bool = True,
    batch_size: int = 32,
) -> float:
    """Token-weighted mean NLL over every target token (EOS included) in ``examples``."""
    if not examples:
        raise ContractError("perplexity needs at least one example")
    codebook = model.params["encoder.codebook"].data
    total, count = 0.0, 0.0
    for chunk in batches_in_order(examples, batch_size):
        batch = collate(chunk, model.vocab, codebook, form=form)
        logits, _ = forward_batch(model, batch, "infer", gating_enabled)
        tokens = float(batch.loss_mask.sum())
        total += nll_loss(logits, batch.targets, batch.loss_mask).item() * tokens
        count += tokens
    return total / count


def perplexity(
    model: ArcAligner,
    examples: Sequence[SyntheticExample],
    form: str = "slots",
    gating_enabled: bool = True,
    batch_size: int = 32,
) -> float:
    """exp(mean per-token NLL). ``form='text'`` feeds the raw context instead of slots."""
    for ex in examples:
        if ex.kind != "reconstruction":
            raise ContractError("perplexity is defined on reconstruction examples")
    return math.exp(mean_nll(model, examples, form, gating_enabled, batch_size))


def random_projector_baseline(model: ArcAligner, seed: int = 0) -> ArcAligner:
    """Copy of ``model`` with an untrained random projector and zeroed LoRA up-maps."""
    out = model.clone()
    out.params.update(init_projector(model.cfg, np.random.default_rng(seed), zero_final=False))
    for name, t in out.params.items():
        if name.startswith("lora.") and name.endswith(".B"):
            t.data[...] = 0.0
    return out


# ---------------------------------------------------------------- generation


@dataclass
class Generation:
    example: SyntheticExample
    tokens: list[int]
    text: str
    trace: GateTrace | None = None


def greedy_generate(
    model: ArcAligner,
    examples: Sequence[SyntheticExample],
    form: str = "slots",
    max_new_tokens: int | None = None,
    gating_enabled: bool = True,
    batch_size: int = 32,
) -> list[Generation]:
    """Greedy decoding until EOS; the gate trace of the prompt pass is kept per example."""
    vocab = model.vocab
    codebook = model.params["encoder.codebook"].data
    results: dict[int, Generation] = {}
    for chunk in batches_in_order(examples, batch_size):
        batch = collate(chunk, vocab, codebook, form=form, with_target=False)
        limit = max_new_tokens or max(len(ex.target) for ex in chunk) + 1
        seqs = [list(row[:p]) for row, p in zip(batch.ids, batch.prompt_len)]
        done = [False] * len(chunk)
        outs: list[list[int]] = [[] for _ in chunk]
        first_trace = None
        for _ in range(limit):
            n = max(len(s) for s in seqs)
            if n > model.cfg.max_seq_len:
                break
            ids = np.full((len(seqs), n), vocab.pad, dtype=np.int64)
            for i, s in enumerate(seqs):
                ids[i, : len(s)] = s
            step = type(batch)(ids, ids, np.zeros(ids.shape, np.float32), batch.positions, batch.E, batch.prompt_len, chunk)
            logits, trace = forward_batch(model, step, "infer", gating_enabled)
            if first_trace is None:
                first_trace = trace
            for i, s in enumerate(seqs):
                if done[i]:
                    continue
                row = logits.data[i, len(s) - 1].copy()
                row[vocab.slot] = -np.inf  # the placeholder is never generated
                row[vocab.pad] = -np.inf
                tok = int(row.argmax())
                if tok == vocab.eos:
                    done[i] = True
                else:
                    s.append(tok)
                    outs[i].append(tok)
            if all(done):
                break
        for i, ex in enumerate(chunk):
            results[id(ex)] = Generation(ex, outs[i], vocab.decode(outs[i]), first_trace.example(i) if batch.positions else None)
    return [results[id(ex)] for ex in examples]


# ---------------------------------------------------------------- gate statistics


def gate_stats(traces: Sequence[GateTrace]) -> dict[int, float]:
    """Mean total passes per slot at each gated layer (mandatory pass included)."""
    if not traces:
        return {}
    loops = {t.max_loops for t in traces}
    if len(loops) != 1:
        raise ContractError(f"traces mix max_loops values {sorted(loops)}")
    layers = sorted(traces[0].counts)
    out = {}
    for layer in layers:
        counts = np.concatenate([np.asarray(t.counts[layer]).reshape(-1) for t in traces])
        out[layer] = float(counts.mean()) if counts.size else 1.0
    return out


# ---------------------------------------------------------------- 4-way buckets

BUCKETS = ("TT", "TF", "FT", "FF")


@dataclass
class BucketResult:
    name: str
    n: int
    accuracy: float

    @property
    def label(self) -> str:
        return f"{self.name} (n={self.n})"


def four_way_buckets(
    naive: Mapping[str, bool],
    rag: Mapping[str, bool],
    system: Mapping[str, bool],
) -> dict[str, BucketResult]:
    """Bucket by (naive correct, RAG correct); report the system's accuracy per bucket."""
    if set(naive) != set(rag) or set(rag) != set(system):
        raise ContractError("result sets cover different example ids")
    groups: dict[str, list[bool]] = {b: [] for b in BUCKETS}
    for key in naive:
        name = ("T" if naive[key] else "F") + ("T" if rag[key] else "F")
        groups[name].append(bool(system[key]))
    return {
        b: BucketResult(b, len(v), float(np.mean(v)) if v else 0.0)
        for b, v in groups.items()
    }


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    ppl: float
    em: float
    f1: float
    accuracy: float
    loop_means: dict[int, float]
    compression_ratio: float
    n_examples: int
    baselines: dict[str, float] = field(default_factory=dict)
    buckets: dict[str, BucketResult] = field(default_factory=dict)

    def validate(self) -> None:
        for name in ("em", "f1", "accuracy"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ContractError(f"{name}={value} outside [0, 1]")
        if self.ppl < 1.0:
            raise ContractError(f"ppl={self.ppl} below 1")

    def flat(self) -> dict[str, str]:
        out = {
            "ppl": f"{self.ppl:.6f}",
            "em": f"{self.em:.6f}",
            "f1": f"{self.f1:.6f}",
            "accuracy": f"{self.accuracy:.6f}",
            "compression_ratio": f"{self.compression_ratio:.6f}",
            "n_examples": str(self.n_examples),
        }
        for layer, value in sorted(self.loop_means.items()):
            out[f"loops.layer{layer}"] = f"{value:.6f}"
        for name, value in sorted(self.baselines.items()):
            out[f"baseline.{name}"] = f"{value:.6f}"
        for name, b in self.buckets.items():
            out[f"bucket.{name}.n"] = str(b.n)
            out[f"bucket.{name}.accuracy"] = f"{b.accuracy:.6f}"
        return out


def write_report(report: EvalReport, out_dir: str | Path, figures: bool = True) -> list[Path]:
    """report.txt (key=value), summary.txt (table), loops.tsv / ppl.tsv / buckets.tsv, PNG figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    flat = report.flat()
    (out / "report.txt").write_text("".join(f"{k}={v}\n" for k, v in flat.items()))
    width = max(len(k) for k in flat)
    (out / "summary.txt").write_text("".join(f"{k:<{width}}  {v}\n" for k, v in flat.items()))
    loops = "layer\tmean_loops\n" + "".join(f"{k}\t{v:.6f}\n" for k, v in sorted(report.loop_means.items()))
    (out / "loops.tsv").write_text(loops)
    ppl_rows = {"arcaligner": report.ppl, **report.baselines}
    (out / "ppl.tsv").write_text("model\tppl\n" + "".join(f"{k}\t{v:.6f}\n" for k, v in ppl_rows.items()))
    (out / "buckets.tsv").write_text(
        "bucket\tn\taccuracy\n" + "".join(f"{b.name}\t{b.n}\t{b.accuracy:.6f}\n" for b in report.buckets.values())
    )
    written += [out / n for n in ("report.txt", "summary.txt", "loops.tsv", "ppl.tsv", "buckets.tsv")]
    if figures:
        from .plotting import plot_buckets, plot_loop_means, plot_ppl

        written.append(plot_loop_means(report.loop_means, out / "loops.png"))
        written.append(plot_ppl(ppl_rows, out / "ppl.png"))
        if report.buckets:
            written.append(plot_buckets(report.buckets, out / "buckets.png"))
    return written


def read_report(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            out[k] = v
    return out


# ---------------------------------------------------------------- full evaluation


def qa_results(
    model: ArcAligner,
    examples: Sequence[SyntheticExample],
    form: str = "slots",
    gating_enabled: bool = True,
) -> tuple[list[Generation], dict[str, bool]]:
    """Greedy answers plus per-example exact-answer correctness keyed by example index."""
    gens = greedy_generate(model, examples, form=form, gating_enabled=gating_enabled)
    correct = {str(i): g.tokens == list(g.example.target) for i, g in enumerate(gens)}
    return gens, correct


def qa_accuracy(model: ArcAligner, examples: Sequence[SyntheticExample], form: str = "slots", gating_enabled: bool = True) -> float:
    _, correct = qa_results(model, examples, form, gating_enabled)
    return float(np.mean(list(correct.values())))


def compression_ratio(examples: Sequence[SyntheticExample]) -> float:
    """Mean over examples of source tokens per slot."""
    return float(np.mean([ex.source_token_count / len(ex.context_segments) for ex in examples]))


def evaluate_model(
    model: ArcAligner,
    reconstruction: Sequence[SyntheticExample],
    qa: Sequence[SyntheticExample],
    base: ArcAligner | None = None,
    seed: int = 0,
) -> EvalReport:
    """Everything the ``eval`` verb reports.

    ``base`` supplies the frozen backbone for the recitation and random
    projector baselines; by default ``model`` itself (its backbone is frozen
    in every later stage, so the two coincide).
    """
    gating = model.stage >= 3
    reference = base or model
    ppl = perplexity(model, reconstruction, "slots", gating)
    baselines = {
        "base_recitation": perplexity(reference, reconstruction, "text"),
        "random_projector": perplexity(random_projector_baseline(reference, seed), reconstruction, "slots", False),
    }
    gens, system = qa_results(model, qa, "slots", gating)
    _, naive = qa_results(reference, qa, "none", False)
    _, rag = qa_results(reference, qa, "text", False)
    vocab = model.vocab
    em = [non_strict_em(g.text, vocab.decode(g.example.target)) for g in gens]
    f1 = [token_f1(g.text, vocab.decode(g.example.target)) for g in gens]
    loop_means = gate_stats([g.trace for g in gens if g.trace is not None])
    return EvalReport(
        ppl=ppl,
        em=float(np.mean(em)),
        f1=float(np.mean(f1)),
        accuracy=float(np.mean(list(system.values()))),
        loop_means=loop_means,
        compression_ratio=compression_ratio(reconstruction),
        n_examples=len(qa),
        baselines=baselines,
        buckets=four_way_buckets(naive, rag, system),
    )
