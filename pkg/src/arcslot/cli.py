"""``arcslot`` command line: data generation, staged training, evaluation and tracing.

Exit codes: 0 success, 1 a run failed (pipeline order, failed check, bad
checkpoint), 2 usage error (unknown verb or flag, missing required flag).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .autodiff import ContractError
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, format_config, load_config, parse_config_text
from .data import CORPUS_SEEDS, load_corpus, save_corpus, standard_corpus
from .model import ArcAligner, PipelineError

log = logging.getLogger("arcslot")



class UsageError(Exception):
    pass


def _threads():
    """Cap BLAS threads to ARCSLOT_THREADS (default 1) for reproducible numerics."""
    raw = os.environ.get("ARCSLOT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ARCSLOT_THREADS must be an integer, got {raw!r}") from None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl is a declared dependency
        return nullcontext()
    return threadpool_limits(limits=max(1, n))


def _version() -> str:
    return f"arcslot-{__version__}"


def _load_run_config(args, model: ArcAligner | None = None) -> RunConfig:
    """Config file (or defaults), then the checkpoint's shape and data settings, then flags."""
    cfg = load_config(args.config) if args.config else RunConfig()
    if model is not None:
        if not args.config and "data" in model.meta:
            cfg = parse_config_text(model.meta["data"])
        cfg.model = model.cfg
    if args.seed is not None:
        cfg.model = cfg.model.replace(seed=args.seed)
    return cfg


def _data_meta(cfg: RunConfig) -> dict:
    """Data and stage settings stored in checkpoints so later verbs reuse them."""
    text = format_config(RunConfig(data=cfg.data, stage_overrides=cfg.stage_overrides))
    return {"data": "\n".join(l for l in text.splitlines() if not _is_model_key(l)) + "\n"}


def _is_model_key(line: str) -> bool:
    from dataclasses import fields

    from .config import ModelConfig

    return line.split("=", 1)[0].strip() in {f.name for f in fields(ModelConfig)}


def _write_manifest(out: Path, args, cfg: RunConfig, extra: dict | None = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": _version(),
        "verb": args.verb,
        "seed": cfg.model.seed,
        "stage": getattr(args, "stage", None),
        "ckpt": str(args.ckpt) if getattr(args, "ckpt", None) else None,
        "examples": getattr(args, "examples", None),
        "config": format_config(cfg),
    }
    manifest.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _require(args, *names: str) -> None:
    missing = [f"--{n}" for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise UsageError(f"{args.verb} requires {', '.join(missing)}")


def _corpus(kind: str, cfg: RunConfig, count: int | None = None, seed_offset: int = 0):
    from .vocab import get_vocab

    return standard_corpus(kind, cfg.data, get_vocab(cfg.model.content_vocab), cfg.model.seed, count, seed_offset)


def _training_data(args, cfg: RunConfig, kind: str, seed_offset: int = 0):
    if getattr(args, "data", None):
        return load_corpus(args.data)
    return _corpus(kind, cfg, seed_offset=seed_offset)


# ---------------------------------------------------------------- verbs


def cmd_gen_data(args) -> int:
    _require(args, "out")
    cfg = _load_run_config(args)
    out = Path(args.out)
    _write_manifest(out, args, cfg)
    kinds = [args.kind] if args.kind else list(CORPUS_SEEDS)
    for kind in kinds:
        examples = _corpus(kind, cfg, args.examples)
        save_corpus(out / f"{kind}.jsonl", examples)
        print(f"wrote {len(examples)} {kind} examples to {out / (kind + '.jsonl')}")
    return 0


def cmd_pretrain_base(args) -> int:
    from .training import run_stage

    _require(args, "out")
    cfg = _load_run_config(args)
    out = Path(args.out)
    _write_manifest(out, args, cfg)
    model = ArcAligner.initialize(cfg.model)
    spec = cfg.stage_spec(0)
    result = run_stage(spec, model, _training_data(args, cfg, "base"), seed=cfg.model.seed, checkpoint=out / "stage0.ckpt", on_log=print, extra_meta=_data_meta(cfg))
    _write_losses(out, result)
    print(f"checkpoint={result.checkpoint}")
    return 0


def cmd_train(args) -> int:
    from .training import run_stage

    _require(args, "out", "stage", "ckpt")
    out = Path(args.out)
    model = ArcAligner.load(args.ckpt)
    cfg = _load_run_config(args, model)
    spec = cfg.stage_spec(args.stage)
    kind = spec.kind
    from .training import check_prerequisite

    check_prerequisite(model, args.stage)
    _write_manifest(out, args, cfg)
    data = _training_data(args, cfg, kind, seed_offset=100 * args.stage if args.stage == 3 else 0)
    result = run_stage(spec, model, data, seed=cfg.model.seed + args.stage, checkpoint=out / f"stage{args.stage}.ckpt", on_log=print, extra_meta=_data_meta(cfg))
    _write_losses(out, result)
    print(f"checkpoint={result.checkpoint}")
    return 0


def _write_losses(out: Path, result) -> None:
    from .plotting import plot_losses

    (out / f"stage{result.stage}_loss.tsv").write_text(
        "step\tloss\n" + "".join(f"{i + 1}\t{v:.6f}\n" for i, v in enumerate(result.losses))
    )
    plot_losses(result.losses, out / f"stage{result.stage}_loss.png", title=f"stage {result.stage}")


def cmd_eval(args) -> int:
    from .evaluation import evaluate_model, write_report

    _require(args, "out", "ckpt")
    model = ArcAligner.load(args.ckpt)
    cfg = _load_run_config(args, model)
    out = Path(args.out)
    _write_manifest(out, args, cfg)
    n = args.examples or 128
    rec = _corpus("reconstruction-test", cfg, n)
    qa = _corpus("qa-test", cfg, n)
    base = ArcAligner.load(args.base) if args.base else None
    report = evaluate_model(model, rec, qa, base=base, seed=cfg.model.seed)
    report.validate()
    for path in write_report(report, out, figures=not args.no_figures):
        print(f"wrote {path}")
    for key, value in report.flat().items():
        print(f"{key}={value}")
    return 0


def cmd_trace_gates(args) -> int:
    from .evaluation import greedy_generate
    from .gate import format_trace

    _require(args, "ckpt")
    model = ArcAligner.load(args.ckpt)
    cfg = _load_run_config(args, model)
    examples = _corpus("qa-test", cfg, args.examples or 4)
    gating = model.stage >= 3 and not args.no_gating
    gens = greedy_generate(model, examples, form="slots", gating_enabled=gating)
    lines = []
    for i, g in enumerate(gens):
        lines.append(f"# example {i} answer={g.text}")
        lines.append(format_trace(g.trace))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        _write_manifest(out, args, cfg)
        (out / "traces.txt").write_text(text)
    return 0


def cmd_reconstruct(args) -> int:
    from .evaluation import greedy_generate

    _require(args, "ckpt")
    model = ArcAligner.load(args.ckpt)
    cfg = _load_run_config(args, model)
    examples = _corpus("reconstruction-test", cfg, args.examples or 3)
    gens = greedy_generate(model, examples, form="slots", gating_enabled=model.stage >= 3)
    vocab = model.vocab
    lines = []
    for i, g in enumerate(gens):
        original = g.example.target
        hits = sum(a == b for a, b in zip(original, g.tokens))
        lines.append(f"# example {i} position_matches={hits}/{len(original)}")
        lines.append(f"original:       {vocab.decode(original)}")
        lines.append(f"reconstruction: {g.text}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        _write_manifest(out, args, cfg)
        (out / "reconstructions.txt").write_text(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .training import end_to_end_gradcheck

    cfg = _load_run_config(args)
    report = end_to_end_gradcheck(seed=cfg.model.seed, coords=args.examples or 64)
    print(f"coordinates={len(report.analytic)} max_rel_error={report.max_rel_error:.3e} tol={report.tol:g}")
    print("gradcheck " + ("passed" if report.passed else "FAILED"))
    if args.out:
        out = Path(args.out)
        _write_manifest(out, args, cfg, {"max_rel_error": report.max_rel_error})
    return 0 if report.passed else 1


VERBS = {
    "gen-data": cmd_gen_data,
    "pretrain-base": cmd_pretrain_base,
    "train": cmd_train,
    "eval": cmd_eval,
    "trace-gates": cmd_trace_gates,
    "reconstruct": cmd_reconstruct,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arcslot", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=_version())
    sub = parser.add_subparsers(dest="verb", metavar="VERB")
    sub.required = True

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--examples", type=int, help="number of examples (or gradient coordinates)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = common(sub.add_parser("gen-data", help="write seeded synthetic corpora as JSONL"))
    p.add_argument("--kind", choices=sorted(CORPUS_SEEDS))
    p = common(sub.add_parser("pretrain-base", help="next-token pretraining of the backbone"))
    p.add_argument("--data", help="JSONL corpus (default: generated)")
    p = common(sub.add_parser("train", help="run training stage 1, 2 or 3"))
    p.add_argument("--stage", type=int, choices=(1, 2, 3))
    p.add_argument("--ckpt", help="input checkpoint (base or previous stage)")
    p.add_argument("--data", help="JSONL corpus (default: generated)")
    p = common(sub.add_parser("eval", help="perplexity, QA metrics, gate statistics, figures"))
    p.add_argument("--ckpt")
    p.add_argument("--base", help="base checkpoint for the recitation baseline (default: --ckpt)")
    p.add_argument("--no-figures", action="store_true")
    p = common(sub.add_parser("trace-gates", help="print per-layer loop trajectories"))
    p.add_argument("--ckpt")
    p.add_argument("--no-gating", action="store_true")
    p = common(sub.add_parser("reconstruct", help="decode contexts back from their slots"))
    p.add_argument("--ckpt")
    common(sub.add_parser("gradcheck", help="finite-difference check of the full model"))
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _threads():
            return VERBS[args.verb](args)
    except (UsageError, ConfigError) as exc:
        print(f"arcslot {args.verb}: usage error: {exc}", file=sys.stderr)
        return 2
    except (PipelineError, ContractError, CheckpointError, ValueError, OSError) as exc:
        print(f"arcslot {args.verb}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
