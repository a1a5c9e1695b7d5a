"""Command-line entry point: ``semrode {train,eval,attack,analyze,dump-features}``.

Every command exits 0 on success, 2 on configuration errors and 1 when a
pipeline stage fails; error messages carry the stage label.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Sequence

from . import __version__
from .attack import SubstitutionSource, attack, build_substitution_source
from .config import ConfigError, RunConfig, SourceCache, dump_run_config, load_eval_set, load_run_config
from .evaluation import (
    RobustnessReport, clean_accuracy, dump_features, evaluate_robustness, format_table,
    substitution_overlap_report, write_reports,
)
from .textmodel import EmbeddingTable, Example, PooledClassifier, load_dataset
from .training import AdversarialSet, fit, write_curve

log = logging.getLogger("semrode")


class StageError(RuntimeError):
    def __init__(self, stage: str, err: BaseException):
        super().__init__(f"[{stage}] {type(err).__name__}: {err}")
        self.stage = stage


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, (StageError, ConfigError, KeyboardInterrupt)):
            raise StageError(self.name, exc) from exc
        return False


def _load_run(args) -> RunConfig:
    return load_run_config(args.config, args.set or ())


def _load_model(checkpoint: str, run: RunConfig) -> tuple[PooledClassifier, EmbeddingTable]:
    with _Stage("load"):
        emb = EmbeddingTable.load(run.data.embeddings)
        return PooledClassifier.load(checkpoint, emb), emb


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    run = _load_run(args)
    out = Path(run.output)
    with _Stage("load"):
        out.mkdir(parents=True, exist_ok=True)
        emb = EmbeddingTable.load(run.data.embeddings)
        train_data = load_dataset(run.data.train)
        probe = load_eval_set(run)
        cache = SourceCache(emb, run.data.embeddings)
        gen = cache.attack_config(run.generation) if run.generation else None
    with _Stage("train"):
        result = fit(emb, train_data, run.training, gen, probe=probe, workers=args.workers)
    with _Stage("write"):
        result.model.save(out / "checkpoint.json")
        write_curve(result.curve, out / "curve.csv")
        dump_run_config(run, out / "resolved_config.yaml")
        if run.training.needs_adversarial:
            result.adv_set.save(out / "adv_set.tsv", sidecar={"seed_data": run.training.seed_data,
                                                                "ratio": run.training.adv_ratio})
    last = result.curve[-1] if result.curve else None
    print(f"trained {run.training.objective} model: {len(result.adv_set)}/{result.adv_set.attempted} "
          f"adversarial pairs kept, {len(result.curve)} epochs")
    if last is not None:
        print(f"final epoch: ce={last.ce:.4f} wasserstein={last.wasserstein:.4f} clean_acc={last.clean_acc:.4f}")
    print(f"outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    run = _load_run(args)
    model, emb = _load_model(args.checkpoint, run)
    out = Path(args.out or run.output)
    with _Stage("load"):
        out.mkdir(parents=True, exist_ok=True)
        eval_set = load_eval_set(run)
        cache = SourceCache(emb, run.data.embeddings)
    with _Stage("eval"):
        ca = clean_accuracy(model, eval_set)
        reports: list[RobustnessReport] = []
        for spec in run.evaluation:
            reports.append(evaluate_robustness(model, eval_set, cache.attack_config(spec), args.workers, spec.label))
    with _Stage("write"):
        write_reports(reports, out / "report.json", clean_accuracy=ca)
        table = format_table(reports, title=f"{args.checkpoint}: clean accuracy {ca:.2f}%") if reports \
            else f"{args.checkpoint}: clean accuracy {ca:.2f}% (no evaluation attacks configured)"
        (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def cmd_attack(args) -> int:
    run = _load_run(args)
    model, emb = _load_model(args.checkpoint, run)
    with _Stage("attack"):
        specs = list(run.evaluation) or ([run.generation] if run.generation else [])
        if not specs:
            raise ConfigError("no attack configured (need 'evaluation' or 'generation')")
        if not 0 <= args.attack < len(specs):
            raise ConfigError(f"--attack {args.attack}: only {len(specs)} attack(s) configured")
        cfg = SourceCache(emb, run.data.embeddings).attack_config(specs[args.attack])
        example = Example.from_raw(args.text, args.label)
        outcome = attack(model, example, cfg)
    print(f"attack: {cfg.source.name} ({cfg.search}, N={cfg.n_candidates}, eps={cfg.epsilon})")
    print(f"original : {' '.join(example.text)}")
    for pos, old, new, p in outcome.trace:
        print(f"  [{pos}] {old} -> {new}   P(label)={p:.4f}")
    print(f"perturbed: {' '.join(outcome.perturbed)}")
    print(f"status={outcome.status} queries={outcome.queries} changed={outcome.perturbed_word_count} "
          f"similarity={outcome.similarity:.4f}")
    return 0


def _read_source(path: str, n: int, min_cos: float) -> tuple[SubstitutionSource, set[str]]:
    p = Path(path)
    with p.open(encoding="utf-8") as fh:
        first = next((ln for ln in fh if ln.strip() and not ln.startswith("#")), "")
    head = first.split()
    if head and ":" in head[0]:
        src = SubstitutionSource.load(p)
        vocab = set(src.table)
        for cands in src.table.values():
            vocab.update(cands)
        return src, vocab
    table = EmbeddingTable.load(p)
    src = build_substitution_source(table, n, min_cos, p.stem)
    return src, set(table.vocab.itos[1:])


def cmd_analyze(args) -> int:
    if len(args.sources) < 2:
        raise ConfigError("analyze needs at least two sources")
    with _Stage("load"):
        loaded = [_read_source(p, args.n, args.min_cos) for p in args.sources]
    names = [Path(p).stem for p in args.sources]
    with _Stage("analyze"):
        grid = [[substitution_overlap_report(a, b, va, vb) for b, vb in loaded] for a, va in loaded]
    width = max(14, *(len(n) + 2 for n in names))
    lines = ["substitution overlap: mean Jaccard over shared tokens (max)",
             " " * width + "".join(f"{n:>{width}}" for n in names)]
    for name, row in zip(names, grid):
        lines.append(f"{name:<{width}}" + "".join(f"{r.cell():>{width}}" for r in row))
    lines += ["", "vocabulary overlap: shared tokens (coverage of row, coverage of column)",
              " " * width + "".join(f"{n:>{width}}" for n in names)]
    for name, row in zip(names, grid):
        cells = [f"{r.vocab_shared} ({r.coverage_1:.0f}%,{r.coverage_2:.0f}%)" for r in row]
        lines.append(f"{name:<{width}}" + "".join(f"{c:>{width}}" for c in cells))
    print("\n".join(lines))
    if args.json:
        records = [
            {"row": names[i], "col": names[j], "shared_tokens": r.shared_tokens, "mean_jaccard": r.mean_jaccard,
             "max_jaccard": r.max_jaccard, "vocab_1": r.vocab_1, "vocab_2": r.vocab_2, "vocab_shared": r.vocab_shared}
            for i, row in enumerate(grid) for j, r in enumerate(row)
        ]
        Path(args.json).write_text(json.dumps(records, indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_dump_features(args) -> int:
    run = _load_run(args)
    model, _ = _load_model(args.checkpoint, run)
    with _Stage("load"):
        examples = load_dataset(run.data.train) if args.split == "train" else load_eval_set(run)
        flags = [False] * len(examples)
        if args.adv_set:
            for base, adv in AdversarialSet.load(args.adv_set).pairs:
                examples += [base, adv]
                flags += [False, True]
    with _Stage("dump"):
        dump_features(model, examples, args.out, flags)
    print(f"wrote {len(examples)} feature rows to {args.out}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="semrode", description="Semantic-distribution robustness training on toy text.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p, checkpoint=False):
        if checkpoint:
            p.add_argument("checkpoint", help="checkpoint.json written by 'train'")
        p.add_argument("config", help="run config (YAML)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key, e.g. training.lam=0.5 (repeatable)")
        p.add_argument("--workers", type=int, default=1, help="parallel attack workers (results are identical)")
        return p

    with_config(sub.add_parser("train", help="generate the adversarial set and train")).set_defaults(func=cmd_train)
    p = with_config(sub.add_parser("eval", help="robustness reports for a checkpoint"), checkpoint=True)
    p.add_argument("--out", help="report directory (default: the config's output)")
    p.set_defaults(func=cmd_eval)
    p = with_config(sub.add_parser("attack", help="attack one sentence and print the trace"), checkpoint=True)
    p.add_argument("--text", required=True)
    p.add_argument("--label", type=int, required=True)
    p.add_argument("--attack", type=int, default=0, help="index into the evaluation attacks")
    p.set_defaults(func=cmd_attack)
    p = sub.add_parser("analyze", help="pairwise substitution overlap between sources")
    p.add_argument("sources", nargs="+", help="embedding files or 'token: c1,c2' synonym files")
    p.add_argument("--n", type=int, default=50, help="neighbours per token for embedding sources")
    p.add_argument("--min-cos", type=float, default=0.5)
    p.add_argument("--json", help="also write the matrix as JSON")
    p.set_defaults(func=cmd_analyze)
    p = with_config(sub.add_parser("dump-features", help="export pooled features as CSV"), checkpoint=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("eval", "train"), default="eval")
    p.add_argument("--adv-set", help="append base/adversarial rows from an adv_set.tsv")
    p.set_defaults(func=cmd_dump_features)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except StageError as err:
        print(f"error {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
