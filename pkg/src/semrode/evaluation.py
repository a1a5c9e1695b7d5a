"""Robustness metrics, substitution-overlap analysis and feature export."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attack import AttackConfig, AttackOutcome, SubstitutionSource
from .textmodel import Example, PooledClassifier
from .training import run_attacks

REPORT_FIELDS = (
    "tas", "n_success", "n_fail", "n_skip", "clean_accuracy", "aua", "asr",
    "mean_queries", "mean_perturb_ratio", "mean_similarity",
)


class AllSkippedWarning(UserWarning):
    pass


@dataclass
class RobustnessReport:
    """Counts and percentages over the Total Attacked Samples (``tas``).

    Percentages are stored unrounded on a 0-100 scale; perturbation ratio and
    similarity are averaged over successful attacks only.
    """

    tas: int
    n_success: int
    n_fail: int
    n_skip: int
    clean_accuracy: float
    aua: float
    asr: float
    mean_queries: float
    mean_perturb_ratio: float
    mean_similarity: float
    name: str = ""

    @classmethod
    def from_counts(cls, n_success: int, n_fail: int, n_skip: int, mean_queries: float = float("nan"),
                    mean_perturb_ratio: float = float("nan"), mean_similarity: float = float("nan"),
                    name: str = "") -> "RobustnessReport":
        tas = n_success + n_fail + n_skip
        if tas == 0:
            raise ValueError("no attacked samples")
        attacked = tas - n_skip
        if attacked == 0:
            warnings.warn("every sample was skipped; ASR reported as 0", AllSkippedWarning)
        return cls(
            tas=tas,
            n_success=n_success,
            n_fail=n_fail,
            n_skip=n_skip,
            clean_accuracy=100.0 * attacked / tas,
            aua=100.0 * n_fail / tas,
            asr=100.0 * n_success / attacked if attacked else 0.0,
            mean_queries=mean_queries,
            mean_perturb_ratio=mean_perturb_ratio,
            mean_similarity=mean_similarity,
            name=name,
        )

    @classmethod
    def from_outcomes(cls, outcomes: Sequence[AttackOutcome], name: str = "") -> "RobustnessReport":
        status = [o.status for o in outcomes]
        wins = [o for o in outcomes if o.status == "success"]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return cls.from_counts(
                status.count("success"),
                status.count("fail"),
                status.count("skip"),
                mean_queries=float(np.mean([o.queries for o in outcomes])),
                mean_perturb_ratio=float(np.mean([o.perturb_ratio for o in wins])) if wins else float("nan"),
                mean_similarity=float(np.mean([o.similarity for o in wins])) if wins else float("nan"),
                name=name,
            )

    def record(self) -> dict:
        rec = {k: getattr(self, k) for k in REPORT_FIELDS}
        return {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in rec.items()}


def evaluate_robustness(model: PooledClassifier, eval_set: Sequence[Example], cfg: AttackConfig,
                        workers: int = 1, name: str = "") -> RobustnessReport:
    if not eval_set:
        raise ValueError("empty evaluation set")
    return RobustnessReport.from_outcomes(run_attacks(model, eval_set, cfg, workers), name or cfg.source.name)


def clean_accuracy(model: PooledClassifier, eval_set: Sequence[Example]) -> float:
    probs = model.predict_proba([ex.text for ex in eval_set])
    return 100.0 * float(np.mean(np.argmax(probs, axis=1) == [ex.label for ex in eval_set]))


def format_table(reports: Sequence[RobustnessReport], title: str = "") -> str:
    head = f"{'attack':<18}{'TAS':>6}{'CA':>8}{'AUA':>8}{'ASR':>8}{'succ':>6}{'fail':>6}{'skip':>6}{'queries':>9}{'pert%':>8}{'sim':>7}"
    lines = [title] if title else []
    lines += [head, "-" * len(head)]
    for r in reports:
        pert = 100.0 * r.mean_perturb_ratio
        lines.append(
            f"{r.name[:17]:<18}{r.tas:>6}{r.clean_accuracy:>8.2f}{r.aua:>8.2f}{r.asr:>8.2f}"
            f"{r.n_success:>6}{r.n_fail:>6}{r.n_skip:>6}{r.mean_queries:>9.1f}{pert:>8.2f}{r.mean_similarity:>7.3f}"
        )
    return "\n".join(lines)


def write_reports(reports: Sequence[RobustnessReport], path: str | Path, clean_accuracy: float | None = None) -> None:
    """JSON object with the unattacked clean accuracy and one record per attack."""
    doc = {"clean_accuracy": clean_accuracy, "reports": [dict(attack=r.name, **r.record()) for r in reports]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- overlap analysis

def jaccard_overlap(a: Iterable[str], b: Iterable[str]) -> float:
    """|a & b| / |a | b|; two empty sets count as identical (1.0)."""
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


@dataclass
class OverlapReport:
    shared_tokens: int
    mean_jaccard: float | None
    max_jaccard: float | None
    vocab_1: int
    vocab_2: int
    vocab_shared: int

    @property
    def coverage_1(self) -> float:
        return 100.0 * self.vocab_shared / self.vocab_1 if self.vocab_1 else 0.0

    @property
    def coverage_2(self) -> float:
        return 100.0 * self.vocab_shared / self.vocab_2 if self.vocab_2 else 0.0

    def cell(self) -> str:
        if self.mean_jaccard is None:
            return "n/a"
        return f"{100 * self.mean_jaccard:.1f}% ({100 * self.max_jaccard:.0f}%)"


def substitution_overlap_report(s1: SubstitutionSource, s2: SubstitutionSource,
                                vocab_1: Iterable[str] | None = None,
                                vocab_2: Iterable[str] | None = None) -> OverlapReport:
    """Per-token candidate Jaccard over tokens both sources cover, plus vocabulary overlap.

    Vocabularies default to the sources' key sets.
    """
    v1 = set(vocab_1) if vocab_1 is not None else set(s1.table)
    v2 = set(vocab_2) if vocab_2 is not None else set(s2.table)
    shared = sorted(set(s1.table) & set(s2.table))
    scores = [jaccard_overlap(s1.table[t], s2.table[t]) for t in shared]
    return OverlapReport(
        shared_tokens=len(shared),
        mean_jaccard=float(np.mean(scores)) if scores else None,
        max_jaccard=float(max(scores)) if scores else None,
        vocab_1=len(v1),
        vocab_2=len(v2),
        vocab_shared=len(v1 & v2),
    )


# ---------------------------------------------------------------- feature export

def dump_features(model: PooledClassifier, examples: Sequence[Example], path: str | Path,
                  is_adversarial: Sequence[bool] | None = None) -> np.ndarray:
    """Write ``label,is_adversarial,f1..fh`` rows in input order; returns the matrix."""
    if not examples:
        raise ValueError("no examples to dump")
    flags = list(is_adversarial) if is_adversarial is not None else [False] * len(examples)
    feats = model.feature_values([ex.text for ex in examples])
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label", "is_adversarial"] + [f"f{i + 1}" for i in range(feats.shape[1])])
            for ex, adv, row in zip(examples, flags, feats):
                writer.writerow([ex.label, int(adv)] + [repr(float(v)) for v in row])
    except OSError as err:
        raise OSError(f"cannot write features to {path}: {err}") from err
    return feats
