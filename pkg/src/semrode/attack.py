"""Black-box word-substitution attacks.

Candidates come from a :class:`SubstitutionSource` (embedding neighbours or a
synonym file). A substitution is admissible when the whole perturbed sentence
keeps angular similarity >= 1 - epsilon/pi with the original and the number of
changed words stays within ``max_perturb_ratio`` of the sentence length.
Constraint checks are local and cost no queries; every model prediction does.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Protocol, Sequence

import numpy as np

from .textmodel import UNK, EmbeddingTable, Example, Vocabulary


class Classifier(Protocol):
    embeddings: EmbeddingTable

    def predict_proba(self, batch: Sequence[Sequence[str]]) -> np.ndarray: ...


@dataclass(frozen=True)
class SubstitutionSource:
    name: str
    table: dict[str, tuple[str, ...]]

    def candidates(self, token: str) -> tuple[str, ...]:
        return self.table.get(token, ())

    def restrict(self, vocab: Vocabulary, name: str | None = None) -> "SubstitutionSource":
        """Drop candidates (and keys) outside ``vocab``; never keeps the unk token."""
        table = {}
        for tok, cands in self.table.items():
            if tok not in vocab:
                continue
            table[tok] = tuple(c for c in cands if c in vocab and c != UNK and c != tok)
        return SubstitutionSource(name or self.name, table)

    @classmethod
    def load(cls, path: str | Path, vocab: Vocabulary | None = None, name: str | None = None) -> "SubstitutionSource":
        """Read ``token: cand1,cand2,...`` lines, validated against ``vocab`` when given."""
        path = Path(path)
        table: dict[str, tuple[str, ...]] = {}
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if ":" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'token: cand1,cand2,...'")
                tok, rest = line.split(":", 1)
                tok = tok.strip().lower()
                cands = [c.strip().lower() for c in rest.split(",") if c.strip()]
                if vocab is not None:
                    bad = [c for c in [tok, *cands] if c not in vocab]
                    if bad:
                        raise ValueError(f"{path}:{lineno}: tokens not in vocabulary: {', '.join(bad)}")
                seen = []
                for c in cands:
                    if c != tok and c not in seen:
                        seen.append(c)
                table[tok] = tuple(seen)
        return cls(name or path.stem, table)

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for tok, cands in self.table.items():
                fh.write(f"{tok}: {','.join(cands)}\n")


def build_substitution_source(
    table: EmbeddingTable, n: int, min_cos: float = 0.5, name: str = "embedding"
) -> SubstitutionSource:
    """Top-``n`` cosine neighbours per token with cosine >= ``min_cos``.

    Ordered by similarity (descending) then vocabulary index. The unk token and
    zero vectors never appear as candidates.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    vecs = table.vectors
    norms = np.linalg.norm(vecs, axis=1)
    valid = norms > 0
    valid[table.vocab.unk_index] = False
    unit = np.where(valid[:, None], vecs / np.where(norms > 0, norms, 1.0)[:, None], 0.0)
    idx = np.arange(len(vecs))
    out: dict[str, tuple[str, ...]] = {}
    chunk = 1024
    for start in range(0, len(vecs), chunk):
        rows = idx[start:start + chunk]
        sims = unit[rows] @ unit.T
        for r, srow in zip(rows, sims):
            if not valid[r]:
                continue
            ok = valid & (srow >= min_cos)
            ok[r] = False
            cand = idx[ok]
            order = np.lexsort((cand, -srow[cand]))[:n]
            out[table.vocab.itos[r]] = tuple(table.vocab.itos[c] for c in cand[order])
    return SubstitutionSource(name, out)


# ---------------------------------------------------------------- similarity

def similarity_threshold(epsilon: float) -> float:
    return 1.0 - epsilon / math.pi


def _angular(u: np.ndarray, v: np.ndarray) -> tuple[float, bool]:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0, True
    cos = float(np.clip(u @ v / (nu * nv), -1.0, 1.0))
    return 1.0 - math.acos(cos) / math.pi, False


def angular_similarity(a: Sequence[str], b: Sequence[str], table: EmbeddingTable, return_flag: bool = False):
    """1 - arccos(cos(mean(a), mean(b)))/pi. Zero-norm means give 0 (flagged as degenerate)."""
    if tuple(a) == tuple(b):
        return (1.0, False) if return_flag else 1.0
    sim, degenerate = _angular(table.mean_vector(a), table.mean_vector(b))
    return (sim, degenerate) if return_flag else sim


# ---------------------------------------------------------------- search

Search = Literal["greedy_wir", "greedy", "beam"]


@dataclass(frozen=True)
class AttackConfig:
    source: SubstitutionSource
    n_candidates: int = 50
    epsilon: float = 0.5
    max_perturb_ratio: float = 0.30
    query_budget_factor: int | None = None  # budget L * factor; None means factor = n_candidates
    search: Search = "greedy_wir"
    beam_width: int = 3

    def __post_init__(self):
        if not 0 < self.epsilon < math.pi:
            raise ValueError(f"epsilon must lie in (0, pi), got {self.epsilon}")
        if not 0 < self.max_perturb_ratio <= 1:
            raise ValueError(f"max_perturb_ratio must lie in (0, 1], got {self.max_perturb_ratio}")
        if self.n_candidates < 1:
            raise ValueError(f"n_candidates must be >= 1, got {self.n_candidates}")
        if self.search not in ("greedy_wir", "greedy", "beam"):
            raise ValueError(f"unknown search {self.search!r}")
        if self.beam_width < 1:
            raise ValueError(f"beam_width must be >= 1, got {self.beam_width}")

    @property
    def threshold(self) -> float:
        return similarity_threshold(self.epsilon)

    def query_budget(self, length: int) -> int:
        """Queries allowed for the search itself; WIR probes get ``length`` more."""
        return length * (self.query_budget_factor or self.n_candidates)


@dataclass
class AttackOutcome:
    status: Literal["success", "fail", "skip"]
    original: Example
    perturbed: tuple[str, ...]
    queries: int
    perturbed_word_count: int
    similarity: float
    trace: list[tuple[int, str, str, float]] = field(default_factory=list)

    @property
    def perturb_ratio(self) -> float:
        return self.perturbed_word_count / len(self.original.text)


def word_importance_ranking(
    model: Classifier, tokens: Sequence[str], label: int, base_prob: float | None = None
) -> tuple[list[int], int]:
    """Positions by descending drop in P(label) when the word is deleted.

    Returns ``(order, queries)``. Ties go to the lower position. A single-word
    sentence cannot be probed and returns ``[0]`` with no queries.
    """
    tokens = list(tokens)
    n = len(tokens)
    if n == 1:
        return [0], 0
    queries = 0
    if base_prob is None:
        base_prob = float(model.predict_proba([tokens])[0, label])
        queries += 1
    probes = [tokens[:i] + tokens[i + 1:] for i in range(n)]
    p = model.predict_proba(probes)[:, label]
    queries += n
    importance = base_prob - p
    order = sorted(range(n), key=lambda i: (-importance[i], i))
    return order, queries


class _Run:
    """Mutable bookkeeping for one attack."""

    def __init__(self, model: Classifier, example: Example, cfg: AttackConfig):
        self.model = model
        self.example = example
        self.cfg = cfg
        self.tokens = list(example.text)
        self.L = len(self.tokens)
        self.queries = 0
        self.cap = cfg.query_budget(self.L)
        self.max_changes = math.floor(cfg.max_perturb_ratio * self.L + 1e-9)
        emb = model.embeddings
        self.emb = emb
        self.orig_ids = emb.ids(self.tokens)
        self.orig_mean = emb.vectors[self.orig_ids].mean(axis=0)

    def query(self, batch: list[list[str]]) -> np.ndarray:
        self.queries += len(batch)
        return self.model.predict_proba(batch)

    def remaining(self) -> int:
        return self.cap - self.queries

    def candidates(self, pos: int) -> list[str]:
        vocab = self.emb.vocab
        orig = self.tokens[pos]
        return [c for c in self.cfg.source.candidates(orig)[: self.cfg.n_candidates]
                if c in vocab and c != UNK and c != orig]

    def similarity(self, ids: np.ndarray) -> float:
        if np.array_equal(ids, self.orig_ids):
            return 1.0
        return _angular(self.orig_mean, self.emb.vectors[ids].mean(axis=0))[0]

    def admissible(self, current: list[str], changed: frozenset[int], pos: int) -> list[tuple[list[str], np.ndarray]]:
        if pos in changed or len(changed) + 1 > self.max_changes:
            return []
        base_ids = self.emb.ids(current)
        out = []
        for cand in self.candidates(pos):
            ids = base_ids.copy()
            ids[pos] = self.emb.vocab.index(cand)
            if self.similarity(ids) >= self.cfg.threshold:
                trial = list(current)
                trial[pos] = cand
                out.append((trial, ids))
        return out

    def outcome(self, status, current, changed, trace) -> AttackOutcome:
        sim = self.similarity(self.emb.ids(current))
        return AttackOutcome(status, self.example, tuple(current), self.queries, len(changed), sim, trace)


def attack(model: Classifier, example: Example, cfg: AttackConfig) -> AttackOutcome:
    """Attack one example. Never raises on valid input; budget exhaustion is a ``fail``."""
    run = _Run(model, example, cfg)
    label = example.label
    probs = run.query([run.tokens])[0]
    if int(np.argmax(probs)) != label:
        return AttackOutcome("skip", example, tuple(run.tokens), run.queries, 0, 1.0)
    if cfg.search == "beam":
        return _beam(run, float(probs[label]))
    return _greedy(run, float(probs[label]))


def _greedy(run: _Run, p_cur: float) -> AttackOutcome:
    label = run.example.label
    if run.cfg.search == "greedy_wir":
        order, probe_queries = word_importance_ranking(run.model, run.tokens, label, base_prob=p_cur)
        run.queries += probe_queries
        run.cap += probe_queries
    else:
        order = list(range(run.L))
    current = list(run.tokens)
    changed: frozenset[int] = frozenset()
    trace: list[tuple[int, str, str, float]] = []
    for pos in order:
        if len(changed) + 1 > run.max_changes:
            break
        trials = run.admissible(current, changed, pos)
        if not trials:
            continue
        room = run.remaining()
        if room <= 0:
            break
        truncated = len(trials) > room
        trials = trials[:room]
        probs = run.query([t for t, _ in trials])
        p = probs[:, label]
        best = int(np.argmin(p))
        if p[best] < p_cur:
            old = current[pos]
            current = trials[best][0]
            changed = changed | {pos}
            p_cur = float(p[best])
            trace.append((pos, old, current[pos], p_cur))
            if int(np.argmax(probs[best])) != label:
                return run.outcome("success", current, changed, trace)
        if truncated:
            break
    return run.outcome("fail", current, changed, trace)


def _beam(run: _Run, p_cur: float) -> AttackOutcome:
    label = run.example.label
    beams: list[tuple[list[str], frozenset[int], float]] = [(list(run.tokens), frozenset(), p_cur)]
    best_tokens, best_changed, best_p = beams[0]
    trace: list[tuple[int, str, str, float]] = []
    while True:
        children: list[tuple[list[str], frozenset[int], int, str]] = []
        seen: set[tuple[str, ...]] = set()
        for tokens, changed, _ in beams:
            for pos in range(run.L):
                for trial, _ids in run.admissible(tokens, changed, pos):
                    key = tuple(trial)
                    if key not in seen:
                        seen.add(key)
                        children.append((trial, changed | {pos}, pos, tokens[pos]))
        room = run.remaining()
        if not children or room <= 0:
            break
        children = children[:room]
        probs = run.query([c[0] for c in children])
        p = probs[:, label]
        ranked = sorted(range(len(children)), key=lambda i: (p[i], i))
        top = ranked[0]
        if p[top] >= best_p:
            break
        best_tokens, best_changed, pos, old = children[top]
        best_p = float(p[top])
        trace.append((pos, old, best_tokens[pos], best_p))
        if int(np.argmax(probs[top])) != label:
            return run.outcome("success", best_tokens, best_changed, trace)
        beams = [(children[i][0], children[i][1], float(p[i])) for i in ranked[: run.cfg.beam_width]]
    return run.outcome("fail", best_tokens, best_changed, trace)
