"""Offline adversarial-set generation and the training objectives.

Objectives:

* ``vanilla``  - cross-entropy on base examples.
* ``adv_aug``  - cross-entropy on base and adversarial examples in one batch.
* ``adv_reg``  - lam0 * CE(base) + lam1 * CE(adv).
* ``semrode``  - CE(base) + lam * D(features(base), features(adv)), where D is
  MMD, CORAL or the Sinkhorn divergence. Labels are not used by D.

Optimisation is plain SGD. Gradients accumulate into ``Node.grad``; every step
zeroes them first. Embeddings are never updated.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import random
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from . import diffcore as dc
from .attack import AttackConfig, attack
from .distances import SinkhornConfig, distance_loss, exact_wasserstein, mmd_rbf
from .textmodel import EmbeddingTable, Example, PooledClassifier

log = logging.getLogger(__name__)

Objective = Literal["vanilla", "adv_aug", "adv_reg", "semrode"]
CURVE_HEADER = ("epoch", "ce", "dist", "wasserstein", "mmd", "clean_acc")


class TrainingDivergedError(RuntimeError):
    pass


class EmptyAdversarialSetWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TrainConfig:
    objective: Objective = "semrode"
    distance: Literal["mmd", "coral", "sinkhorn"] = "mmd"
    lam: float = 1.0
    lam0: float = 1.0
    lam1: float = 1.0
    epochs: int = 30
    warmup_epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.05
    adv_ratio: float = 0.10
    seed_train: int = 765
    seed_data: int = 42
    freeze_feature_layer: bool = False
    hidden: int = 128
    probe_size: int = 64
    pairing: Literal["independent", "matched"] = "independent"
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)

    def __post_init__(self):
        if self.objective not in ("vanilla", "adv_aug", "adv_reg", "semrode"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.distance not in ("mmd", "coral", "sinkhorn"):
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.pairing not in ("independent", "matched"):
            raise ValueError(f"unknown pairing {self.pairing!r}")
        if not 0 < self.adv_ratio <= 1:
            raise ValueError(f"adv_ratio must lie in (0, 1], got {self.adv_ratio}")
        if min(self.lam, self.lam0, self.lam1) < 0:
            raise ValueError("regularisation weights must be non-negative")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")

    @property
    def needs_adversarial(self) -> bool:
        return self.objective != "vanilla"


@dataclass
class AdversarialSet:
    pairs: list[tuple[Example, Example]]
    provenance: AttackConfig | None = None
    attempted: int = 0

    def __len__(self) -> int:
        return len(self.pairs)

    def save(self, path: str | Path, sidecar: dict | None = None) -> None:
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            for base, adv in self.pairs:
                fh.write(f"{base.label}\t{' '.join(base.text)}\t{' '.join(adv.text)}\n")
        record = {"kept": len(self.pairs), "attempted": self.attempted}
        if self.provenance is not None:
            cfg = self.provenance
            record["attack"] = {
                "source": cfg.source.name,
                "n_candidates": cfg.n_candidates,
                "epsilon": cfg.epsilon,
                "max_perturb_ratio": cfg.max_perturb_ratio,
                "query_budget_factor": cfg.query_budget_factor,
                "search": cfg.search,
                "beam_width": cfg.beam_width,
            }
        record.update(sidecar or {})
        path.with_suffix(".json").write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "AdversarialSet":
        pairs = []
        with Path(path).open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: expected label<TAB>original<TAB>perturbed")
                label = int(parts[0])
                pairs.append((Example(tuple(parts[1].split()), label), Example(tuple(parts[2].split()), label)))
        return cls(pairs, attempted=len(pairs))


def subsample_indices(n: int, ratio: float, seed: int) -> list[int]:
    """First floor(ratio * n) indices of a seeded shuffle of range(n)."""
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    idx = list(range(n))
    random.Random(seed).shuffle(idx)
    return idx[: math.floor(ratio * n + 1e-9)]


def run_attacks(model, examples: Sequence[Example], cfg: AttackConfig, workers: int = 1):
    """Attack each example; results come back in input order whatever ``workers`` is."""
    if workers <= 1:
        return [attack(model, ex, cfg) for ex in examples]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ex: attack(model, ex, cfg), examples))


def generate_offline_adv_set(
    model, train_data: Sequence[Example], cfg: AttackConfig, ratio: float = 0.10, seed: int = 42, workers: int = 1
) -> AdversarialSet:
    """Attack a seeded subsample once with the initial model; keep the successes."""
    chosen = [train_data[i] for i in subsample_indices(len(train_data), ratio, seed)]
    outcomes = run_attacks(model, chosen, cfg, workers)
    pairs = [(o.original, Example(o.perturbed, o.original.label)) for o in outcomes if o.status == "success"]
    log.info("offline adversarial set: kept %d of %d attacked", len(pairs), len(chosen))
    if not pairs:
        warnings.warn(
            f"no successful adversarial examples out of {len(chosen)} attacked; "
            "objectives fall back to plain cross-entropy",
            EmptyAdversarialSetWarning,
        )
    return AdversarialSet(pairs, cfg, attempted=len(chosen))


# ---------------------------------------------------------------- steps

def _sgd(model: PooledClassifier, lr: float, freeze_feature_layer: bool) -> None:
    params = model.parameters()
    if freeze_feature_layer:
        params = params[2:]
    for p in params:
        p.value = p.value - lr * p.grad


def _ce(model: PooledClassifier, batch: Sequence[Example]) -> dc.Node:
    feats = model.features([ex.text for ex in batch])
    return dc.softmax_cross_entropy(model.logits(feats), [ex.label for ex in batch])


@dataclass
class StepResult:
    loss: float
    loss_base: float
    loss_dist: float = 0.0


def train_step_semrode(
    model: PooledClassifier,
    base_batch: Sequence[Example],
    adv_batch: Sequence[Example],
    distance: str,
    lam: float,
    lr: float = 0.05,
    freeze_feature_layer: bool = False,
    sinkhorn: SinkhornConfig | None = None,
    anchor_batch: Sequence[Example] | None = None,
) -> StepResult:
    """One SGD step on CE(base) + lam * D(features(base), features(adv)).

    With ``anchor_batch`` the distance compares features(anchor) against
    features(adv) instead; CE still runs on ``base_batch``.
    """
    if not base_batch:
        raise ValueError("empty base batch")
    dc.zero_grads(model.parameters())
    feats = model.features([ex.text for ex in base_batch])
    ce = dc.softmax_cross_entropy(model.logits(feats), [ex.label for ex in base_batch])
    total, dist_value = ce, 0.0
    if not adv_batch:
        log.debug("no adversarial partners for this batch; distance term skipped")
    elif lam > 0:
        adv_feats = model.features([ex.text for ex in adv_batch])
        ref = feats if anchor_batch is None else model.features([ex.text for ex in anchor_batch])
        dist = distance_loss(distance, ref, adv_feats, sinkhorn)
        dist_value = float(dist.value)
        total = dc.add(ce, dc.scale(dist, lam))
    loss = float(total.value)
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss}")
    dc.backward(total)
    _sgd(model, lr, freeze_feature_layer)
    return StepResult(loss, float(ce.value), dist_value)


def train_step_baseline(
    model: PooledClassifier,
    batch: Sequence[Example],
    mode: Objective,
    adv_batch: Sequence[Example] = (),
    lam0: float = 1.0,
    lam1: float = 1.0,
    lr: float = 0.05,
    freeze_feature_layer: bool = False,
) -> float:
    """One SGD step for ``vanilla``, ``adv_aug`` or ``adv_reg``; returns the loss."""
    if not batch:
        raise ValueError("empty batch")
    dc.zero_grads(model.parameters())
    if mode == "vanilla" or (mode == "adv_aug" and not adv_batch):
        total = _ce(model, batch)
    elif mode == "adv_aug":
        total = _ce(model, list(batch) + list(adv_batch))
    elif mode == "adv_reg":
        total = dc.scale(_ce(model, batch), lam0)
        if adv_batch and lam1 > 0:
            total = dc.add(total, dc.scale(_ce(model, adv_batch), lam1))
    else:
        raise ValueError(f"unknown baseline mode {mode!r}")
    loss = float(total.value)
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss}")
    dc.backward(total)
    _sgd(model, lr, freeze_feature_layer)
    return loss


# ---------------------------------------------------------------- loop

@dataclass
class CurveRow:
    epoch: int
    ce: float
    dist: float
    wasserstein: float
    mmd: float
    clean_acc: float


def accuracy(model: PooledClassifier, examples: Sequence[Example]) -> float:
    if not examples:
        return float("nan")
    probs = model.predict_proba([ex.text for ex in examples])
    return float(np.mean(np.argmax(probs, axis=1) == np.array([ex.label for ex in examples])))


def probe_distances(model: PooledClassifier, pairs: Sequence[tuple[Example, Example]]) -> tuple[float, float]:
    """Exact W2 and median-bandwidth MMD between base and adversarial features of ``pairs``."""
    if len(pairs) < 1:
        return float("nan"), float("nan")
    base = model.feature_values([b.text for b, _ in pairs])
    adv = model.feature_values([a.text for _, a in pairs])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mmd = float(mmd_rbf(base, adv).value)
    return exact_wasserstein(base, adv, p=2), mmd


def _sample_pairs(rng: np.random.Generator, adv_set: AdversarialSet, k: int) -> list[tuple[Example, Example]]:
    if not adv_set.pairs:
        return []
    replace = len(adv_set.pairs) < k
    idx = rng.choice(len(adv_set.pairs), size=k, replace=replace)
    return [adv_set.pairs[i] for i in idx]


def train(
    model: PooledClassifier,
    data: Sequence[Example],
    adv_set: AdversarialSet | None,
    cfg: TrainConfig,
    probe: Sequence[Example] = (),
) -> tuple[PooledClassifier, list[CurveRow]]:
    """Seeded epoch loop. Mutates and returns ``model`` with one curve row per epoch.

    Each step samples as many adversarial pairs as the base batch holds (seeded,
    with replacement when the set is smaller). With ``pairing="independent"`` the
    distance compares the base batch against the sampled adversarial sentences;
    with ``"matched"`` it compares the sampled pairs' own base sentences against
    their adversarial versions. The distance probe is the first
    ``cfg.probe_size`` pairs of the adversarial set.
    """
    adv_set = adv_set or AdversarialSet([])
    order_rng = np.random.default_rng(cfg.seed_data)
    adv_rng = np.random.default_rng(cfg.seed_train)
    probe_pairs = adv_set.pairs[: cfg.probe_size]
    curve: list[CurveRow] = []
    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.permutation(len(data))
        ce_sum, dist_sum, steps = 0.0, 0.0, 0
        for step, start in enumerate(range(0, len(data), cfg.batch_size)):
            batch = [data[i] for i in perm[start:start + cfg.batch_size]]
            pairs = _sample_pairs(adv_rng, adv_set, len(batch)) if cfg.needs_adversarial else []
            adv_batch = [a for _, a in pairs]
            anchor = [b for b, _ in pairs] if cfg.pairing == "matched" and pairs else None
            try:
                if cfg.objective == "semrode":
                    res = train_step_semrode(model, batch, adv_batch, cfg.distance, cfg.lam,
                                             cfg.learning_rate, cfg.freeze_feature_layer, cfg.sinkhorn, anchor)
                    ce_sum += res.loss_base
                    dist_sum += res.loss_dist
                else:
                    ce_sum += train_step_baseline(model, batch, cfg.objective, adv_batch, cfg.lam0, cfg.lam1,
                                                  cfg.learning_rate, cfg.freeze_feature_layer)
            except (TrainingDivergedError, dc.DomainError) as err:
                raise TrainingDivergedError(f"epoch {epoch}, step {step}: {err}") from err
            steps += 1
        wass, mmd = probe_distances(model, probe_pairs)
        row = CurveRow(
            epoch=epoch,
            ce=ce_sum / max(steps, 1),
            dist=dist_sum / max(steps, 1) if cfg.objective == "semrode" else float("nan"),
            wasserstein=wass,
            mmd=mmd,
            clean_acc=accuracy(model, probe),
        )
        log.info("epoch %d: %s", epoch, row)
        curve.append(row)
    return model, curve


@dataclass
class FitResult:
    model: PooledClassifier
    adv_set: AdversarialSet
    curve: list[CurveRow]


def fit(
    embeddings: EmbeddingTable,
    data: Sequence[Example],
    cfg: TrainConfig,
    gen_attack: AttackConfig | None,
    probe: Sequence[Example] = (),
    workers: int = 1,
) -> FitResult:
    """Full pipeline: seeded init, vanilla warm-up, offline attack, objective epochs.

    The adversarial set is generated against the warmed-up model whenever an
    attack is given (vanilla runs use it only for the distance probe).
    """
    n_classes = max(ex.label for ex in data) + 1
    model = PooledClassifier(embeddings, n_classes, hidden=cfg.hidden, seed=cfg.seed_train)
    if cfg.warmup_epochs:
        train(model, data, None, replace(cfg, objective="vanilla", epochs=cfg.warmup_epochs))
    if gen_attack is not None:
        adv_set = generate_offline_adv_set(model, data, gen_attack, cfg.adv_ratio, cfg.seed_data, workers)
    elif cfg.needs_adversarial:
        raise ValueError(f"objective {cfg.objective!r} needs a generation attack")
    else:
        adv_set = AdversarialSet([])
    model, curve = train(model, data, adv_set, cfg, probe)
    return FitResult(model, adv_set, curve)


def write_curve(rows: Sequence[CurveRow], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_HEADER)
        for r in rows:
            writer.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in CURVE_HEADER[1:]])


def read_curve(path: str | Path) -> list[CurveRow]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [CurveRow(int(r["epoch"]), *(float(r[k]) for k in CURVE_HEADER[1:])) for r in csv.DictReader(fh)]


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
