"""Pooled static-embedding classifier.

tokenize -> frozen embedding lookup -> mean pool -> ReLU(W1 x + b1) -> W2 h + b2.
The ReLU layer output is the feature vector aligned by the distance regularizer.
"""
from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Node

UNK = "<unk>"
_STRIP = string.punctuation.replace("'", "")


class DegenerateInputError(ValueError):
    pass


class CompatibilityError(ValueError):
    pass


def tokenize(raw: str) -> list[str]:
    """Lowercase, split on whitespace, strip surrounding punctuation per token.

    Apostrophes are kept (``woods'`` stays ``woods'``); tokens that are pure
    punctuation disappear.
    """
    out = []
    for piece in raw.lower().split():
        tok = piece.strip(_STRIP)
        if tok:
            out.append(tok)
    return out


@dataclass(frozen=True)
class Example:
    text: tuple[str, ...]
    label: int

    def __post_init__(self):
        if not self.text:
            raise DegenerateInputError("example has no tokens")
        if self.label < 0:
            raise ValueError(f"label must be non-negative, got {self.label}")

    @classmethod
    def from_raw(cls, raw: str, label: int) -> "Example":
        return cls(tuple(tokenize(raw)), int(label))


class Vocabulary:
    def __init__(self, tokens: Iterable[str], unk: str = UNK):
        self.itos: list[str] = []
        self.stoi: dict[str, int] = {}
        for tok in [unk, *tokens]:
            if tok in self.stoi:
                continue
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
        self.unk_index = self.stoi[unk]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, self.unk_index)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()


class EmbeddingTable:
    """Frozen vocabulary -> vector map. The unk row is zeros unless the file supplies one."""

    def __init__(self, vocab: Vocabulary, vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.shape[0] != len(vocab) or vectors.ndim != 2:
            raise ValueError(f"{vectors.shape} vectors for {len(vocab)} vocabulary entries")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("embedding vectors must be finite")
        vectors.setflags(write=False)
        self.vocab = vocab
        self.vectors = vectors

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def ids(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.vocab.index(t) for t in tokens], dtype=np.int64)

    def mean_vector(self, tokens: Sequence[str]) -> np.ndarray:
        if len(tokens) == 0:
            raise DegenerateInputError("cannot pool an empty token sequence")
        return self.vectors[self.ids(tokens)].mean(axis=0)

    @classmethod
    def from_dict(cls, mapping: dict[str, Sequence[float]]) -> "EmbeddingTable":
        tokens = list(mapping)
        dim = len(next(iter(mapping.values())))
        vocab = Vocabulary(t for t in tokens if t != UNK)
        vectors = np.zeros((len(vocab), dim))
        for tok, vec in mapping.items():
            vectors[vocab.stoi[tok]] = vec
        return cls(vocab, vectors)

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTable":
        """Read ``token v1 ... vd`` lines; an optional ``count dim`` header is skipped."""
        path = Path(path)
        rows: dict[str, list[float]] = {}
        dim = None
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split()
                if not parts:
                    continue
                if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                    continue
                tok, vals = parts[0], parts[1:]
                if dim is None:
                    dim = len(vals)
                if len(vals) != dim or dim == 0:
                    raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(vals)}")
                try:
                    rows[tok] = [float(v) for v in vals]
                except ValueError as err:
                    raise ValueError(f"{path}:{lineno}: {err}") from None
        if not rows:
            raise ValueError(f"{path}: no embedding rows")
        return cls.from_dict(rows)

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write(f"{len(self.vocab)} {self.dim}\n")
            for tok, vec in zip(self.vocab.itos, self.vectors):
                fh.write(tok + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def load_dataset(path: str | Path) -> list[Example]:
    """``label<TAB>raw text`` per line. Lines that tokenize to nothing are rejected."""
    path = Path(path)
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            try:
                label, raw = line.split("\t", 1)
                out.append(Example.from_raw(raw, int(label)))
            except (ValueError, DegenerateInputError) as err:
                raise ValueError(f"{path}:{lineno}: {err}") from None
    return out


class PooledClassifier:
    """Frozen embeddings, one trainable ReLU feature layer, linear head."""

    def __init__(self, embeddings: EmbeddingTable, n_classes: int, hidden: int = 128, seed: int = 765):
        self.embeddings = embeddings
        self.n_classes = n_classes
        rng = np.random.default_rng(seed)
        d = embeddings.dim
        self.W1 = dc.tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, hidden)), requires_grad=True)
        self.b1 = dc.tensor(np.zeros(hidden), requires_grad=True)
        self.W2 = dc.tensor(rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, n_classes)), requires_grad=True)
        self.b2 = dc.tensor(np.zeros(n_classes), requires_grad=True)

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    def parameters(self) -> list[Node]:
        return [self.W1, self.b1, self.W2, self.b2]

    # ---- graph path (training)

    def pooled(self, batch: Sequence[Sequence[str]]) -> np.ndarray:
        return np.stack([self.embeddings.mean_vector(t) for t in batch])

    def features(self, batch: Sequence[Sequence[str]]) -> Node:
        """Feature matrix (n x hidden) for a batch of token sequences."""
        x = dc.constant(self.pooled(batch))
        return dc.relu(dc.add(dc.matmul(x, self.W1), self.b1))

    def logits(self, feats: Node) -> Node:
        return dc.add(dc.matmul(feats, self.W2), self.b2)

    # ---- numpy path (attacks, evaluation)

    def feature_values(self, batch: Sequence[Sequence[str]]) -> np.ndarray:
        return np.maximum(self.pooled(batch) @ self.W1.value + self.b1.value, 0.0)

    def predict_proba(self, batch: Sequence[Sequence[str]]) -> np.ndarray:
        logits = self.feature_values(batch) @ self.W2.value + self.b2.value
        return dc.softmax(logits)

    def predict(self, tokens: Sequence[str]) -> tuple[int, np.ndarray]:
        probs = self.predict_proba([tokens])[0]
        return int(np.argmax(probs)), probs

    # ---- persistence

    def state(self) -> dict:
        return {
            "vocab_sha256": self.embeddings.vocab.digest(),
            "n_classes": self.n_classes,
            "params": {
                name: {"shape": list(p.shape), "data": [float(v) for v in p.value.ravel()]}
                for name, p in zip(("W1", "b1", "W2", "b2"), self.parameters())
            },
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.state(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, embeddings: EmbeddingTable) -> "PooledClassifier":
        state = json.loads(Path(path).read_text(encoding="utf-8"))
        if state["vocab_sha256"] != embeddings.vocab.digest():
            raise CompatibilityError(f"{path}: checkpoint vocabulary does not match the loaded embeddings")
        params = state["params"]
        model = cls(embeddings, state["n_classes"], hidden=params["b1"]["shape"][0])
        for name in ("W1", "b1", "W2", "b2"):
            p = params[name]
            value = np.array(p["data"], dtype=np.float64).reshape(p["shape"])
            getattr(model, name).value = value
            getattr(model, name).grad = np.zeros_like(value)
        if model.W1.shape[0] != embeddings.dim:
            raise CompatibilityError(f"{path}: W1 expects dim {model.W1.shape[0]}, embeddings have {embeddings.dim}")
        return model
