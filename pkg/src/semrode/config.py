"""Run configuration: one YAML file, optional ``--set key=value`` overrides.

Precedence is flags > file > dataclass defaults. Relative paths in the file are
resolved against the file's directory; relative paths given as overrides are
resolved against the working directory. Errors name the offending field and,
when it came from the file, its line.

Layout::

    data:
      embeddings: ../data/toy/embeddings.txt
      train: ../data/toy/train.tsv
      eval: ../data/toy/eval.tsv
      eval_size: null          # first k after a seeded shuffle (seed_data)
    output: ../runs/toy_semrode
    training: {objective: semrode, distance: mmd, lam: 1.0, ...}
    generation:                # attack used to build the offline adversarial set
      source: {kind: embedding, path: ../data/toy/embeddings.txt, min_cos: 0.6}
      n_candidates: 50
    evaluation:                # one report per entry
      - name: held-out
        source: {kind: embedding, path: ../data/toy/embeddings_alt.txt, min_cos: 0.6}
"""
from __future__ import annotations

import dataclasses
import random
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import yaml

from .attack import AttackConfig, SubstitutionSource, build_substitution_source
from .distances import SinkhornConfig
from .textmodel import EmbeddingTable, Example, load_dataset
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SourceSpec:
    path: str
    kind: Literal["embedding", "synonyms"] = "embedding"
    min_cos: float = 0.5


@dataclass(frozen=True)
class AttackSpec:
    source: SourceSpec
    name: str = ""
    n_candidates: int = 50
    epsilon: float = 0.5
    max_perturb_ratio: float = 0.30
    query_budget_factor: int | None = None
    search: Literal["greedy_wir", "greedy", "beam"] = "greedy_wir"
    beam_width: int = 3

    @property
    def label(self) -> str:
        return self.name or Path(self.source.path).stem


@dataclass(frozen=True)
class DataSpec:
    embeddings: str
    train: str
    eval: str
    eval_size: int | None = None


@dataclass(frozen=True)
class RunConfig:
    data: DataSpec
    output: str
    training: TrainConfig = field(default_factory=TrainConfig)
    generation: AttackSpec | None = None
    evaluation: tuple[AttackSpec, ...] = ()


# ---------------------------------------------------------------- YAML with line numbers

class _Lined(dict):
    """Mapping that remembers the source line of each key."""

    def __init__(self):
        super().__init__()
        self.lines: dict[str, int] = {}


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    out = _Lined()
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        out[key] = loader.construct_object(value_node, deep=True)
        out.lines[key] = key_node.start_mark.line + 1
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)

_PATH_KEYS = (("data", "embeddings"), ("data", "train"), ("data", "eval"), ("output",))


def _where(origin: str, line: int | None) -> str:
    return f"{origin}:{line}" if line else origin


def _resolve_paths(raw: dict, base: Path) -> None:
    def fix(d, key):
        if isinstance(d, dict) and isinstance(d.get(key), str) and not Path(d[key]).is_absolute():
            d[key] = str((base / d[key]).resolve())

    for keys in _PATH_KEYS:
        node = raw
        for k in keys[:-1]:
            node = node.get(k) if isinstance(node, dict) else None
        fix(node, keys[-1])
    specs = []
    if isinstance(raw.get("generation"), dict):
        specs.append(raw["generation"])
    if isinstance(raw.get("evaluation"), list):
        specs.extend(s for s in raw["evaluation"] if isinstance(s, dict))
    for spec in specs:
        fix(spec.get("source"), "path")


def _merge(dst: dict, src: dict) -> None:
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _merge(dst[k], v)
        else:
            dst[k] = v
            if isinstance(dst, _Lined):
                dst.lines.pop(k, None)


def parse_override(item: str) -> dict:
    """``a.b.c=value`` -> nested dict; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r}: expected key=value")
    key, text = item.split("=", 1)
    parts = [p for p in key.strip().split(".")]
    if not all(parts):
        raise ConfigError(f"override {item!r}: empty key segment")
    try:
        value = yaml.safe_load(text) if text.strip() else None
    except yaml.YAMLError as err:
        raise ConfigError(f"override {item!r}: {err}") from None
    out: dict = {}
    node = out
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


# ---------------------------------------------------------------- typed coercion

def _coerce(tp, value, name: str, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if tp is Any:
        return value
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, name, where)
    if origin is Literal:
        if value not in args:
            raise ConfigError(f"{where}: field '{name}': expected one of {list(args)}, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: field '{name}': expected a list, got {value!r}")
        return tuple(_coerce(args[0], v, f"{name}[{i}]", where) for i, v in enumerate(value))
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, name, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: field '{name}': expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: field '{name}': expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms without a dot (1e-3) as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: field '{name}': expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: field '{name}': expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: field '{name}': unsupported type {tp}")


def _build(cls, raw, prefix: str, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: field '{prefix}': expected a mapping, got {raw!r}")
    lines = getattr(raw, "lines", {})
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    origin = where.split(":")[0] if where[:1] != "<" else where
    for key in raw:
        if key not in names:
            full = f"{prefix}.{key}" if prefix else str(key)
            loc = _where(origin, lines[key]) if key in lines else "<--set>"
            raise ConfigError(f"{loc}: unknown field '{full}'")
    kwargs = {}
    for f in dataclasses.fields(cls):
        full = f"{prefix}.{f.name}" if prefix else f.name
        if f.name not in raw:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(f"{origin}: missing required field '{full}'")
            continue
        at = _where(origin, lines.get(f.name)) if f.name in lines else "<--set>"
        kwargs[f.name] = _coerce(hints[f.name], raw[f.name], full, at)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        first = next(iter(lines.values()), None)
        raise ConfigError(f"{_where(origin, first)}: section '{prefix or 'root'}': {err}") from None


# ---------------------------------------------------------------- public API

def load_run_config(path: str | Path, overrides: typing.Sequence[str] = (), check_paths: bool = True) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
    try:
        raw = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        line = f":{mark.line + 1}" if mark else ""
        raise ConfigError(f"{path}{line}: YAML syntax error: {getattr(err, 'problem', err)}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    _resolve_paths(raw, path.parent.resolve())
    for item in overrides:
        patch = parse_override(item)
        _resolve_paths(patch, Path.cwd())
        _merge(raw, patch)
    run = _build(RunConfig, raw, "", str(path))
    if run.training.needs_adversarial and run.generation is None:
        raise ConfigError(f"{path}: objective '{run.training.objective}' needs a 'generation' attack")
    if check_paths:
        validate_paths(run)
    return run


def validate_paths(run: RunConfig) -> None:
    needed = [("data.embeddings", run.data.embeddings), ("data.train", run.data.train), ("data.eval", run.data.eval)]
    specs = ([("generation", run.generation)] if run.generation else []) + [
        (f"evaluation[{i}]", s) for i, s in enumerate(run.evaluation)
    ]
    needed += [(f"{n}.source.path", s.source.path) for n, s in specs]
    for name, p in needed:
        if not Path(p).is_file():
            raise ConfigError(f"field '{name}': file not found: {p}")
    out = Path(run.output)
    probe = out
    while not probe.exists():
        probe = probe.parent
    if not probe.is_dir():
        raise ConfigError(f"field 'output': {probe} exists and is not a directory")


def run_config_dict(run: RunConfig) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v

    return plain(dataclasses.asdict(run))


def dump_run_config(run: RunConfig, path: str | Path) -> None:
    """Fully-resolved echo; loading it back gives an equal RunConfig."""
    Path(path).write_text(yaml.safe_dump(run_config_dict(run), sort_keys=False), encoding="utf-8")


# ---------------------------------------------------------------- runtime objects

def load_eval_set(run: RunConfig) -> list[Example]:
    examples = load_dataset(run.data.eval)
    k = run.data.eval_size
    if k is None or k >= len(examples):
        return examples
    idx = list(range(len(examples)))
    random.Random(run.training.seed_data).shuffle(idx)
    return [examples[i] for i in idx[:k]]


class SourceCache:
    """Builds substitution sources once per (spec, candidates) against one model vocabulary."""

    def __init__(self, embeddings: EmbeddingTable, embeddings_path: str):
        self.embeddings = embeddings
        self._tables = {str(Path(embeddings_path).resolve()): embeddings}
        self._sources: dict = {}

    def table(self, path: str) -> EmbeddingTable:
        key = str(Path(path).resolve())
        if key not in self._tables:
            self._tables[key] = EmbeddingTable.load(key)
        return self._tables[key]

    def source(self, spec: AttackSpec) -> SubstitutionSource:
        key = (spec.source, spec.n_candidates)
        if key not in self._sources:
            src = spec.source
            if src.kind == "synonyms":
                built = SubstitutionSource.load(src.path, name=spec.label)
            else:
                built = build_substitution_source(self.table(src.path), spec.n_candidates, src.min_cos, spec.label)
            self._sources[key] = built.restrict(self.embeddings.vocab, spec.label)
        return self._sources[key]

    def attack_config(self, spec: AttackSpec) -> AttackConfig:
        return AttackConfig(
            source=self.source(spec),
            n_candidates=spec.n_candidates,
            epsilon=spec.epsilon,
            max_perturb_ratio=spec.max_perturb_ratio,
            query_budget_factor=spec.query_budget_factor,
            search=spec.search,
            beam_width=spec.beam_width,
        )


__all__ = [
    "AttackSpec", "ConfigError", "DataSpec", "RunConfig", "SinkhornConfig", "SourceCache", "SourceSpec",
    "dump_run_config", "load_eval_set", "load_run_config", "parse_override", "run_config_dict", "validate_paths",
]
