"""Experiment configuration: flat ``section.key = value`` text <-> dataclasses.

Values are JSON literals (numbers, ``true``/``false``, ``[lists]``, quoted
strings); anything that is not valid JSON is read as a bare string, so
``dataset.name = twin_moons`` works.  ``#`` starts a comment line.

Example::

    seed = 0
    dataset.name = twin_moons
    dataset.seed = 0
    dataset.rotation = 30.0
    training.epochs = 40
    training.lambda = 1.0
"""

from __future__ import annotations

import dataclasses
import inspect
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import datagen
from .errors import ConfigError

ABLATIONS = (
    "scal",
    "no_conditions",
    "src_classifier_conditions",
    "non_differentiable_conditions",
    "kmeans_last_init",
)
PREDICT_HEADS = ("auto", "surrogate", "source")
FORMATS = ("csv", "json")


@dataclass
class DatasetConfig:
    name: str = "twin_moons"
    seed: int = 0
    params: dict[str, Any] = field(default_factory=dict)


@dataclass
class ModelConfig:
    num_classes: int = 2
    g_hidden: list[int] = field(default_factory=lambda: [15, 15])
    d_hidden: list[int] = field(default_factory=list)

    @property
    def feature_dim(self) -> int:
        return self.g_hidden[-1]


@dataclass
class TrainingConfig:
    epochs: int = 100
    batch_size: int = 32
    lr0: float = 0.01
    alpha: float = 10.0
    beta: float = 0.75
    momentum: float = 0.9
    lam: float = 1.0
    head_lr_mult: float = 10.0
    disc_lr_mult: float = 1.0
    ablation: str = "scal"
    noise_level: float = 0.0
    flow_through: bool = False
    predict_head: str = "auto"
    kmeans_max_iter: int = 50
    kmeans_tol: float = 1e-6
    checkpoint_every: int = 0


@dataclass
class OutputConfig:
    directory: str = "runs/default"
    formats: list[str] = field(default_factory=lambda: ["csv", "json"])


@dataclass
class ExperimentConfig:
    seed: int
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with per-section overrides, e.g. ``replace(training={"lam": 0.0})``."""
        new = from_dict(to_dict(self))
        for section, updates in sections.items():
            if section == "seed":
                new.seed = updates
                continue
            target = getattr(new, section)
            for key, value in updates.items():
                if section == "dataset" and key not in ("name", "seed", "params"):
                    target.params[key] = value
                else:
                    setattr(target, key, value)
        validate(new)
        return new


# text keys that differ from attribute names
_ALIASES = {("training", "lambda"): "lam"}
_REVERSE_ALIASES = {v: k for (_, k), v in _ALIASES.items()}


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _format_value(value: Any) -> str:
    if isinstance(value, str) and value and value.strip() == value and not _looks_like_json(value):
        return value
    return json.dumps(value)


def _looks_like_json(s: str) -> bool:
    try:
        json.loads(s)
        return True
    except json.JSONDecodeError:
        return False


def parse_text(text: str) -> dict[str, Any]:
    """Flat text -> nested dict.  Raises ConfigError with line numbers."""
    out: dict[str, Any] = {}
    problems = []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            problems.append(f"line {lineno}: expected 'key = value'")
            continue
        key, raw = stripped.split("=", 1)
        parts = key.strip().split(".")
        if any(not p for p in parts):
            problems.append(f"line {lineno}: malformed key {key.strip()!r}")
            continue
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                problems.append(f"line {lineno}: {key.strip()!r} nests under a scalar")
                break
        else:
            if parts[-1] in node:
                problems.append(f"line {lineno}: duplicate key {key.strip()!r}")
            node[parts[-1]] = _parse_value(raw)
    if problems:
        raise ConfigError(problems)
    return out


def from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    """Build and validate a config; every problem is reported by field name."""
    raw = dict(raw)
    problems = []
    if "seed" not in raw:
        problems.append("seed: required field is missing (no implicit entropy)")
    sections = {}
    for name, cls in (("dataset", DatasetConfig), ("model", ModelConfig), ("training", TrainingConfig), ("output", OutputConfig)):
        block = raw.pop(name, {}) or {}
        if not isinstance(block, dict):
            problems.append(f"{name}: expected a section")
            block = {}
        kwargs: dict[str, Any] = {}
        extra: dict[str, Any] = {}
        known = {f.name for f in dataclasses.fields(cls)}
        for key, value in block.items():
            attr = _ALIASES.get((name, key), key)
            if name == "dataset" and attr == "params" and isinstance(value, dict):
                extra.update(value)
            elif attr in known and attr != "params":
                kwargs[attr] = value
            elif name == "dataset":
                extra[key] = value
            else:
                problems.append(f"{name}.{key}: unknown field")
        if name == "dataset":
            kwargs["params"] = extra
        sections[name] = cls(**kwargs)
    seed = raw.pop("seed", None)
    for key in raw:
        problems.append(f"{key}: unknown field")
    if problems:
        raise ConfigError(problems)
    cfg = ExperimentConfig(seed=seed, **sections)
    validate(cfg)
    return cfg


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate(cfg: ExperimentConfig) -> None:
    p = []
    if not _is_int(cfg.seed) or cfg.seed < 0:
        p.append(f"seed: must be a nonnegative integer, got {cfg.seed!r}")

    d = cfg.dataset
    if d.name not in datagen.GENERATORS:
        p.append(f"dataset.name: unknown generator {d.name!r} (choose from {sorted(datagen.GENERATORS)})")
    else:
        accepted = set(inspect.signature(datagen.GENERATORS[d.name]).parameters) - {"seed"}
        for key in d.params:
            if key not in accepted:
                p.append(f"dataset.{key}: not a parameter of {d.name} (accepted: {sorted(accepted)})")
    if not _is_int(d.seed) or d.seed < 0:
        p.append(f"dataset.seed: must be a nonnegative integer, got {d.seed!r}")

    m = cfg.model
    if not _is_int(m.num_classes) or m.num_classes < 2:
        p.append(f"model.num_classes: must be an integer >= 2, got {m.num_classes!r}")
    if not isinstance(m.g_hidden, list) or not m.g_hidden or not all(_is_int(w) and w > 0 for w in m.g_hidden):
        p.append(f"model.g_hidden: must be a nonempty list of positive ints, got {m.g_hidden!r}")
    if not isinstance(m.d_hidden, list) or not all(_is_int(w) and w > 0 for w in m.d_hidden):
        p.append(f"model.d_hidden: must be a list of positive ints, got {m.d_hidden!r}")

    t = cfg.training
    for name in ("epochs", "batch_size", "kmeans_max_iter"):
        v = getattr(t, name)
        if not _is_int(v) or v < 1:
            p.append(f"training.{name}: must be a positive integer, got {v!r}")
    if not _is_int(t.checkpoint_every) or t.checkpoint_every < 0:
        p.append(f"training.checkpoint_every: must be a nonnegative integer, got {t.checkpoint_every!r}")
    if not _is_num(t.lr0) or t.lr0 <= 0:
        p.append(f"training.lr0: must be positive, got {t.lr0!r}")
    for name in ("alpha", "beta", "head_lr_mult", "disc_lr_mult", "kmeans_tol"):
        v = getattr(t, name)
        if not _is_num(v) or v < 0:
            p.append(f"training.{name}: must be a nonnegative number, got {v!r}")
    if not _is_num(t.momentum) or not 0 <= t.momentum < 1:
        p.append(f"training.momentum: must lie in [0, 1), got {t.momentum!r}")
    if not _is_num(t.lam) or t.lam < 0:
        p.append(f"training.lambda: must be >= 0, got {t.lam!r}")
    if not _is_num(t.noise_level) or not 0 <= t.noise_level <= 1:
        p.append(f"training.noise_level: must lie in [0, 1], got {t.noise_level!r}")
    if t.ablation not in ABLATIONS:
        p.append(f"training.ablation: {t.ablation!r} is not one of {list(ABLATIONS)}")
    if t.predict_head not in PREDICT_HEADS:
        p.append(f"training.predict_head: {t.predict_head!r} is not one of {list(PREDICT_HEADS)}")
    if not isinstance(t.flow_through, bool):
        p.append(f"training.flow_through: must be true or false, got {t.flow_through!r}")

    o = cfg.output
    if not isinstance(o.directory, str) or not o.directory:
        p.append("output.directory: must be a nonempty path")
    if not isinstance(o.formats, list) or any(f not in FORMATS for f in o.formats):
        p.append(f"output.formats: must be a list drawn from {list(FORMATS)}, got {o.formats!r}")
    if p:
        raise ConfigError(p)


def to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def to_text(cfg: ExperimentConfig) -> str:
    lines = [f"seed = {_format_value(cfg.seed)}"]
    for section in ("dataset", "model", "training", "output"):
        block = getattr(cfg, section)
        for f in dataclasses.fields(block):
            value = getattr(block, f.name)
            if section == "dataset" and f.name == "params":
                for k in sorted(value):
                    lines.append(f"dataset.{k} = {_format_value(value[k])}")
                continue
            key = _REVERSE_ALIASES.get(f.name, f.name) if section == "training" else f.name
            lines.append(f"{section}.{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> ExperimentConfig:
    return from_dict(parse_text(text))


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"config: cannot read {path}: {e.strerror}") from e
    return loads(text)


def dump(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(to_text(cfg))
