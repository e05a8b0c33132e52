"""Run configuration: model, data, train and gradcheck sections plus a top-level seed.

Files are TOML (``.toml``) or JSON (anything else). Every field has a
default; unknown keys are rejected by dotted name. ``--set`` overrides use
the same dotted names and parse their value as JSON, falling back to a bare
string (``--set model.stream=C->B``).
"""
from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import DataConfig
from .dbmf import StreamMode
from .m3a import AdapterSpec, default_adapters
from .model import ModelConfig
from .nn import ConfigError
from .train import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class ModelSection:
    """ModelConfig minus the fields that are fixed by the data section."""

    model_dim: int = 64
    heads: int = 4
    n_transformer_blocks: int = 8
    n_cnn_blocks: int = 4
    cnn_channels: list[int] = field(default_factory=lambda: [16, 32, 32, 64])
    cnn_pool: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    adapters: list[dict] = field(default_factory=lambda: [dataclasses.asdict(a) for a in default_adapters()])
    ffn_hidden: int | None = None
    dbmf_dim: int | None = None
    dbmf_heads: int | None = None
    stream: str = "B_to_C"
    fusion: bool = True
    dropout: float = 0.0


@dataclass
class GradcheckSection:
    model_dim: int = 16
    heads: int = 2
    t: int = 16
    f_in: int = 8
    batch: int = 1
    cnn_channels: int = 4
    n_classes_hard: int = 2
    n_classes_soft: int = 2
    stream: str = "Bidirectional"
    h: float = 1e-5
    tol: float = 1e-4
    max_entries: int | None = None


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            f_in=self.data.f_in,
            model_dim=m.model_dim,
            heads=m.heads,
            n_transformer_blocks=m.n_transformer_blocks,
            n_cnn_blocks=m.n_cnn_blocks,
            cnn_channels=list(m.cnn_channels),
            cnn_pool=list(m.cnn_pool),
            n_classes_hard=self.data.n_classes_hard,
            n_classes_soft=self.data.n_classes_soft,
            adapters=[AdapterSpec(**a) for a in m.adapters],
            ffn_hidden=m.ffn_hidden,
            dbmf_dim=m.dbmf_dim,
            dbmf_heads=m.dbmf_heads,
            stream=StreamMode.parse(m.stream),
            fusion=m.fusion,
            dropout=m.dropout,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_SECTIONS = {"model": ModelSection, "data": DataConfig, "train": TrainConfig, "gradcheck": GradcheckSection}


def _build(cls, values: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key '{where}.{key}'")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in section '{where}': {exc}") from None


def from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    for key in doc:
        if key != "seed" and key not in _SECTIONS:
            raise ConfigError(f"unknown config key '{key}'")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    sections = {}
    for name, cls in _SECTIONS.items():
        values = doc.get(name, {})
        if not isinstance(values, dict):
            raise ConfigError(f"config section '{name}' must be a table")
        sections[name] = _build(cls, values, name)
    cfg = RunConfig(seed=seed, **sections)
    cfg.model_config()  # validates the combined model plan
    return cfg


def load_document(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    try:
        if p.suffix == ".toml":
            return tomllib.loads(text)
        return json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from None


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, _, raw = assignment.partition("=")
    parts = key.strip().split(".")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: '{part}' is not a section")
    node[parts[-1]] = parse_value(raw)


def resolve(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    doc = load_document(path) if path is not None else {}
    for item in overrides:
        apply_override(doc, item)
    if seed is not None:
        doc["seed"] = seed
    return from_dict(doc)


def diff(a: dict, b: dict, prefix: str = "") -> list[str]:
    """Dotted keys whose values differ between two nested dicts."""
    out = []
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            out.extend(diff(va, vb, f"{prefix}{key}."))
        elif va != vb:
            out.append(f"{prefix}{key}: {va!r} != {vb!r}")
    return out
