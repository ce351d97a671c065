"""Plain-text experiment files: ``[model]``, ``[placement]``, ``[train]``, ``[data]``.

Keys mirror the dataclass field names.  ``[model]`` may name a ``preset``,
which expands first; every other key then overrides it.  Rendering always
writes the fully expanded form, so ``parse(render(x)) == x``.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from lpa.config import ConfigError, ModelConfig, get_preset, model_fields, model_from_fields
from lpa.training import TRAIN_FIELDS, TrainConfig

SECTIONS = ("model", "placement", "train", "data")
DATA_KEYS = ("path", "split")
DEFAULT_SPLIT = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class DataSpec:
    path: str | None = None
    split: tuple = DEFAULT_SPLIT


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSpec = field(default_factory=DataSpec)

    def validate(self):
        self.model.validate()
        self.train.validate()
        return self


def _parse_train(items, base: TrainConfig):
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    changes = {}
    for key, text in items.items():
        if key not in TRAIN_FIELDS:
            raise ConfigError(f"unknown [train] key {key!r}")
        kind = types[key]
        try:
            if kind in (int, "int"):
                changes[key] = int(text)
            elif kind in (float, "float"):
                changes[key] = float(text)
            else:
                changes[key] = text.strip()
        except ValueError:
            raise ConfigError(f"[train] {key} must be {kind}, got {text!r}") from None
    return dataclasses.replace(base, **changes)


def _parse_split(text):
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"[data] split must be comma-separated numbers, got {text!r}") from None
    if len(parts) != 3 or abs(sum(parts) - 1.0) > 1e-9:
        raise ConfigError(f"[data] split must be three fractions summing to 1, got {text!r}")
    return parts


def parse(text, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file: {exc}") from exc
    unknown = [s for s in cp.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown section(s) {unknown}; expected {SECTIONS}")
    base = base or ExperimentConfig()

    model_items = dict(cp["model"]) if cp.has_section("model") else {}
    model = base.model
    if "preset" in model_items:
        model = get_preset(model_items.pop("preset").strip())
    fields_ = dict(model_items)
    if cp.has_section("placement"):
        for k, v in cp["placement"].items():
            fields_[f"placement.{k}"] = v
    model = model_from_fields(fields_, model)

    train = base.train
    if cp.has_section("train"):
        train = _parse_train(dict(cp["train"]), train)

    data = base.data
    if cp.has_section("data"):
        items = dict(cp["data"])
        bad = [k for k in items if k not in DATA_KEYS]
        if bad:
            raise ConfigError(f"unknown [data] key(s) {bad}")
        path = items.get("path", data.path)
        if path is not None and path.strip().lower() in ("", "none"):
            path = None
        split = _parse_split(items["split"]) if "split" in items else data.split
        data = DataSpec(path, split)
    return ExperimentConfig(model, train, data)


def render(cfg: ExperimentConfig) -> str:
    flat = model_fields(cfg.model)
    lines = ["[model]"]
    lines += [f"{k} = {v}" for k, v in flat.items() if not k.startswith("placement.")]
    lines += ["", "[placement]"]
    lines += [f"{k.split('.', 1)[1]} = {v}" for k, v in flat.items() if k.startswith("placement.")]
    lines += ["", "[train]"]
    lines += [f"{k} = {getattr(cfg.train, k)!r}" if isinstance(getattr(cfg.train, k), float)
              else f"{k} = {getattr(cfg.train, k)}" for k in TRAIN_FIELDS]
    lines += ["", "[data]", f"path = {cfg.data.path or 'none'}",
              "split = " + ",".join(repr(float(x)) for x in cfg.data.split), ""]
    return "\n".join(lines)


def load(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc


def save(cfg: ExperimentConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render(cfg))
