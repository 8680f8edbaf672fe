"""INI run configuration and run manifests.

Sections and keys mirror the dataclass fields::

    [model]    preset = full | desk, then any ModelConfig field
    [train]    TrainConfig fields (max_epochs = none for no cap)
    [augment]  AugmentPolicy fields
    [predict]  PredictionConfig fields

Tuples are comma-separated. Every key is checked before any work starts.
"""
import configparser
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import AugmentPolicy
from .errors import ConfigurationError
from .inference import PredictionConfig
from .model import ModelConfig
from .trainer import TrainConfig

PRESETS = {"full": ModelConfig, "desk": ModelConfig.desk}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    predict: PredictionConfig = field(default_factory=PredictionConfig)
    preset: str = "full"

    def validate(self):
        self.model.validate()
        self.train.validate()
        self.predict.validate()
        return self

    def to_dict(self):
        train = self.train.to_dict()
        augment = train.pop("augment")
        return {"preset": self.preset, "model": self.model.to_dict(), "train": train,
                "augment": augment, "predict": self.predict.to_dict()}


def _parse_value(section, key, text, default):
    where = f"{section}.{key} = {text!r}"
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in text.split(",") if v.strip())
        if default is None or isinstance(default, int):
            if text.lower() in ("", "none"):
                if default is None:
                    return None
                raise ValueError
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        kind = "boolean" if isinstance(default, bool) else type(default).__name__ if default is not None else "int or none"
        raise ConfigurationError(f"{where}: expected {kind}") from None


def _apply(section, obj, items):
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for key, text in items:
        if key not in known or key == "augment":
            allowed = ", ".join(k for k in known if k != "augment")
            raise ConfigurationError(f"unknown key [{section}] {key}; allowed: {allowed}")
        changes[key] = _parse_value(section, key, text, getattr(obj, key))
    return replace(obj, **changes)


def parse_config(text, source="<string>"):
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__",
                                   inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(f"{source}: {exc}") from None
    unknown = set(cp.sections()) - {"model", "train", "augment", "predict"}
    if unknown:
        raise ConfigurationError(f"unknown section(s) {sorted(unknown)}; allowed: model, train, augment, predict")

    model_items = dict(cp.items("model")) if cp.has_section("model") else {}
    preset = model_items.pop("preset", "full").strip()
    if preset not in PRESETS:
        raise ConfigurationError(f"model.preset = {preset!r}: allowed values are {sorted(PRESETS)}")
    model = _apply("model", PRESETS[preset](), model_items.items())
    augment = _apply("augment", AugmentPolicy(), cp.items("augment") if cp.has_section("augment") else [])
    train = _apply("train", TrainConfig(augment=augment), cp.items("train") if cp.has_section("train") else [])
    predict = _apply("predict", PredictionConfig(), cp.items("predict") if cp.has_section("predict") else [])
    return RunConfig(model, train, predict, preset).validate()


def load_config(path):
    if path is None:
        return RunConfig().validate()
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file {p} not found")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def content_hash(obj):
    """git blob hash of the canonical JSON encoding."""
    raw = canonical_json(obj).encode("ascii")
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict

    @property
    def config_hash(self):
        return content_hash(self.config)

    def to_dict(self):
        return {"command": self.command, "config": self.config, "config_hash": self.config_hash,
                "seed": self.seed, "inputs": self.inputs}

    def write(self, out_dir):
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path
