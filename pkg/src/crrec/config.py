"""Sectioned INI run configuration with field-path validation.

Every field has a default; the resolved configuration (defaults included)
is written into each run's manifest.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .crr import CrrConfig
from .data import RewardSpec, SplitSpec
from .errors import ConfigError
from .pretrain import PretrainConfig

OUTPUT_ROOT_ENV = "CRREC_OUTPUT_ROOT"


@dataclass
class DataConfig:
    input: str = ""
    schema: str = "auto"
    window: int = 30
    reward_scheme: str = "auto"
    threshold: float = 3.5
    click_reward: float = 1.0
    purchase_reward: float = 3.0
    train_frac: float = 0.99
    valid_frac: float = 0.002
    test_frac: float = 0.008
    emit_cold_start: bool = True

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("must be >= 1", field="data.window")
        if self.schema not in ("auto", "ratings", "sessions"):
            raise ConfigError(f"unknown schema {self.schema!r}", field="data.schema")
        if self.reward_scheme not in ("auto", "rating", "event"):
            raise ConfigError(f"unknown scheme {self.reward_scheme!r}", field="data.reward_scheme")
        self.split_spec  # validates fractions

    def reward_spec(self, schema: str) -> RewardSpec:
        scheme = self.reward_scheme
        if scheme == "auto":
            scheme = "event" if schema == "sessions" else "rating"
        return RewardSpec(scheme, self.threshold,
                          {"purchase": self.purchase_reward, "click": self.click_reward})

    @property
    def split_spec(self) -> SplitSpec:
        try:
            return SplitSpec(self.train_frac, self.valid_frac, self.test_frac)
        except ConfigError as exc:
            msg = str(exc).split(": ", 1)[-1]
            raise ConfigError(msg, field="data.train_frac/valid_frac/test_frac") from None


@dataclass
class NetworkConfig:
    dim: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    head_layers: int = 1

    def __post_init__(self):
        if self.dim < 1 or self.n_heads < 1 or self.dim % self.n_heads:
            raise ConfigError(f"dim {self.dim} must be a positive multiple of n_heads {self.n_heads}",
                              field="network.dim")


@dataclass
class CriticConfig:
    hidden: int = 256
    n_layers: int = 2
    head_layers: int = 2
    dropout: float = 0.0

    def __post_init__(self):
        if self.hidden < 1 or self.n_layers < 1:
            raise ConfigError("hidden and n_layers must be >= 1", field="critic.hidden")


@dataclass
class RunSection:
    seed: int = 0
    threads: int = 1


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    crr: CrrConfig = field(default_factory=CrrConfig)
    run: RunSection = field(default_factory=RunSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}


def _coerce(raw: str, tp, path: str):
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        if raw.strip().lower() in ("", "none", "null"):
            return None
        tp = float
    try:
        if tp is bool or tp == "bool":
            val = raw.strip().lower()
            if val in ("1", "true", "yes", "on"):
                return True
            if val in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int or tp == "int":
            return int(raw)
        if tp is float or tp == "float":
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {getattr(tp, '__name__', tp)}", field=path) from None


def build_config(values: dict[str, dict[str, str]]) -> RunConfig:
    """Construct a RunConfig from ``{section: {key: raw string}}``."""
    sections = {}
    for name, factory in SECTIONS.items():
        cls = type(factory())
        hints = typing.get_type_hints(cls)
        known = {f.name for f in dataclasses.fields(cls) if f.init}
        kwargs = {}
        for key, raw in values.get(name, {}).items():
            if key not in known:
                raise ConfigError("unknown field", field=f"{name}.{key}")
            kwargs[key] = _coerce(raw, hints[key], f"{name}.{key}")
        sections[name] = cls(**kwargs)
    unknown = set(values) - set(SECTIONS)
    if unknown:
        raise ConfigError("unknown section", field=sorted(unknown)[0])
    return RunConfig(**sections)


def load_config(path=None, overrides=()) -> RunConfig:
    """Read an INI file (optional) and apply ``section.key=value`` overrides."""
    values: dict[str, dict[str, str]] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}", field="--config")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(p)
        except configparser.Error as exc:
            raise ConfigError(str(exc), field=str(p)) from None
        for sec in parser.sections():
            values[sec] = dict(parser[sec])
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}", field="--set")
        key, raw = item.split("=", 1)
        sec, name = key.split(".", 1)
        values.setdefault(sec, {})[name] = raw
    return build_config(values)


def write_config(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for sec, vals in cfg.to_dict().items():
        parser[sec] = {k: ("none" if v is None else str(v)) for k, v in vals.items()}
    with open(path, "w") as fh:
        parser.write(fh)


def git_blob_hash(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out_dir, command: str, cfg: RunConfig, inputs: dict[str, str]) -> Path:
    hashes = {}
    for name, p in inputs.items():
        p = Path(p)
        if p.is_dir():
            hashes[name] = {f.name: git_blob_hash(f) for f in sorted(p.iterdir()) if f.is_file()}
        elif p.exists():
            hashes[name] = git_blob_hash(p)
    manifest = {"command": command, "seed": cfg.run.seed, "config": cfg.to_dict(),
                "inputs": {k: str(v) for k, v in inputs.items()}, "input_hashes": hashes}
    path = Path(out_dir) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def resolve_output(path) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p
