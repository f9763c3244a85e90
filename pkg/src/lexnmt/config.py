"""Experiment configuration files.

A run is described by an INI file with four flat sections; every key has a
default, unknown sections or keys are errors::

    [data]
    train_src = train.src
    train_tgt = train.tgt
    dev_src = dev.src
    dev_tgt = dev.tgt
    out_dir = run
    min_count = 5
    max_len = 50

    [model]
    variant = fixnorm_lex
    hidden_size = 512
    num_layers = 2

    [train]
    epochs = 50
    batch_size = 32

    [beam]
    beam_size = 12
    alpha = 0.8
"""

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, field

from .infer import BeamConfig
from .model import DEFAULT_RADIUS, VARIANTS, ModelConfig
from .train import TrainConfig

CONFIG_ENV = "LEXNMT_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train_src: str = None
    train_tgt: str = None
    dev_src: str = None
    dev_tgt: str = None
    src_vocab: str = None
    tgt_vocab: str = None
    out_dir: str = "run"
    min_count: int = 5
    max_len: int = 50
    augment_singleton_unk: bool = False


@dataclass
class ModelOptions:
    variant: str = "fixnorm_lex"
    hidden_size: int = 512
    num_layers: int = 2
    radius: float = None  # 5 for fixnorm, 3.5 for fixnorm_lex
    dropout: float = 0.2
    lex_hidden_bias: bool = False
    normalize_htilde: bool = True
    dtype: str = "float64"

    def build(self, src_vocab_size, tgt_vocab_size):
        return ModelConfig(src_vocab_size, tgt_vocab_size, **dataclasses.asdict(self))


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelOptions = field(default_factory=ModelOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    beam: BeamConfig = field(default_factory=BeamConfig)

    def validate(self):
        m = self.model
        if m.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {m.variant!r}; choose from {', '.join(VARIANTS)}")
        if m.variant in DEFAULT_RADIUS:
            if m.radius is None:
                m.radius = DEFAULT_RADIUS[m.variant]
            if m.radius <= 0:
                raise ConfigError(f"radius must be positive, got {m.radius}")
        elif m.radius is not None:
            raise ConfigError(f"radius r={m.radius} given but variant {m.variant!r} does not normalize")
        if not m.normalize_htilde and m.variant not in DEFAULT_RADIUS:
            raise ConfigError("normalize_htilde = false only applies to fixnorm variants")
        if not 0 <= m.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {m.dropout}")
        try:
            self.train = TrainConfig(**dataclasses.asdict(self.train))
            self.beam = BeamConfig(**dataclasses.asdict(self.beam))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


SECTIONS = {"data": DataConfig, "model": ModelOptions, "train": TrainConfig, "beam": BeamConfig}


def _field_type(cls, name):
    hints = typing.get_type_hints(cls)
    return hints[name]


def _parse(value, kind, where):
    try:
        if kind is bool:
            lowered = value.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if value.strip().lower() in ("", "none"):
            return None
        return kind(value)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r} as {kind.__name__}") from None


def set_option(section_obj, key, raw, where):
    names = {f.name for f in dataclasses.fields(section_obj)}
    if key not in names:
        raise ConfigError(f"{where}: unknown key {key!r}")
    kind = _field_type(type(section_obj), key)
    setattr(section_obj, key, raw if not isinstance(raw, str) else _parse(raw, kind, where))


def load_config(path=None):
    """Read a run configuration; ``path`` falls back to ``$LEXNMT_CONFIG``."""
    path = path or os.environ.get(CONFIG_ENV)
    run = RunConfig()
    if not path:
        return run
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        target = getattr(run, section)
        for key, value in parser.items(section):
            set_option(target, key, value, f"{path} [{section}]")
    return run


def dump_config(run):
    parser = configparser.ConfigParser(interpolation=None)
    for name in SECTIONS:
        obj = getattr(run, name)
        parser[name] = {k: "" if v is None else str(v) for k, v in dataclasses.asdict(obj).items()}
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in parser[name].items())
        lines.append("")
    return "\n".join(lines)
