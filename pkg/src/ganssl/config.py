"""Experiment configuration.

Config files are INI-style: ``[section]`` headers with ``key = value`` lines.
Every key is addressable as ``section.key`` for command-line overrides. Unknown
sections or keys are errors.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from typing import Optional


class ConfigError(ValueError):
    pass


MODELS = ("badgan", "goodgan", "supervised-baseline")


@dataclass
class ExperimentSection:
    model: str = "badgan"
    dataset: str = "mnist"
    output_dir: str = "runs"
    run_id: str = ""


@dataclass
class DataSection:
    data_dir: str = ""
    allow_download: bool = False
    labeled_count: int = 100
    selection: str = "stratified"
    fixed_split: bool = False
    reserve_validation: bool = False
    use_validation: bool = False
    split_sizes: tuple = ()
    zca: str = "auto"
    zca_epsilon: float = 1e-2
    synthetic_classes: int = 4
    synthetic_n_per_class: int = 504
    synthetic_noise: float = 0.1
    synthetic_test_per_class: int = 1000
    synthetic_seed: int = 1234
    rasterize: bool = False


@dataclass
class TrainSection:
    batch_size: int = 100
    epochs: int = 100
    seed: int = 0
    warmup_threshold: int = 200
    eval_interval: int = 5
    checkpoint_interval: int = 10
    z_dim: int = 100


@dataclass
class ModelSection:
    input_noise: Optional[float] = None
    hidden_noise: Optional[float] = None
    lrelu_slope: float = 0.2
    toy_hidden: tuple = (128, 128)


@dataclass
class OptimSection:
    lr: float = 3e-4
    beta1: float = 0.5
    beta2: float = 0.999


@dataclass
class LossSection:
    fm_weight: float = 1.0
    proxy_weight: float = 0.1
    density_weight: float = 0.01
    alpha: float = 0.5
    reinforce_weight: float = 0.01
    pseudo_weight: float = 0.1
    baseline_decay: float = 0.99
    pseudo_pairs_as_real: bool = False


@dataclass
class DensitySection:
    kind: str = "kde-feature"
    # 0 selects the median pairwise-distance heuristic
    bandwidth: float = 0.0
    percentile: float = 10.0
    max_reference: int = 2000
    pretrain_steps: int = 300


@dataclass
class SweepSection:
    name: str = ""
    axis: str = "batch_size"
    values: tuple = ()
    seeds: tuple = (0, 1, 2, 3, 4, 5, 6, 7, 8, 9)
    parallel: int = 1


@dataclass
class TrainConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimSection = field(default_factory=OptimSection)
    loss: LossSection = field(default_factory=LossSection)
    density: DensitySection = field(default_factory=DensitySection)
    sweep: SweepSection = field(default_factory=SweepSection)

    # -- access -----------------------------------------------------------
    def get(self, dotted: str):
        section, key = _split(dotted)
        return getattr(getattr(self, section), key)

    def set(self, dotted: str, raw) -> None:
        section, key = _split(dotted)
        sec = getattr(self, section, None)
        if sec is None or section not in _sections():
            raise ConfigError(f"unknown config section {section!r}")
        hints = typing.get_type_hints(type(sec))
        if key not in hints:
            raise ConfigError(f"unknown config key {dotted!r}")
        setattr(sec, key, _coerce(raw, hints[key], dotted))

    def with_values(self, values: dict) -> "TrainConfig":
        new = TrainConfig.from_dict(self.to_dict())
        for k, v in values.items():
            new.set(k, v)
        new.validate()
        return new

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        return {name: _jsonable(dataclasses.asdict(getattr(self, name))) for name in _sections()}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        cfg = cls()
        for section, values in data.items():
            for key, value in values.items():
                cfg.set(f"{section}.{key}", value)
        return cfg

    def dumps(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                lines.append(f"{key} = {_format(value)}")
            lines.append("")
        return "\n".join(lines)

    def fingerprint(self) -> str:
        """Hash of everything except output location and run id."""
        data = self.to_dict()
        data["experiment"] = {k: v for k, v in data["experiment"].items() if k not in ("output_dir", "run_id")}
        data.pop("sweep")
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:8]

    def resolved_run_id(self) -> str:
        if self.experiment.run_id:
            return self.experiment.run_id
        e, t = self.experiment, self.train
        return (f"{e.model}_{e.dataset}_n{self.data.labeled_count}_b{t.batch_size}"
                f"_s{t.seed}_{self.fingerprint()}")

    # -- validation -----------------------------------------------------------
    def validate(self) -> "TrainConfig":
        from .datasets import DATASET_NAMES
        from .density import KINDS

        e, d, t = self.experiment, self.data, self.train
        if e.model not in MODELS:
            raise ConfigError(f"experiment.model must be one of {MODELS}, got {e.model!r}")
        if e.dataset not in DATASET_NAMES:
            raise ConfigError(f"experiment.dataset must be one of {DATASET_NAMES}, got {e.dataset!r}")
        if d.selection not in ("stratified", "representative"):
            raise ConfigError("data.selection must be stratified or representative")
        if d.zca not in ("auto", "on", "off"):
            raise ConfigError("data.zca must be auto, on or off")
        if d.split_sizes and len(d.split_sizes) != 3:
            raise ConfigError("data.split_sizes needs three counts: train, validation, test")
        for key in ("batch_size", "epochs", "eval_interval", "z_dim"):
            if getattr(t, key) < 1:
                raise ConfigError(f"train.{key} must be >= 1")
        if not 0 <= self.loss.alpha <= 1:
            raise ConfigError("loss.alpha must lie in [0, 1]")
        if self.density.kind not in KINDS:
            raise ConfigError(f"density.kind must be one of {KINDS}")
        if self.sweep.axis not in ("labeled_count", "batch_size"):
            raise ConfigError("sweep.axis must be labeled_count or batch_size")
        return self


def _sections():
    return [f.name for f in dataclasses.fields(TrainConfig)]


def _split(dotted: str):
    if dotted.count(".") != 1:
        raise ConfigError(f"config keys look like section.key, got {dotted!r}")
    return dotted.split(".")


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(raw, hint, name):
    if not isinstance(raw, str):
        if hint is tuple:
            return tuple(raw)
        if typing.get_origin(hint) is typing.Union and raw is None:
            return None
        return raw
    text = raw.strip()
    try:
        if hint is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is tuple:
            return tuple(_number(p.strip()) for p in text.split(",") if p.strip())
        if typing.get_origin(hint) is typing.Union:
            if text.lower() in ("", "none", "default"):
                return None
            inner = [a for a in typing.get_args(hint) if a is not type(None)][0]
            return _coerce(text, inner, name)
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {name} = {raw!r} as {getattr(hint, '__name__', hint)}") from None


def _number(text):
    try:
        return int(text)
    except ValueError:
        return float(text)


def _jsonable(values: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in values.items()}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ", ".join(str(v) for v in value)
    return str(value)


def parse_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def load_config(path=None, overrides=()) -> TrainConfig:
    """Parse ``path`` (optional), apply ``section.key=value`` overrides in order, validate."""
    cfg = TrainConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as err:
            raise ConfigError(f"{path}: {err}") from err
        for section in parser.sections():
            if section not in _sections():
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, value in parser.items(section):
                cfg.set(f"{section}.{key}", value)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        cfg.set(key, value)
    return cfg.validate()


def describe_keys() -> str:
    """Every config key with its default, one per line."""
    lines = []
    for section, values in TrainConfig().to_dict().items():
        for key, value in values.items():
            lines.append(f"  {section}.{key} = {_format(value)}")
    return "\n".join(lines)
