"""Run configuration: one YAML document with strict keys.

Top-level sections are ``data``, ``generator``, ``contrastive``, ``encoder``,
``segmentation`` and ``eval``, plus ``seed`` and ``out_dir``. The top-level seed
is authoritative: resolving a config copies it into every stage's ``seed``.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .contrastive import ContrastiveConfig
from .encoder import EncoderConfig
from .generator import GeneratorConfig
from .retarget import TrainConfig
from .segmentation import FinetuneConfig, ProbeConfig, WindowConfig
from .synth import RetargetDataConfig, TrimmedDataConfig, UntrimmedDataConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    retarget: RetargetDataConfig = field(default_factory=RetargetDataConfig)
    trimmed: TrimmedDataConfig = field(default_factory=TrimmedDataConfig)
    untrimmed: UntrimmedDataConfig = field(default_factory=UntrimmedDataConfig)


@dataclass
class GeneratorSection:
    model: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class SegmentationSection:
    window: WindowConfig = field(default_factory=WindowConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)


@dataclass
class EvalSection:
    metric: str = "frame-map"
    iou_thresholds: list[float] = field(default_factory=lambda: [0.1, 0.3, 0.5])
    event_threshold: float = 0.5
    max_pairs: int = 4000


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    segmentation: SegmentationSection = field(default_factory=SegmentationSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0
    out_dir: str = "runs"

    def resolved(self) -> "RunConfig":
        """Copy with the top-level seed pushed into every stage."""
        cfg = from_dict(to_dict(self))
        for sub in (cfg.data.retarget, cfg.data.trimmed, cfg.data.untrimmed, cfg.generator.train,
                    cfg.contrastive, cfg.segmentation.finetune, cfg.segmentation.probe):
            sub.seed = cfg.seed
        return cfg


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def _build(cls, doc, path: str):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(doc).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown key {'.'.join(filter(None, [path, str(unknown[0])]))!r}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in doc:
            continue
        key = ".".join(filter(None, [path, f.name]))
        hint = hints[f.name]
        value = doc[f.name]
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, value, key)
        elif typing.get_origin(hint) is tuple and isinstance(value, list):
            kwargs[f.name] = tuple(value)
        else:
            kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(doc: dict) -> RunConfig:
    return _build(RunConfig, doc, "")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return from_dict(doc or {})


def dump_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
    return path
