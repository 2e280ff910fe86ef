"""Run configuration: one strict JSON document with vit/train/data/task/output sections."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .synth import DatasetSpec, SlideParams, TextureSpec
from .trainer import TrainConfig
from .vit import ViTConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    root: str = "data/synthetic"
    n_train: int = 200
    n_val: int = 25
    n_test: int = 25
    prior: float = 0.5
    magnification_fraction: float = 0.3
    slide: SlideParams = field(default_factory=SlideParams)
    textures: list[TextureSpec] | None = None


@dataclass
class TaskSection:
    kind: str = "binary"
    class_names: list[str] | None = None
    prevalences: list[float] | None = None

    def __post_init__(self):
        if self.kind not in ("binary", "multilabel"):
            raise ConfigError(f"task.kind must be 'binary' or 'multilabel', got {self.kind!r}")


@dataclass
class OutputSection:
    run_dir: str = "runs/default"
    log_steps: bool = True


@dataclass
class RunConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=DataSection)
    task: TaskSection = field(default_factory=TaskSection)
    output: OutputSection = field(default_factory=OutputSection)

    def dataset_spec(self) -> DatasetSpec:
        d, t = self.data, self.task
        kw = dict(n_train=d.n_train, n_val=d.n_val, n_test=d.n_test, prior=d.prior,
                  magnification_fraction=d.magnification_fraction, slide=d.slide,
                  textures=tuple(d.textures) if d.textures else None)
        if t.class_names:
            kw["class_names"] = tuple(t.class_names)
        if t.prevalences:
            kw["prevalences"] = tuple(t.prevalences)
        if t.kind == "multilabel":
            return DatasetSpec.multilabel(**kw)
        return DatasetSpec(**kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_NESTED = {
    (DataSection, "slide"): SlideParams,
    (DataSection, "textures"): TextureSpec,
}


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key {where}.{unknown[0]}")
    kw = {}
    for key, value in raw.items():
        sub = _NESTED.get((cls, key))
        if sub is not None and value is not None:
            if isinstance(value, list):
                value = [_build(sub, v, f"{where}.{key}[{i}]") for i, v in enumerate(value)]
            else:
                value = _build(sub, value, f"{where}.{key}")
        kw[key] = value
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


_SECTIONS = {"vit": ViTConfig, "train": TrainConfig, "data": DataSection, "task": TaskSection,
             "output": OutputSection}


def parse_config(doc: dict) -> RunConfig:
    """Strict parse; any key not in the schema raises :class:`ConfigError` naming it."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]}")
    sections = {name: _build(cls, doc.get(name, {}), name) for name, cls in _SECTIONS.items()}
    train_raw = doc.get("train", {})
    if "task" in train_raw and train_raw["task"] != sections["task"].kind:
        raise ConfigError(f"train.task={train_raw['task']!r} disagrees with task.kind={sections['task'].kind!r}")
    sections["train"] = dataclasses.replace(sections["train"], task=sections["task"].kind)
    return RunConfig(**sections)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
