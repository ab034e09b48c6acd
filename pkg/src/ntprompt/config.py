"""Run configuration: one YAML file, validated before any work starts.

Schema (every section optional, unknown keys are an error)::

    seed: 0                  # drives data split, scenario generation and training
    output_dir: runs/demo
    workers: 1
    protect: true            # false -> baseline-only run, protected model = baseline
    data:
      source: toy            # toy | folder
      root: null             # folder source: root/domain/class/image
      styles: [clean, sketch]
      n_per_class: 250       # toy source
      image_size: 32
      test_fraction: 0.2
      seed: null             # toy rendering seed, defaults to the run seed
    scenario:  {mode, authorized, unauthorized, test, n_aug, watermark: {patch_size, position, seed}}
    backbone:  {kind, M, C, d_t, seed, in_channels, layer_dims}
    train:     {epochs, batch_size, lr, lambda1, lambda2, tau, cap_scale, cap_m, k_shots, ...}

``NTPROMPT_OUTPUT_DIR`` and ``NTPROMPT_WORKERS`` override ``output_dir`` and
``workers``; nothing else is read from the environment.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ntprompt.backbone import BackboneSpec
from ntprompt.errors import ConfigError
from ntprompt.scenarios import ScenarioSpec, WatermarkSpec
from ntprompt.trainer import TrainConfig

ENV_OUTPUT_DIR = "NTPROMPT_OUTPUT_DIR"
ENV_WORKERS = "NTPROMPT_WORKERS"


@dataclass
class DataSpec:
    source: str = "toy"
    root: str | None = None
    styles: list = field(default_factory=lambda: ["clean", "sketch"])
    n_per_class: int = 250
    image_size: int = 32
    test_fraction: float = 0.2
    seed: int | None = None

    def __post_init__(self):
        if self.source not in ("toy", "folder"):
            raise ConfigError(f"data.source must be 'toy' or 'folder', got {self.source!r}")
        if self.source == "folder" and not self.root:
            raise ConfigError("data.source 'folder' needs data.root")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("data.test_fraction must be in (0, 1)")
        if self.n_per_class < 1 or self.image_size < 1:
            raise ConfigError("data.n_per_class and data.image_size must be positive")
        self.styles = list(self.styles)


@dataclass
class RunConfig:
    scenario: ScenarioSpec
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSpec = field(default_factory=DataSpec)
    output_dir: str = "runs/default"
    seed: int = 0
    workers: int = 1
    protect: bool = True

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        # one seed for the whole run
        self.train = dataclasses.replace(self.train, seed=self.seed)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["backbone"]["layer_dims"] = list(self.backbone.layer_dims)
        out["train"].pop("seed")
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _build(cls, section, values, exclude=()):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    allowed = _fields(cls) - set(exclude)
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}; allowed: {', '.join(sorted(allowed))}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad value in {section!r}: {exc}") from None


def parse_config(raw: dict, env=None) -> RunConfig:
    env = os.environ if env is None else env
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    raw = dict(raw)
    top = {"scenario", "backbone", "train", "data", "output_dir", "seed", "workers", "protect"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "scenario" not in raw:
        raise ConfigError("config needs a 'scenario' section")
    scen = dict(raw["scenario"] or {})
    if "watermark" in scen:
        scen["watermark"] = _build(WatermarkSpec, "scenario.watermark", scen["watermark"])
    backbone = dict(raw.get("backbone") or {})
    if "layer_dims" in backbone:
        backbone["layer_dims"] = tuple(backbone["layer_dims"])
    if ENV_OUTPUT_DIR in env:
        raw["output_dir"] = env[ENV_OUTPUT_DIR]
    if ENV_WORKERS in env:
        try:
            raw["workers"] = int(env[ENV_WORKERS])
        except ValueError:
            raise ConfigError(f"{ENV_WORKERS} must be an integer, got {env[ENV_WORKERS]!r}") from None
    return RunConfig(
        scenario=_build(ScenarioSpec, "scenario", scen),
        backbone=_build(BackboneSpec, "backbone", backbone),
        train=_build(TrainConfig, "train", raw.get("train"), exclude=("seed",)),
        data=_build(DataSpec, "data", raw.get("data")),
        output_dir=str(raw.get("output_dir", "runs/default")),
        seed=int(raw.get("seed", 0)),
        workers=int(raw.get("workers", 1)),
        protect=bool(raw.get("protect", True)),
    )


def load_config(path, env=None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return parse_config(raw, env)
