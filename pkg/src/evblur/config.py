"""Run configuration: nested dataclasses loaded from YAML with unknown keys rejected."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

CONFIG_ENV = "EVBLUR_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    width: int = 64
    height: int = 64
    n_source: int = 40
    n_target: int = 40
    n_test: int = 20
    frames_per_sequence: int = 4
    min_figures: int = 1
    max_figures: int = 3
    contrast_threshold: float = 0.2
    delta_tau: int = 1200  # microseconds
    n_e: int = 5
    exposure: int = 13200  # microseconds; (2 * n_e + 1) * delta_tau by default
    emission_oversample: int = 8  # emission grid steps per delta_tau
    oracle_samples: int = 64
    duration: int = 60000


@dataclass
class FlowConfig:
    block_size: int = 16
    search_radius: int = 8  # corpus motion stays below 8 px per cumulative slice
    refine_steps: int = 20
    min_events: int = 8


@dataclass
class BlurConfig:
    epsilon: float = 1e-6
    coverage_floor: float = 0.25
    hole_fill: str | None = None


@dataclass
class PoseConfig:
    sigma: float = 2.0
    max_centers: int = 30
    center_threshold: float = 0.03
    nms_oks_threshold: float = 0.5
    local_max_window: int = 3
    kappa: float = 0.08


@dataclass
class MaskConfig:
    th: float = 0.1
    th_mutual: float = 0.1
    near_side: int = 8
    background_value: float = 0.1
    gate_offsets: bool = False


@dataclass
class TrainConfig:
    window_radius: int = 3
    feature_sigmas: list = field(default_factory=lambda: [2.0, 4.0])
    lambda_g: float = 0.03
    lr: float = 50.0
    epochs_stage1: int = 24
    epochs_adapt: int = 12
    init_scale: float = 1e-3
    validate_every: int = 6  # epochs between test-split mAP checks in the metrics log
    stage1_masks: str = "support"  # "support", "unit" or "gt"; see stages.source_masks


@dataclass
class RunConfig:
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    corpus_dir: str = "runs/corpus"
    out_dir: str = "runs/out"
    jobs: int = 0  # 0 means all available cores
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    blur: BlurConfig = field(default_factory=BlurConfig)
    pose: PoseConfig = field(default_factory=PoseConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value or {}, path)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def load_config(path: str | Path | None = None) -> RunConfig:
    """Load ``path``, else the file named by ``EVBLUR_CONFIG``, else defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return from_dict(data)


def override(cfg: RunConfig, dotted: dict[str, Any]) -> RunConfig:
    """Copy of ``cfg`` with dotted-key overrides such as ``{"mask.th": 0.2}``."""
    data = cfg.to_dict()
    for key, value in dotted.items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config section {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return from_dict(data)
