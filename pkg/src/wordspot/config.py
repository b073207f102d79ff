"""Run configuration: one TOML (or JSON) file with a section per stage.

Every tunable decision lives under a named key; missing keys keep their
defaults.  ``desk_config()`` is the preset used for CPU-scale runs on the
synthetic corpus.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .net.model import default_arch
from .net.train import TileConfig, TrainConfig
from .phoc import PhocConfig
from .synth import SynthSpec


class ConfigError(ValueError):
    pass


@dataclass
class ImagingConfig:
    threshold_factor: float = 0.75
    core_density: float = 0.9
    window: int = 15
    min_frac: float = 0.5
    overlap_frac: float = 0.5


@dataclass
class ProposalConfig:
    P: int = 8
    Q: int = 4
    max_run: int = 8
    iou_pos: float = 0.5
    iou_neg: float = 0.2
    reg: float = 1e-4
    epochs: int = 50
    lr: float = 0.1
    batch_size: int = 64  # 0 means full batch
    balanced: bool = True
    threshold: float = 0.0


@dataclass
class RetrievalConfig:
    metric: str = "cosine"
    iou_thr: float = 0.5
    exclude_self: bool = False
    long_word_min: int = 6

    def __post_init__(self):
        if self.metric not in ("cosine", "euclidean"):
            raise ConfigError(f"unknown metric {self.metric!r}")


@dataclass
class FoldConfig:
    bins: int = 4
    seed: int = 0


@dataclass
class Config:
    phoc: PhocConfig = field(default_factory=PhocConfig)
    imaging: ImagingConfig = field(default_factory=ImagingConfig)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    arch: dict = field(default_factory=default_arch)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: TileConfig = field(default_factory=TileConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    folds: FoldConfig = field(default_factory=FoldConfig)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "phoc":
                out[f.name] = v.to_dict()
            elif f.name == "arch":
                out[f.name] = {k: copy.deepcopy(x) for k, x in v.items()
                               if k not in ("out_dim", "phoc_hash", "input_mean")}
            else:
                out[f.name] = _plain(asdict(v))
        return out


def _plain(d):
    if isinstance(d, dict):
        return {k: _plain(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_plain(v) for v in d]
    return d


_SECTIONS = {
    "imaging": ImagingConfig,
    "proposals": ProposalConfig,
    "train": TrainConfig,
    "inference": TileConfig,
    "retrieval": RetrievalConfig,
    "synth": SynthSpec,
    "folds": FoldConfig,
}

_ARCH_KEYS = {"in_channels", "trunk", "roi_grid", "head"}


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def config_from_dict(d: dict, base: Config | None = None) -> Config:
    """Overlay ``d`` (sections of key/value pairs) on ``base`` (default: built-in defaults)."""
    base = base or Config()
    extra = set(d) - set(_SECTIONS) - {"phoc", "arch"}
    if extra:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(extra))}")
    plain = base.to_dict()
    kwargs = {}
    for name, cls in _SECTIONS.items():
        values = dict(plain[name])
        values.update(d.get(name, {}))
        kwargs[name] = _build(cls, values, name)
    phoc = dict(plain["phoc"])
    phoc.update(d.get("phoc", {}))
    try:
        kwargs["phoc"] = PhocConfig.from_dict(phoc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[phoc] {exc}") from exc
    arch = copy.deepcopy(base.arch)
    given = d.get("arch", {})
    unknown = set(given) - _ARCH_KEYS
    if unknown:
        raise ConfigError(f"[arch] unknown keys: {', '.join(sorted(unknown))}")
    arch.update(copy.deepcopy(given))
    kwargs["arch"] = arch
    return Config(**kwargs)


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text)
        return tomllib.loads(text.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path=None, base: Config | None = None) -> Config:
    if path is None:
        return base or Config()
    return config_from_dict(read_config_file(path), base)


DESK_OVERRIDES = {
    "train": {
        "lr0": 1e-3,
        "iterations": 3000,
        "optimizer": "adam",
        # Small training tiles keep one step at a fraction of a second on one core.
        "tile_w": 256,
        "tile_h": 128,
        "tile_overlap": 96,
    },
}


def desk_config() -> Config:
    """Preset for CPU-scale runs on the synthetic corpus."""
    return config_from_dict(DESK_OVERRIDES)
