"""Strict JSON run configuration.

Sections: ``model`` (required), ``train``, ``tta`` and ``data``. Unknown keys
anywhere are rejected. ``data`` holds either directory paths or a ``synth``
block::

    {"model": {"input_size": 64, "grid_size": 4, "channels": 32, "seed": 0},
     "train": {"epochs": 20, "seed": 0},
     "tta": {"k": 15, "theta": 0.2, "mask_patch_px": 4},
     "data": {"synth": {"n_per_class": 150, "image_size": 64, "seed": 3},
              "train_fraction": 0.6667, "split_seed": 3}}
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Union

from .data import SynthConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig
from .tta import TtaConfig


@dataclass(frozen=True)
class DataConfig:
    train_dir: Optional[str] = None
    test_dir: Optional[str] = None
    synth: Optional[SynthConfig] = None
    train_fraction: float = 2 / 3
    split_seed: int = 0
    normalize: str = "image"

    def __post_init__(self):
        if (self.train_dir is None) == (self.synth is None):
            raise ConfigError("data needs exactly one of 'train_dir' or 'synth'")
        if self.synth is not None and self.test_dir is not None:
            raise ConfigError("'test_dir' cannot be combined with 'synth'")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.normalize not in ("image", "dataset"):
            raise ConfigError("normalize must be 'image' or 'dataset'")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    tta: TtaConfig
    data: Optional[DataConfig]


def _strict(cls, raw: Any, section: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{section}' must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad value in '{section}': {exc}") from None


def parse_run_config(raw: Any) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - {"model", "train", "tta", "data"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "model" not in raw:
        raise ConfigError("missing required section 'model'")
    model_raw = dict(raw["model"]) if isinstance(raw["model"], dict) else raw["model"]
    if isinstance(model_raw, dict) and "block_channels" in model_raw:
        model_raw["block_channels"] = tuple(model_raw["block_channels"])
    model = _strict(ModelConfig, model_raw, "model")
    tta = _strict(TtaConfig, raw.get("tta", {}), "tta")
    tta.check_input(model.input_size)

    train_raw = dict(raw.get("train", {})) if isinstance(raw.get("train", {}), dict) else raw["train"]
    if isinstance(train_raw, dict):
        use_tta = train_raw.pop("eval_tta", False)
        if not isinstance(use_tta, bool):
            raise ConfigError("'train.eval_tta' must be true or false")
        train_raw["eval_tta"] = tta if use_tta else None
    train = _strict(TrainConfig, train_raw, "train")

    data = None
    if "data" in raw:
        data_raw = raw["data"]
        if isinstance(data_raw, dict) and isinstance(data_raw.get("synth"), dict):
            data_raw = dict(data_raw)
            synth = dict(data_raw["synth"])
            if "blob_radius_range" in synth:
                synth["blob_radius_range"] = tuple(synth["blob_radius_range"])
            data_raw["synth"] = _strict(SynthConfig, synth, "data.synth")
            if data_raw["synth"].image_size != model.input_size:
                raise ConfigError("data.synth.image_size must equal model.input_size")
        data = _strict(DataConfig, data_raw, "data")
    return RunConfig(model, train, tta, data)


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Parse and validate a config file. Raises ConfigError on any schema problem."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return parse_run_config(raw)
