"""CAM-native binary classifier: conv trunk, global average pooling, linear head.

The trunk has ``log2(input_size / grid_size)`` stages. Each stage is a 3x3
conv + ReLU followed by a stride-2 2x2 conv + ReLU, so the last stage emits a
``C x G x G`` feature map. The unpadded 2x2 downsample keeps every output
cell's receptive field centred on the patch that ``cell_to_patch`` assigns
it; a padded 3x3 stride-2 conv would drift half a patch toward the origin.
The head is a single logit over the GAP vector, which makes the class
activation map an exact decomposition of the logit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Union

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, ContractError, DimensionError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"CAMCLS\x00\x01"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``block_channels`` gives the width of every stage; the last entry must
    equal ``channels``. When empty, widths double from 8 up to ``channels``.
    """

    input_size: int = 224
    grid_size: int = 7
    channels: int = 32
    block_channels: tuple = ()
    in_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.grid_size < 2:
            raise ConfigError("grid_size must be >= 2 (four distinct cells are needed)")
        if self.input_size <= 0 or self.input_size % self.grid_size:
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by grid_size {self.grid_size}")
        p = self.input_size // self.grid_size
        if p < 2 or p & (p - 1):
            raise ConfigError(
                f"patch size {p} must be a power of two >= 2 (one stride-2 stage per halving)")
        if self.channels < 1 or self.in_channels < 1:
            raise ConfigError("channel counts must be positive")
        blocks = tuple(int(c) for c in self.block_channels)
        if not blocks:
            blocks = tuple(min(self.channels, 8 * 2 ** i) for i in range(self.n_stages))
            blocks = blocks[:-1] + (self.channels,)
        if len(blocks) != self.n_stages:
            raise ConfigError(
                f"block_channels needs {self.n_stages} entries, got {len(blocks)}")
        if blocks[-1] != self.channels or min(blocks) < 1:
            raise ConfigError("last block width must equal channels; widths must be positive")
        object.__setattr__(self, "block_channels", blocks)

    @property
    def patch_size(self) -> int:
        return self.input_size // self.grid_size

    @property
    def n_stages(self) -> int:
        return int(self.patch_size).bit_length() - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        return d


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    params: dict = field(repr=False)

    @property
    def head_w(self) -> Tensor:
        return self.params["head.weight"]

    @property
    def head_b(self) -> Tensor:
        return self.params["head.bias"]

    def with_params(self, arrays: dict) -> "Model":
        new = {name: Tensor(arrays[name], requires_grad=True, name=name, dtype=p.dtype)
               for name, p in self.params.items()}
        return Model(self.config, new)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())


class ForwardResult(NamedTuple):
    feature_map: Tensor
    logit: Tensor
    prob: float

    @property
    def embedding_grid(self) -> np.ndarray:
        """Feature vectors per cell, shape (G*G, C) in row-major cell order."""
        c = self.feature_map.shape[0]
        return self.feature_map.data.reshape(c, -1).T


class BatchForward(NamedTuple):
    features: Tensor  # N, C, G, G
    logits: Tensor    # N

    @property
    def probs(self) -> np.ndarray:
        return T._sigmoid(self.logits.data.astype(np.float64))


def stage_layers(in_ch: int, width: int):
    # (name, input channels, kernel, stride, pad)
    return (("conv", in_ch, 3, 1, 1), ("down", width, 2, 2, 0))


def build_model(config: ModelConfig) -> Model:
    """Initialise parameters deterministically from ``config.seed``.

    Conv kernels are He-normal (fan-in), conv biases zero, head weights small
    zero-mean Gaussian, head bias zero.
    """
    rng = np.random.default_rng(config.seed)
    dtype = T.default_dtype()
    params: dict[str, Tensor] = {}
    in_ch = config.in_channels
    for i, width in enumerate(config.block_channels):
        for part, fan_ch, k, _, _ in stage_layers(in_ch, width):
            std = np.sqrt(2.0 / (fan_ch * k * k))
            w = rng.normal(0.0, std, size=(width, fan_ch, k, k))
            params[f"stage{i}.{part}.weight"] = Tensor(w, True, f"stage{i}.{part}.weight", dtype)
            params[f"stage{i}.{part}.bias"] = Tensor(np.zeros(width), True, f"stage{i}.{part}.bias", dtype)
        in_ch = width
    hw = rng.normal(0.0, 1.0 / np.sqrt(config.channels), size=config.channels)
    params["head.weight"] = Tensor(hw, True, "head.weight", dtype)
    params["head.bias"] = Tensor(0.0, True, "head.bias", dtype)
    return Model(config, params)


def _as_batch(model: Model, images) -> Tensor:
    if isinstance(images, Tensor):
        x = images
    else:
        arr = np.asarray(images)
        x = Tensor._wrap(np.array(arr, dtype=model.head_w.dtype))
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"expected (N, {cfg.in_channels}, H, W) images, got {x.shape}")
    if x.shape[2:] != (cfg.input_size, cfg.input_size):
        raise DimensionError(
            f"image is {x.shape[2]}x{x.shape[3]}, model expects {cfg.input_size}x{cfg.input_size}")
    return x


def forward_batch(model: Model, images) -> BatchForward:
    """Run the network on an (N, C_in, H, W) batch; recorded if a tape is open."""
    h = _as_batch(model, images)
    p = model.params
    for i in range(model.config.n_stages):
        for part, _, _, stride, pad in stage_layers(0, 0):
            w = p[f"stage{i}.{part}.weight"]
            b = p[f"stage{i}.{part}.bias"]
            h = T.relu(T.conv2d(h, w, stride, pad) + b.reshape(1, -1, 1, 1))
    logits = T.linear(T.gap(h), model.head_w, model.head_b)
    return BatchForward(h, logits)


def forward(model: Model, image) -> ForwardResult:
    """Classify a single (C_in, H, W) image."""
    image_arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if image_arr.ndim != 3:
        raise DimensionError(f"forward expects a (C, H, W) image, got shape {image_arr.shape}")
    out = forward_batch(model, image if isinstance(image, Tensor) else image_arr)
    feature = out.features.reshape(out.features.shape[1:])
    logit = out.logits.reshape(())
    return ForwardResult(feature, logit, float(out.probs[0]))


def predict_probs(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Positive-class probabilities for a stack of images, evaluated in chunks."""
    images = np.asarray(images)
    if len(images) == 0:
        return np.zeros(0)
    chunks = [forward_batch(model, images[i:i + batch_size]).probs
              for i in range(0, len(images), batch_size)]
    return np.concatenate(chunks)


def cell_to_patch(cell: tuple, config: ModelConfig) -> tuple[slice, slice]:
    """Input-pixel rectangle (rows, cols) covered by feature cell ``(i, j)``."""
    i, j = cell
    g = config.grid_size
    if not (0 <= i < g and 0 <= j < g):
        raise ContractError(f"cell {cell} outside the {g}x{g} grid")
    p = config.patch_size
    return slice(i * p, (i + 1) * p), slice(j * p, (j + 1) * p)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------
# Layout (little-endian): magic | u32 config length | config JSON |
# u32 tensor count | per tensor: u32 name length, name, u32 rank,
# rank x u64 dims, float64 payload.


def save_checkpoint(model: Model, path: Union[str, Path]) -> None:
    meta = {"model": model.config.to_dict(), "dtype": str(model.head_w.dtype)}
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(t.data.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: Union[str, Path]) -> Model:
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a camcls checkpoint")
    pos = len(CHECKPOINT_MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len))
    cfg = meta["model"]
    cfg["block_channels"] = tuple(cfg["block_channels"])
    config = ModelConfig(**cfg)
    dtype = np.dtype(meta["dtype"])
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape)
        params[name] = Tensor(arr, True, name, dtype)
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes")
    expected = build_model_names(config)
    if list(params) != expected:
        raise CheckpointError(f"{path}: parameter names do not match the config")
    return Model(config, params)


def build_model_names(config: ModelConfig) -> list[str]:
    names = [f"stage{i}.{part}.{kind}" for i in range(config.n_stages)
             for part in ("conv", "down") for kind in ("weight", "bias")]
    return names + ["head.weight", "head.bias"]
