"""Class activation maps for the GAP-linear head.

For a head ``logit = w . gap(F) + b`` the map ``sum_k w_k F_k(x, y)`` averages
exactly to ``logit - b``, so no gradients are needed. Maps are clamped at zero
and upsampled by nearest-cell replication, which keeps patch sums equal to
scaled grid values.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ContractError
from .model import Model, forward
from .tensor import Tensor


@dataclass(frozen=True)
class Box:
    top: int
    left: int
    height: int
    width: int

    @property
    def area(self) -> int:
        return self.height * self.width

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)

    def check_inside(self, h: int, w: int) -> None:
        if (self.height < 0 or self.width < 0 or self.top < 0 or self.left < 0
                or self.top + self.height > h or self.left + self.width > w):
            raise ContractError(f"{self} does not fit inside a {h}x{w} image")


@dataclass(frozen=True)
class Heatmap:
    grid: np.ndarray      # G x G, clamped >= 0
    full_res: np.ndarray  # H x W
    class_sign: int
    upsample: str = "nearest"

    @property
    def degenerate(self) -> bool:
        return not self.grid.sum() > 0

    @property
    def cell_px(self) -> int:
        return self.full_res.shape[0] // self.grid.shape[0]

    @classmethod
    def from_grid(cls, grid: np.ndarray, input_size: int, class_sign: int = 1,
                  upsample: str = "nearest") -> "Heatmap":
        grid = np.maximum(np.asarray(grid, dtype=np.float64), 0.0)
        g = grid.shape[0]
        if grid.ndim != 2 or grid.shape[1] != g or input_size % g:
            raise ContractError(f"grid {grid.shape} cannot be upsampled to {input_size}")
        if class_sign not in (1, -1):
            raise ContractError("class_sign must be +1 or -1")
        if upsample == "nearest":
            p = input_size // g
            full = np.repeat(np.repeat(grid, p, axis=0), p, axis=1)
        elif upsample == "bilinear":
            full = _bilinear_upsample(grid, input_size)
        else:
            raise ContractError(f"unknown upsample mode {upsample!r}")
        grid.flags.writeable = False
        full.flags.writeable = False
        return cls(grid, full, class_sign, upsample)


def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    g = grid.shape[0]
    coords = np.clip((np.arange(size) + 0.5) * g / size - 0.5, 0, g - 1)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, g - 1)
    frac = coords - lo
    rows = grid[lo] * (1 - frac)[:, None] + grid[hi] * frac[:, None]
    return rows[:, lo] * (1 - frac)[None, :] + rows[:, hi] * frac[None, :]


def signed_cam(feature_map: np.ndarray, head_w: np.ndarray) -> np.ndarray:
    """Unclamped positive-class map ``sum_k w_k F_k`` for a (C, G, G) feature map."""
    f = np.asarray(feature_map, dtype=np.float64)
    return np.tensordot(np.asarray(head_w, dtype=np.float64), f, axes=(0, 0))


def heatmap_from_features(feature_map, head_w, class_sign: int, input_size: int,
                          upsample: str = "nearest") -> Heatmap:
    if isinstance(feature_map, Tensor):
        feature_map = feature_map.data
    if isinstance(head_w, Tensor):
        head_w = head_w.data
    return Heatmap.from_grid(class_sign * signed_cam(feature_map, head_w), input_size,
                             class_sign, upsample)


def compute_cam(model: Model, image, class_sign: int, upsample: str = "nearest") -> Heatmap:
    """CAM of ``image`` for the positive (+1) or negative (-1) class."""
    result = forward(model, image)
    return heatmap_from_features(result.feature_map, model.head_w, class_sign,
                                 model.config.input_size, upsample)


def box_cam_ratio(heat: Heatmap, box: Box) -> float:
    """Share of the map's mass inside ``box``; area share for a degenerate map."""
    h, w = heat.full_res.shape
    box.check_inside(h, w)
    if heat.degenerate:
        return box.area / (h * w)
    rows, cols = box.slices
    rho = float(heat.full_res[rows, cols].sum() / heat.full_res.sum())
    return min(max(rho, 0.0), 1.0)  # summation order can overshoot 1 by an ulp


def patch_cam_sums(heat: Heatmap, patch_px: int) -> np.ndarray:
    """Sum of the full-resolution map over each ``patch_px`` square tile."""
    h, w = heat.full_res.shape
    if patch_px < 1 or h % patch_px or w % patch_px:
        raise ContractError(f"patch size {patch_px} does not tile a {h}x{w} map")
    cell = heat.cell_px
    if heat.upsample == "nearest" and cell % patch_px == 0:
        # every tile lies inside a single cell: its sum is exactly patch_px**2 * value
        rep = cell // patch_px
        return np.repeat(np.repeat(heat.grid * float(patch_px * patch_px), rep, 0), rep, 1)
    return heat.full_res.reshape(h // patch_px, patch_px, w // patch_px, patch_px).sum(axis=(1, 3))


def rank_cells(scores: np.ndarray) -> np.ndarray:
    """Flat cell indices ordered by descending score, ties by row-major index."""
    flat = np.asarray(scores, dtype=np.float64).reshape(-1)
    return np.lexsort((np.arange(flat.size), -flat))


def save_pgm(path: Union[str, Path], values: np.ndarray) -> None:
    """Write a 2-D array as an 8-bit binary PGM, min-max normalised."""
    arr = np.asarray(values, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    scaled = np.zeros_like(arr) if hi <= lo else (arr - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def export_heatmap(heat: Heatmap, out_dir: Union[str, Path], stem: str) -> Path:
    sign = "pos" if heat.class_sign > 0 else "neg"
    path = Path(out_dir) / f"{stem}_cam_{sign}.pgm"
    save_pgm(path, heat.full_res)
    return path
