"""CAM-directed test-time masking and the supporting-vote flip rule.

The image is cut into ``mask_patch_px`` squares, ranked by CAM mass for the
predicted class. Masked image ``m`` blanks the top ``m`` squares. Each masked
image votes; a vote supports the original prediction when its probability is
``>= theta`` (positive prediction) or ``<= 1 - theta`` (negative prediction).
A strict majority of non-supporting votes flips the label.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cam import Heatmap, heatmap_from_features, patch_cam_sums, rank_cells
from .errors import ConfigError, ContractError
from .model import Model, forward, predict_probs


@dataclass(frozen=True)
class TtaConfig:
    k: int = 31
    theta: float = 0.2
    mask_patch_px: int = 8
    mask_fill: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0.0 < self.theta <= 0.5:
            raise ConfigError("theta must lie in (0, 0.5]")
        if self.mask_patch_px < 1:
            raise ConfigError("mask_patch_px must be positive")

    def check_input(self, input_size: int) -> None:
        if input_size % self.mask_patch_px:
            raise ConfigError(
                f"input size {input_size} not divisible by mask_patch_px {self.mask_patch_px}")
        cells = (input_size // self.mask_patch_px) ** 2
        if self.k > cells:
            raise ConfigError(f"k={self.k} exceeds the {cells} mask cells")


@dataclass(frozen=True)
class VoteRecord:
    original_prob: float
    masked_probs: tuple
    supporting: tuple
    flipped: bool
    final_label: int

    @property
    def original_label(self) -> int:
        return int(self.original_prob > 0.5)

    @property
    def nonsupport(self) -> int:
        return len(self.supporting) - sum(self.supporting)


def rank_patches(heat: Heatmap, mask_patch_px: int) -> list[tuple[int, int]]:
    """Mask cells in descending CAM mass, ties broken row-major."""
    sums = patch_cam_sums(heat, mask_patch_px)
    n = sums.shape[1]
    return [(int(k) // n, int(k) % n) for k in rank_cells(sums)]


def make_masked_images(image: np.ndarray, ranked_cells: Sequence[tuple[int, int]], k: int,
                       mask_patch_px: int = 8, mask_fill: float = 0.0) -> np.ndarray:
    """Stack of ``k`` images; image ``m`` (0-based) blanks the first ``m + 1`` cells."""
    if k > len(ranked_cells):
        raise ContractError(f"k={k} exceeds the {len(ranked_cells)} ranked cells")
    image = np.asarray(image)
    out = np.empty((k,) + image.shape, dtype=image.dtype)
    current = image.copy()
    p = mask_patch_px
    for m in range(k):
        i, j = ranked_cells[m]
        current[..., i * p:(i + 1) * p, j * p:(j + 1) * p] = mask_fill
        out[m] = current
    return out


def vote(original_prob: float, masked_probs: Sequence[float], theta: float) -> VoteRecord:
    probs = tuple(float(p) for p in masked_probs)
    if not probs:
        raise ContractError("at least one masked probability is required")
    if not 0.0 < theta <= 0.5:
        raise ContractError("theta must lie in (0, 0.5]")
    positive = original_prob > 0.5
    if positive:
        supporting = tuple(p >= theta for p in probs)
    else:
        supporting = tuple(p <= 1.0 - theta for p in probs)
    against = len(probs) - sum(supporting)
    flipped = 2 * against > len(probs)
    final = int(positive) ^ int(flipped)
    return VoteRecord(float(original_prob), probs, supporting, flipped, final)


def masked_probabilities(model: Model, image: np.ndarray, k: int, mask_patch_px: int,
                         mask_fill: float = 0.0) -> tuple[float, np.ndarray]:
    """Original probability and the ``k`` cumulative-mask probabilities of one image.

    The ranking map uses the predicted class's sign.
    """
    cfg = model.config
    if cfg.input_size % mask_patch_px:
        raise ConfigError(
            f"input size {cfg.input_size} not divisible by mask_patch_px {mask_patch_px}")
    result = forward(model, image)
    sign = 1 if result.prob > 0.5 else -1
    heat = heatmap_from_features(result.feature_map, model.head_w, sign, cfg.input_size)
    ranked = rank_patches(heat, mask_patch_px)
    masked = make_masked_images(image, ranked, k, mask_patch_px, mask_fill)
    return result.prob, predict_probs(model, masked)


def tta_predict(model: Model, image: np.ndarray, config: TtaConfig) -> VoteRecord:
    config.check_input(model.config.input_size)
    prob, masked = masked_probabilities(model, image, config.k, config.mask_patch_px,
                                        config.mask_fill)
    return vote(prob, masked, config.theta)
