"""SnapMix virtual samples: box pasting with CAM-mass soft labels.

A box from image ``b`` is resized onto a box of image ``a``. The two source
labels are weighted by ``1 - rho_a`` and ``rho_b``, where ``rho`` is the share
of each image's CAM mass inside its box. The weights need not sum to one, so
the loss is a per-source weighted BCE rather than a single soft target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image

from . import tensor as T
from .cam import Box, Heatmap, box_cam_ratio
from .errors import ContractError
from .tensor import Tensor


@dataclass(frozen=True, eq=False)
class VirtualSample:
    image: np.ndarray
    label_a: int
    label_b: int
    weight_a: float
    weight_b: float
    box_a: Box
    box_b: Box
    rho_a: float
    rho_b: float

    @property
    def dominant_sign(self) -> int:
        """+1 when the weighted labels lean positive, else -1; ties go to label_a."""
        lean = (self.weight_a * self.label_a + self.weight_b * self.label_b
                - 0.5 * (self.weight_a + self.weight_b))
        if lean == 0:
            return 1 if self.label_a else -1
        return 1 if lean > 0 else -1


def sample_box(rng: np.random.Generator, lam: float, h: int, w: int) -> Box:
    """Box covering about ``1 - lam`` of an ``h x w`` image at a uniform position."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    side = math.sqrt(1.0 - lam)
    bh, bw = int(round(h * side)), int(round(w * side))
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    return Box(top, left, bh, bw)


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a 2-D array (Pillow, float mode)."""
    if img.shape == (height, width):
        return img.copy()
    pil = Image.fromarray(np.ascontiguousarray(img, dtype=np.float32))
    out = pil.resize((width, height), Image.Resampling.BILINEAR)
    return np.asarray(out, dtype=img.dtype)


def mix_with_boxes(img_a: np.ndarray, label_a: int, img_b: np.ndarray, label_b: int,
                   heat_a: Heatmap, heat_b: Heatmap, box_a: Box, box_b: Box) -> VirtualSample:
    """Composite ``img_b[box_b]`` onto ``img_a[box_a]`` and derive the label weights.

    An empty box on either side means nothing is pasted: the result is
    ``img_a`` with weights (1, 0).
    """
    img_a = np.asarray(img_a)
    img_b = np.asarray(img_b)
    if img_a.shape != img_b.shape:
        raise ContractError(f"image shapes differ: {img_a.shape} vs {img_b.shape}")
    h, w = img_a.shape[-2:]
    box_a.check_inside(h, w)
    box_b.check_inside(h, w)
    out = img_a.copy()
    if box_a.area == 0 or box_b.area == 0:
        return VirtualSample(out, int(label_a), int(label_b), 1.0, 0.0, box_a, box_b, 0.0, 0.0)
    ra, ca = box_a.slices
    rb, cb = box_b.slices
    if img_a.ndim == 2:
        out[ra, ca] = resize_bilinear(img_b[rb, cb], box_a.height, box_a.width)
    else:
        for c in range(img_a.shape[0]):
            out[c, ra, ca] = resize_bilinear(img_b[c, rb, cb], box_a.height, box_a.width)
    rho_a = box_cam_ratio(heat_a, box_a)
    rho_b = box_cam_ratio(heat_b, box_b)
    return VirtualSample(out, int(label_a), int(label_b), 1.0 - rho_a, rho_b,
                         box_a, box_b, rho_a, rho_b)


def snapmix(img_a, label_a: int, img_b, label_b: int, heat_a: Heatmap, heat_b: Heatmap,
            rng: np.random.Generator, alpha: float = 1.0,
            lambdas: Optional[tuple[float, float]] = None) -> VirtualSample:
    """Draw two boxes from independent Beta(alpha, alpha) areas and mix.

    ``heat_a`` and ``heat_b`` should be computed with each image's own
    ground-truth class sign. ``lambdas`` overrides the Beta draws.
    """
    if alpha <= 0:
        raise ContractError("alpha must be positive")
    img_a = np.asarray(img_a)
    if img_a.shape != np.shape(img_b):
        raise ContractError(f"image shapes differ: {img_a.shape} vs {np.shape(img_b)}")
    h, w = img_a.shape[-2:]
    if lambdas is None:
        lam_a, lam_b = float(rng.beta(alpha, alpha)), float(rng.beta(alpha, alpha))
    else:
        lam_a, lam_b = lambdas
    box_a = sample_box(rng, lam_a, h, w)
    box_b = sample_box(rng, lam_b, h, w)
    return mix_with_boxes(img_a, label_a, img_b, label_b, heat_a, heat_b, box_a, box_b)


def weighted_bce(logit: Tensor, weight_a, label_a, weight_b, label_b) -> Tensor:
    """``weight_a * bce(logit, label_a) + weight_b * bce(logit, label_b)``, elementwise.

    Arguments may be scalars or per-sample arrays matching ``logit``.
    """
    wa = np.asarray(weight_a, dtype=logit.dtype)
    wb = np.asarray(weight_b, dtype=logit.dtype)
    return T.bce_loss(logit, label_a) * wa + T.bce_loss(logit, label_b) * wb


def mixed_bce_loss(logit: Tensor, sample: VirtualSample) -> Tensor:
    return weighted_bce(logit, sample.weight_a, sample.label_a, sample.weight_b, sample.label_b)
