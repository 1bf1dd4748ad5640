"""Datasets: directory ingestion, preprocessing and the synthetic blob task."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .cam import save_pgm
from .errors import ConfigError, IngestionError, SplitError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".pgm", ".png", ".pnm"}


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray  # 1 x H x W, float32
    label: int
    source_tag: str
    path: str
    meta: dict = field(default_factory=dict)


@dataclass(eq=False)
class Dataset:
    samples: list
    input_size: int
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


@dataclass(frozen=True)
class SynthConfig:
    n_per_class: int = 100
    image_size: int = 64
    blob_radius_range: tuple = (2.5, 5.0)
    noise_sigma: float = 0.2
    seed: int = 0

    def __post_init__(self):
        lo, hi = (float(r) for r in self.blob_radius_range)
        object.__setattr__(self, "blob_radius_range", (lo, hi))
        if self.n_per_class < 1:
            raise ConfigError("n_per_class must be >= 1")
        if not 0 < lo <= hi:
            raise ConfigError("blob_radius_range must satisfy 0 < min <= max")
        if self.image_size < 8 or 2 * int(np.ceil(hi)) >= self.image_size // 2:
            raise ConfigError("blob must fit inside an image quadrant")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


def normalize_image(img: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance; constant images become all zeros."""
    img = np.asarray(img, dtype=np.float64)
    return (img - img.mean()) / max(float(img.std()), 1e-6)


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a 2-D array to ``size x size``."""
    if img.shape == (size, size):
        return np.asarray(img, dtype=np.float64)
    pil = Image.fromarray(np.ascontiguousarray(img, dtype=np.float32))
    return np.asarray(pil.resize((size, size), Image.Resampling.BILINEAR), dtype=np.float64)


def decode_image(path: Union[str, Path]) -> np.ndarray:
    """Grayscale pixels of a PGM/PNG file; RGB is reduced to luma."""
    with Image.open(path) as im:
        if im.mode in ("I", "I;16", "I;16B", "F"):
            return np.asarray(im, dtype=np.float64)
        return np.asarray(im.convert("L"), dtype=np.float64)


def preprocess(img: np.ndarray, input_size: int, per_image: bool = True) -> np.ndarray:
    out = resize_image(img, input_size)
    if per_image:
        out = normalize_image(out)
    return out[None].astype(np.float32)


def load_dataset(root_dir: Union[str, Path], input_size: int, per_image: bool = True) -> Dataset:
    """Read ``root_dir/pos`` (label 1) then ``root_dir/neg`` (label 0), path-sorted.

    With ``per_image=False`` pixels are only resized; pass the result through
    :func:`dataset_normalize` afterwards.
    """
    root = Path(root_dir)
    samples, skipped = [], 0
    for sub, label in (("pos", 1), ("neg", 0)):
        folder = root / sub
        if not folder.is_dir():
            raise IngestionError(f"missing subdirectory {folder}")
        for path in sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
            try:
                pixels = decode_image(path)
            except (UnidentifiedImageError, OSError, ValueError) as exc:
                logger.warning("skipping %s: %s", path, exc)
                skipped += 1
                continue
            samples.append(Sample(preprocess(pixels, input_size, per_image), label, root.name, str(path)))
    return Dataset(samples, input_size, skipped)


def synth_generate(config: SynthConfig) -> Dataset:
    """Blob-quadrant task: positives have a bright Gaussian blob in the upper-left
    quadrant, negatives in the lower-right. Blob centres are stored in ``meta``."""
    rng = np.random.default_rng(config.seed)
    size = config.image_size
    half = size // 2
    yy, xx = np.mgrid[0:size, 0:size]
    samples = []
    for label in (1, 0):
        for n in range(config.n_per_class):
            radius = rng.uniform(*config.blob_radius_range)
            margin = int(np.ceil(radius))
            cy, cx = (int(v) for v in rng.integers(margin, half - margin, size=2))
            if label == 0:
                cy, cx = cy + half, cx + half
            img = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius ** 2))
            if config.noise_sigma > 0:
                img = img + rng.normal(0.0, config.noise_sigma, size=img.shape)
            samples.append(Sample(
                normalize_image(img)[None].astype(np.float32), label, "synth",
                f"synth/{'pos' if label else 'neg'}/{n:05d}",
                {"center": (cy, cx), "radius": float(radius)}))
    return Dataset(samples, size)


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified, seeded train/test partition; original order kept within each side."""
    if not 0.0 < train_fraction < 1.0:
        raise SplitError("train_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    labels = dataset.labels
    train_idx = []
    for label in (1, 0):
        idx = np.flatnonzero(labels == label)
        if len(idx) == 0:
            continue
        if len(idx) < 2:
            raise SplitError(f"class {label} has fewer than 2 samples")
        n_train = min(max(int(round(train_fraction * len(idx))), 1), len(idx) - 1)
        train_idx.extend(rng.permutation(idx)[:n_train].tolist())
    chosen = set(train_idx)
    train = [s for i, s in enumerate(dataset.samples) if i in chosen]
    test = [s for i, s in enumerate(dataset.samples) if i not in chosen]
    return Dataset(train, dataset.input_size), Dataset(test, dataset.input_size)


def export_dataset(dataset: Dataset, root_dir: Union[str, Path]) -> Path:
    """Write ``pos/`` and ``neg/`` PGM folders loadable by :func:`load_dataset`."""
    root = Path(root_dir)
    for sub in ("pos", "neg"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(dataset.samples):
        sub = "pos" if s.label else "neg"
        save_pgm(root / sub / f"{i:05d}.pgm", s.image[0])
    return root


def dataset_normalize(dataset: Dataset, stats: Optional[tuple[float, float]] = None
                      ) -> tuple[Dataset, tuple[float, float]]:
    """Alternative normalisation with one mean/std for the whole set.

    Returns the transformed dataset and the statistics used, so a test split
    can reuse the training statistics.
    """
    images = dataset.images.astype(np.float64)
    if stats is None:
        stats = (float(images.mean()), max(float(images.std()), 1e-6))
    mu, sd = stats
    samples = [Sample(((s.image - mu) / sd).astype(np.float32), s.label, s.source_tag,
                      s.path, s.meta) for s in dataset.samples]
    return Dataset(samples, dataset.input_size, dataset.skipped), stats
