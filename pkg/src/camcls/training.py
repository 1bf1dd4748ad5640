"""Training loop, evaluation metrics and TTA parameter sweeps."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from . import tensor as T
from .cam import signed_cam
from .cpe import cpe_loss, select_patches_batch
from .data import Dataset, Sample
from .errors import ConfigError, ContractError, NonFiniteError, TrainingDiverged
from .model import Model, forward_batch, predict_probs
from .snapmix import VirtualSample, snapmix, weighted_bce
from .cam import heatmap_from_features
from .tta import TtaConfig, masked_probabilities, vote

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 0.01
    momentum: float = 0.9
    alpha: float = 1.0
    cpe_enabled: bool = True
    snapmix_enabled: bool = True
    seed: int = 0
    grad_clip: Optional[float] = 1.0
    eval_tta: Optional[TtaConfig] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive or null")


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: bool = False

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int) -> "Metrics":
        degenerate = False

        def ratio(num: float, den: float) -> float:
            nonlocal degenerate
            if den == 0:
                degenerate = True
                return 0.0
            return num / den

        accuracy = ratio(tp + tn, tp + fp + tn + fn)
        precision = ratio(tp, tp + fp)
        recall = ratio(tp, tp + fn)
        f1 = ratio(2 * precision * recall, precision + recall)
        return cls(tp, fp, tn, fn, accuracy, precision, recall, f1, degenerate)

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "Metrics":
        y_true = np.asarray(y_true).astype(bool)
        y_pred = np.asarray(y_pred).astype(bool)
        return cls.from_counts(int(np.sum(y_true & y_pred)), int(np.sum(~y_true & y_pred)),
                               int(np.sum(~y_true & ~y_pred)), int(np.sum(y_true & ~y_pred)))

    def summary(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


class StepResult(NamedTuple):
    loss: float
    model: Model
    velocity: dict


def _label_signs(labels) -> np.ndarray:
    return np.where(np.asarray(labels) > 0, 1, -1)


def make_virtual_batch(model: Model, images: np.ndarray, labels: np.ndarray,
                       rng: np.random.Generator, alpha: float) -> list[VirtualSample]:
    """SnapMix each sample with the next one in the batch (cyclically)."""
    feats = forward_batch(model, images).features.data
    size = model.config.input_size
    heats = [heatmap_from_features(f, model.head_w, int(s), size)
             for f, s in zip(feats, _label_signs(labels))]
    n = len(images)
    out = []
    for i in range(n):
        j = (i + 1) % n
        out.append(snapmix(images[i], int(labels[i]), images[j], int(labels[j]),
                           heats[i], heats[j], rng, alpha))
    return out


def batch_objective(model: Model, inputs: np.ndarray, weight_a, label_a, weight_b, label_b,
                    cpe_signs: Optional[np.ndarray]) -> T.Tensor:
    """Mean over the batch of weighted BCE plus, if ``cpe_signs`` is given, CPE.

    ``cpe_signs`` holds the class sign whose CAM ranks each sample's cells.
    Cells are ranked by the signed map: above zero this is the same order as
    the clamped CAM mass, and below zero it separates the cells the clamp
    would tie, so v1 and v2 are the most label-opposing cells rather than the
    last zero cells in row-major order.
    """
    out = forward_batch(model, inputs)
    per_sample = weighted_bce(out.logits, weight_a, label_a, weight_b, label_b)
    if cpe_signs is not None:
        feats = out.features
        n, c = feats.shape[:2]
        scores = np.stack([s * signed_cam(f, model.head_w.data)
                           for f, s in zip(feats.data, cpe_signs)])
        emb = feats.reshape(n, c, -1).transpose(0, 2, 1)  # N, G*G, C
        per_sample = per_sample + cpe_loss(select_patches_batch(emb, scores))
    return per_sample.mean()


def train_step(model: Model, batch: Sequence[Sample], config: TrainConfig,
               rng: np.random.Generator, velocity: Optional[dict] = None,
               lr: Optional[float] = None) -> StepResult:
    """One SGD-with-momentum step on the combined objective."""
    if not batch:
        raise ContractError("empty batch")
    images = np.stack([s.image for s in batch]).astype(model.head_w.dtype)
    labels = np.array([s.label for s in batch])
    names = list(model.params)
    params = [model.params[k] for k in names]
    try:
        if config.snapmix_enabled:
            virtual = make_virtual_batch(model, images, labels, rng, config.alpha)
            inputs = np.stack([v.image for v in virtual])
            wa = np.array([v.weight_a for v in virtual])
            wb = np.array([v.weight_b for v in virtual])
            la = np.array([v.label_a for v in virtual])
            lb = np.array([v.label_b for v in virtual])
            signs = np.array([v.dominant_sign for v in virtual])
        else:
            inputs, wa, wb, la, lb = images, np.ones(len(batch)), np.zeros(len(batch)), labels, labels
            signs = _label_signs(labels)
        with T.GradTape() as tape:
            loss = batch_objective(model, inputs, wa, la, wb, lb,
                                   signs if config.cpe_enabled else None)
        grads = tape.gradient(loss, params)
    except NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite value in training step ({exc}); "
                               "lower the learning rate or enable grad_clip") from exc
    value = loss.item()
    if config.grad_clip is not None:
        grads = clip_by_global_norm(grads, config.grad_clip)
    lr = config.learning_rate if lr is None else lr
    velocity = dict(velocity or {})
    updated = {}
    for name, p, g in zip(names, params, grads):
        v = config.momentum * velocity.get(name, np.zeros_like(p.data)) + g
        velocity[name] = v
        updated[name] = p.data - p.data.dtype.type(lr) * v
    if not all(np.isfinite(a).all() for a in updated.values()):
        raise TrainingDiverged("parameters became non-finite; lower the learning rate")
    new_model = model.with_params(updated)
    return StepResult(value, new_model, velocity)


def clip_by_global_norm(grads: list, max_norm: float) -> list:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if norm <= max_norm:
        return grads
    factor = max_norm / norm
    return [g * g.dtype.type(factor) for g in grads]


def cosine_lr(base: float, epoch: int, epochs: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / epochs))


@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)


def mean_bce(model: Model, dataset: Dataset) -> float:
    probs = np.clip(predict_probs(model, dataset.images), 1e-12, 1 - 1e-12)
    y = dataset.labels
    return float(-np.mean(y * np.log(probs) + (1 - y) * np.log(1 - probs)))


def train(model: Model, train_set: Dataset, config: TrainConfig,
          test_set: Optional[Dataset] = None,
          log: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train for ``config.epochs`` epochs with a per-epoch seeded reshuffle.

    ``log`` receives one record per epoch and split with keys epoch, split,
    loss, accuracy, precision, recall, f1.
    """
    if len(train_set) == 0:
        raise ContractError("empty training set")
    result = TrainResult(model)
    velocity: dict = {}
    n = len(train_set)
    for epoch in range(config.epochs):
        lr = cosine_lr(config.learning_rate, epoch, config.epochs)
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, config.batch_size)):
            batch = [train_set.samples[i] for i in order[start:start + config.batch_size]]
            step_rng = np.random.default_rng([config.seed, epoch, b])
            loss, model, velocity = train_step(model, batch, config, step_rng, velocity, lr)
            losses.append(loss)
        records = [dict(epoch=epoch + 1, split="train", loss=float(np.mean(losses)),
                        **evaluate(model, train_set).summary())]
        if test_set is not None and len(test_set):
            records.append(dict(epoch=epoch + 1, split="test", loss=mean_bce(model, test_set),
                                **evaluate(model, test_set).summary()))
            if config.eval_tta is not None and epoch + 1 == config.epochs:
                records.append(dict(epoch=epoch + 1, split="test_tta",
                                    loss=mean_bce(model, test_set),
                                    **evaluate(model, test_set, config.eval_tta).summary()))
        for rec in records:
            logger.info("epoch %d %s loss=%.4f acc=%.4f", rec["epoch"], rec["split"],
                        rec["loss"], rec["accuracy"])
            result.history.append(rec)
            if log is not None:
                log(rec)
    result.model = model
    return result


def worker_count() -> int:
    """Worker threads allowed by ``CAMCLS_THREADS`` (0 or unset means serial)."""
    try:
        return max(int(os.environ.get("CAMCLS_THREADS", "0")), 0)
    except ValueError:
        raise ConfigError("CAMCLS_THREADS must be an integer")


def _ordered_map(fn, items: list) -> list:
    threads = worker_count()
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def tta_probabilities(model: Model, dataset: Dataset, k: int, mask_patch_px: int,
                      mask_fill: float = 0.0) -> list[tuple[float, np.ndarray]]:
    """(original prob, k masked probs) per sample, in dataset order."""
    return _ordered_map(
        lambda s: masked_probabilities(model, s.image, k, mask_patch_px, mask_fill),
        dataset.samples)


def evaluate(model: Model, dataset: Dataset, tta: Optional[TtaConfig] = None) -> Metrics:
    """Confusion-matrix metrics, optionally with TTA voting."""
    if len(dataset) == 0:
        raise ContractError("empty dataset")
    if tta is None:
        preds = predict_probs(model, dataset.images) > 0.5
    else:
        tta.check_input(model.config.input_size)
        per = tta_probabilities(model, dataset, tta.k, tta.mask_patch_px, tta.mask_fill)
        preds = [vote(p, m, tta.theta).final_label for p, m in per]
    return Metrics.from_predictions(dataset.labels, preds)


def _baseline_row(model: Model, dataset: Dataset) -> tuple:
    return ("baseline", evaluate(model, dataset))


def sweep_k(model: Model, dataset: Dataset, k_values: Sequence[int], theta: float,
            mask_patch_px: int = 8, mask_fill: float = 0.0) -> list[tuple]:
    """Metrics per ``k``; the first row is the no-TTA baseline.

    Masks are nested, so the probabilities for the largest ``k`` serve every
    smaller ``k`` as a prefix.
    """
    k_values = [int(k) for k in k_values]
    for k in k_values:
        TtaConfig(k, theta, mask_patch_px, mask_fill).check_input(model.config.input_size)
    per = tta_probabilities(model, dataset, max(k_values), mask_patch_px, mask_fill)
    rows = [_baseline_row(model, dataset)]
    for k in k_values:
        preds = [vote(p, m[:k], theta).final_label for p, m in per]
        rows.append((k, Metrics.from_predictions(dataset.labels, preds)))
    return rows


def sweep_theta(model: Model, dataset: Dataset, k: int, theta_values: Sequence[float],
                mask_patch_px: int = 8, mask_fill: float = 0.0) -> list[tuple]:
    """Metrics per ``theta`` at fixed ``k``; the first row is the no-TTA baseline."""
    for theta in theta_values:
        TtaConfig(k, theta, mask_patch_px, mask_fill).check_input(model.config.input_size)
    per = tta_probabilities(model, dataset, k, mask_patch_px, mask_fill)
    rows = [_baseline_row(model, dataset)]
    for theta in theta_values:
        preds = [vote(p, m, theta).final_label for p, m in per]
        rows.append((float(theta), Metrics.from_predictions(dataset.labels, preds)))
    return rows


def sweep_csv(rows: Sequence[tuple]) -> str:
    lines = ["param,accuracy,precision,recall,f1"]
    for param, m in rows:
        lines.append(f"{param},{m.accuracy:.6f},{m.precision:.6f},{m.recall:.6f},{m.f1:.6f}")
    return "\n".join(lines) + "\n"
