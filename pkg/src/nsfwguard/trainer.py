"""Seeded end-to-end training and the confusion-metric suite."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Label, LabeledSample, Manifest, Split
from .datagen import derive_seed, load_image_tensor
from .errors import EmptyDatasetError, ValidationError
from .model import (
    ModelConfig,
    ModelParams,
    batch_loss_and_gradients,
    forward,
    init_params,
)

POSITIVE_LABEL = Label.NSFW  # safety-critical class for precision/recall


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 2
    learning_rate: float = 0.1
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValidationError("learning_rate must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError("threshold must lie in (0, 1)")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    best_val_loss: float


@dataclass
class TrainResult:
    params: ModelParams  # best-validation-loss checkpoint
    final_params: ModelParams
    history: list[EpochStats]


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int) -> MetricReport:
    total = tp + fp + fn + tn
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    accuracy = (tp + tn) / total if total > 0 else 0.0
    return MetricReport(accuracy, precision, recall, f1, tp, fp, fn, tn)


def load_pairs(
    manifest: Manifest, ids: frozenset[str] | set[str] | None = None
) -> list[tuple[str, np.ndarray, int]]:
    """Resolve manifest records into (prompt, image, label01) triples."""
    root = manifest.root if manifest.root is not None else Path(".")
    triples = []
    for s in manifest.samples:
        if ids is not None and s.id not in ids:
            continue
        image = load_image_tensor(Path(root) / s.image_ref)
        triples.append((s.prompt, image, 1 if s.label == POSITIVE_LABEL else 0))
    return triples


def _dataset_loss_and_accuracy(
    params: ModelParams, pairs: list[tuple[str, np.ndarray, int]], threshold: float
) -> tuple[float, float]:
    loss = 0.0
    correct = 0
    for prompt, image, label in pairs:
        out, _ = forward(params, prompt, image, threshold)
        loss += -np.log(max(out.cache["probs"][label], 1e-300))
        predicted = 1 if out.prob_nsfw >= threshold else 0
        correct += int(predicted == label)
    n = len(pairs)
    return loss / n, correct / n


def train(
    manifest: Manifest,
    split: Split,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
) -> TrainResult:
    """Plain mini-batch SGD (w <- w - lr * g) over the train split.

    The seed fixes both initialization and per-epoch shuffles; the best
    validation-loss checkpoint is retained alongside the final weights.
    """
    manifest_ids = {s.id for s in manifest.samples}
    if set(split.train_ids) | set(split.val_ids) != manifest_ids or (
        set(split.train_ids) & set(split.val_ids)
    ):
        raise ValidationError("split does not partition the manifest ids")
    if not split.train_ids or not split.val_ids:
        raise EmptyDatasetError("both split sides must be non-empty")

    model_config = model_config or ModelConfig()
    model_config = dataclasses.replace(model_config, seed=config.seed)
    params = init_params(model_config)

    train_pairs = load_pairs(manifest, split.train_ids)
    val_pairs = load_pairs(manifest, split.val_ids)

    shuffle_rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))
    history: list[EpochStats] = []
    best_val = float("inf")
    best_params = params.copy()

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train_pairs))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [train_pairs[i] for i in order[start : start + config.batch_size]]
            loss, grads = batch_loss_and_gradients(params, batch)
            for name, g in grads.items():
                params.tensors[name] -= config.learning_rate * g
            epoch_loss += loss * len(batch)
        epoch_loss /= len(train_pairs)

        val_loss, val_acc = _dataset_loss_and_accuracy(params, val_pairs, config.threshold)
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
        history.append(EpochStats(epoch, epoch_loss, val_loss, val_acc, best_val))

    return TrainResult(params=best_params, final_params=params, history=history)


def evaluate_metrics(
    params: ModelParams,
    samples: list[LabeledSample],
    threshold: float = 0.5,
    root: Path | str | None = None,
) -> MetricReport:
    """Confusion counts and derived metrics with NSFW as the positive class."""
    if not samples:
        raise EmptyDatasetError("cannot evaluate an empty subset")
    root = Path(root) if root is not None else Path(".")
    tp = fp = fn = tn = 0
    for s in samples:
        image = load_image_tensor(root / s.image_ref)
        out, _ = forward(params, s.prompt, image, threshold)
        predicted_nsfw = out.prob_nsfw >= threshold
        actual_nsfw = s.label == POSITIVE_LABEL
        if predicted_nsfw and actual_nsfw:
            tp += 1
        elif predicted_nsfw and not actual_nsfw:
            fp += 1
        elif not predicted_nsfw and actual_nsfw:
            fn += 1
        else:
            tn += 1
    return metrics_from_counts(tp, fp, fn, tn)


def write_history_csv(history: list[EpochStats], path: Path | str) -> Path:
    path = Path(path)
    lines = ["epoch,train_loss,val_loss,val_accuracy"]
    for row in history:
        lines.append(
            f"{row.epoch},{row.train_loss:.6f},{row.val_loss:.6f},{row.val_accuracy:.6f}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
