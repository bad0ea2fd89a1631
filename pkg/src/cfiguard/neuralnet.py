"""Dense feed-forward gadget-chain classifier trained with plain SGD.

Layers are affine maps ``a @ W + b`` with ``W`` shaped ``(fan_in, fan_out)``;
hidden layers use ReLU and inverted dropout, the output layer feeds a softmax
over (benign, malicious). A model with no hidden layers is the
logistic-regression baseline.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field, replace
import json
import logging
from pathlib import Path
from typing import Any, Literal, Sequence

import numpy as np

from .encoder import Dataset, Partition
from .errors import ConfigError, DataError
from .fingerprint import canonical_json, sha256_hex

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cfiguard-model"
CHECKPOINT_VERSION = 1
DEFAULT_HIDDEN = (1024, 512, 128, 32)

Mode = Literal["train", "eval"]


class DimensionMismatch(DataError, ValueError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"Expected feature vectors of length {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class NonFiniteLoss(DataError, ArithmeticError):
    pass


class CheckpointFormatError(DataError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 96
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    keep_prob: float = 0.5
    classes: int = 2
    learning_rate: float = 0.01
    batch_size: int = 128
    epochs: int = 30
    patience: int = 5
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.classes < 1 or any(size < 1 for size in self.hidden):
            raise ConfigError("Layer sizes must all be at least 1")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError("keep_prob must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size and patience must be positive, epochs non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.classes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "keep_prob": self.keep_prob,
            "classes": self.classes,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "patience": self.patience,
            "seed": self.seed,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> ModelConfig:
        return cls(**{**payload, "hidden": tuple(payload.get("hidden", DEFAULT_HIDDEN))})


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    val_accuracy: float


@dataclass
class Model:
    config: ModelConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [tuple(weight.shape) for weight in self.weights]

    def copy(self) -> Model:
        return Model(
            config=self.config,
            weights=[weight.copy() for weight in self.weights],
            biases=[bias.copy() for bias in self.biases],
            history=list(self.history),
        )

    def to_document(self) -> dict[str, Any]:
        def _encode(array: np.ndarray) -> str:
            return base64.b64encode(np.ascontiguousarray(array, dtype="<f4").tobytes()).decode("ascii")

        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "shapes": [list(shape) for shape in self.shapes],
            "weights": [_encode(weight) for weight in self.weights],
            "biases": [_encode(bias) for bias in self.biases],
            "history": [
                {"epoch": record.epoch, "loss": record.loss, "val_accuracy": record.val_accuracy}
                for record in self.history
            ],
        }

    def dumps(self) -> str:
        return canonical_json(self.to_document()) + "\n"

    @property
    def digest(self) -> str:
        return sha256_hex(self.dumps())

    @property
    def weight_hash(self) -> str:
        document = self.to_document()
        return sha256_hex(canonical_json({"weights": document["weights"], "biases": document["biases"]}))

    @classmethod
    def from_document(cls, document: dict[str, Any]) -> Model:
        if document.get("format") != CHECKPOINT_FORMAT or document.get("version") != CHECKPOINT_VERSION:
            raise CheckpointFormatError("Not a model checkpoint")
        try:
            config = ModelConfig.from_dict(document["config"])
            dtype = np.dtype(config.dtype)
            shapes = [tuple(shape) for shape in document["shapes"]]
            weights = [
                np.frombuffer(base64.b64decode(blob), dtype="<f4").reshape(shape).astype(dtype)
                for blob, shape in zip(document["weights"], shapes)
            ]
            biases = [
                np.frombuffer(base64.b64decode(blob), dtype="<f4").reshape(shape[1]).astype(dtype)
                for blob, shape in zip(document["biases"], shapes)
            ]
            history = [EpochRecord(int(r["epoch"]), float(r["loss"]), float(r["val_accuracy"])) for r in document["history"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointFormatError(f"Corrupt checkpoint: {exc}") from exc
        expected = list(zip(config.layer_sizes, config.layer_sizes[1:]))
        if shapes != expected:
            raise CheckpointFormatError(f"Checkpoint shapes {shapes} do not match config {expected}")
        return cls(config, weights, biases, history)

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def read(cls, path: Path) -> Model:
        try:
            document = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CheckpointFormatError(f"Checkpoint is not JSON: {exc}") from exc
        return cls.from_document(document)


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def false_positive_rate(self) -> float:
        negatives = self.fp + self.tn
        return self.fp / negatives if negatives else 0.0

    @property
    def false_negative_rate(self) -> float:
        positives = self.fn + self.tp
        return self.fn / positives if positives else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "accuracy": self.accuracy,
            "false_positive_rate": self.false_positive_rate,
            "false_negative_rate": self.false_negative_rate,
        }

    def row(self) -> str:
        return (
            f"accuracy {self.accuracy * 100:.1f}% "
            f"FPR {self.false_positive_rate * 100:.2f}% "
            f"FNR {self.false_negative_rate * 100:.2f}%"
        )


def init_model(config: ModelConfig) -> Model:
    rng = np.random.default_rng([config.seed, 0xA1])
    dtype = np.dtype(config.dtype)
    weights = []
    biases = []
    for fan_in, fan_out in zip(config.layer_sizes, config.layer_sizes[1:]):
        scale = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-scale, scale, size=(fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return Model(config, weights, biases)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits.astype(np.float64) - logits.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits.astype(np.float64) - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _as_batch(model: Model, x: np.ndarray) -> np.ndarray:
    batch = np.asarray(x, dtype=np.dtype(model.config.dtype))
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.ndim != 2 or batch.shape[1] != model.config.input_dim:
        raise DimensionMismatch(model.config.input_dim, batch.shape[-1] if batch.ndim else 0)
    return batch


def _forward_cache(
    model: Model, batch: np.ndarray, rng: np.random.Generator | None
) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray | None]]:
    """Return logits, the input to every layer, and the dropout masks used."""
    keep = model.config.keep_prob
    activations = [batch]
    masks: list[np.ndarray | None] = []
    current = batch
    last = len(model.weights) - 1
    for layer, (weight, bias) in enumerate(zip(model.weights, model.biases)):
        z = current @ weight + bias
        if layer == last:
            return z, activations, masks
        current = np.maximum(z, 0)
        mask = None
        if rng is not None and keep < 1.0:
            mask = (rng.random(current.shape) < keep).astype(current.dtype) / current.dtype.type(keep)
            current = current * mask
        masks.append(mask)
        activations.append(current)
    raise AssertionError("model has no layers")


def forward(
    model: Model,
    x: np.ndarray,
    mode: Mode = "eval",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Class probabilities; shape ``(2,)`` for one vector, ``(n, 2)`` for a batch."""
    single = np.ndim(x) == 1
    batch = _as_batch(model, x)
    if mode == "train" and rng is None:
        rng = np.random.default_rng([model.config.seed, 0xF0])
    logits, _, _ = _forward_cache(model, batch, rng if mode == "train" else None)
    probabilities = _softmax(logits)
    return probabilities[0] if single else probabilities


def batch_loss(model: Model, features: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy in eval mode (no dropout)."""
    logits, _, _ = _forward_cache(model, _as_batch(model, features), None)
    log_probs = _log_softmax(logits)
    return float(-log_probs[np.arange(len(labels)), np.asarray(labels)].mean())


def gradients(
    model: Model,
    features: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator | None = None,
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Loss and per-layer gradients by reverse accumulation; dropout applies when ``rng`` is given."""
    batch = _as_batch(model, features)
    targets = np.asarray(labels, dtype=np.int64)
    if batch.shape[0] != targets.shape[0]:
        raise DataError("Feature and label counts differ")
    logits, activations, masks = _forward_cache(model, batch, rng)
    log_probs = _log_softmax(logits)
    rows = np.arange(targets.shape[0])
    loss = float(-log_probs[rows, targets].mean())

    delta = np.exp(log_probs)
    delta[rows, targets] -= 1.0
    delta = (delta / targets.shape[0]).astype(batch.dtype)

    weight_grads: list[np.ndarray] = [np.empty(0)] * len(model.weights)
    bias_grads: list[np.ndarray] = [np.empty(0)] * len(model.biases)
    for layer in range(len(model.weights) - 1, -1, -1):
        weight_grads[layer] = activations[layer].T @ delta
        bias_grads[layer] = delta.sum(axis=0)
        if layer == 0:
            break
        delta = delta @ model.weights[layer].T
        mask = masks[layer - 1]
        if mask is not None:
            delta = delta * mask
        # ReLU gate: the stored activation is positive exactly where z was.
        delta = delta * (activations[layer] > 0)
    return loss, weight_grads, bias_grads


def train_step(
    model: Model,
    features: np.ndarray,
    labels: np.ndarray,
    lr: float | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    if np.size(labels) == 0:
        raise DataError("Cannot train on an empty batch")
    rate = model.config.learning_rate if lr is None else lr
    loss, weight_grads, bias_grads = gradients(model, features, labels, rng)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"Loss became {loss} (batch of {np.size(labels)}, lr={rate})")
    for layer in range(len(model.weights)):
        model.weights[layer] -= model.weights[layer].dtype.type(rate) * weight_grads[layer]
        model.biases[layer] -= model.biases[layer].dtype.type(rate) * bias_grads[layer]
    return loss


def predict(model: Model, features: np.ndarray) -> np.ndarray:
    probabilities = forward(model, np.asarray(features), mode="eval")
    probabilities = np.atleast_2d(probabilities)
    # Exact ties go to the benign class.
    return (probabilities[:, 1] > probabilities[:, 0]).astype(np.int64)


def evaluate(model: Model, features: np.ndarray | Partition, labels: np.ndarray | None = None) -> Metrics:
    if isinstance(features, Partition):
        features, labels = features.features, features.labels
    if labels is None or np.size(labels) == 0:
        raise DataError("Cannot evaluate on an empty sample list")
    truth = np.asarray(labels, dtype=np.int64)
    predicted = predict(model, features)
    return Metrics(
        tp=int(np.count_nonzero((predicted == 1) & (truth == 1))),
        fp=int(np.count_nonzero((predicted == 1) & (truth == 0))),
        tn=int(np.count_nonzero((predicted == 0) & (truth == 0))),
        fn=int(np.count_nonzero((predicted == 0) & (truth == 1))),
    )


def train(model: Model, dataset: Dataset) -> Model:
    config = model.config
    if config.epochs == 0:
        return replace(model.copy(), history=[])
    if len(dataset.train) == 0 or len(dataset.validation) == 0:
        raise DataError("Training needs non-empty train and validation partitions")
    if dataset.input_dim != config.input_dim:
        raise DimensionMismatch(config.input_dim, dataset.input_dim)

    rng = np.random.default_rng([config.seed, 0xB7])
    working = model.copy()
    working.history = []
    best = working.copy()
    best_accuracy = -1.0
    stale_epochs = 0
    features = dataset.train.features.astype(np.dtype(config.dtype), copy=False)
    labels = dataset.train.labels

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(labels))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            losses.append(train_step(working, features[batch], labels[batch], config.learning_rate, rng))
        val_accuracy = evaluate(working, dataset.validation).accuracy
        record = EpochRecord(epoch, float(np.mean(losses)), val_accuracy)
        working.history.append(record)
        logger.info("Epoch %s: loss=%.6f val_accuracy=%.4f", epoch, record.loss, val_accuracy)

        if val_accuracy > best_accuracy:
            best_accuracy = val_accuracy
            best = working.copy()
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= config.patience:
                logger.info("Validation accuracy stalled for %s epochs; stopping.", stale_epochs)
                break

    best.history = list(working.history)
    return best


def baseline_config(input_dim: int, learning_rate: float, epochs: int, seed: int, batch_size: int = 128) -> ModelConfig:
    return ModelConfig(
        input_dim=input_dim,
        hidden=(),
        keep_prob=1.0,
        learning_rate=learning_rate,
        batch_size=batch_size,
        epochs=epochs,
        seed=seed,
    )


def train_logreg(
    dataset: Dataset,
    lr: float = 0.01,
    epochs: int = 30,
    seed: int = 0,
    batch_size: int = 128,
) -> tuple[Model, Metrics]:
    model = train(init_model(baseline_config(dataset.input_dim, lr, epochs, seed, batch_size)), dataset)
    metrics = evaluate(model, dataset.test) if len(dataset.test) else Metrics(0, 0, 0, 0)
    return model, metrics


def comparison_table(rows: Sequence[tuple[str, Metrics]]) -> str:
    lines = [f"{'Method':<10} {'False Positive':>15} {'False Negative':>15} {'Accuracy':>9}"]
    for name, metrics in rows:
        lines.append(
            f"{name:<10} {metrics.false_positive_rate * 100:>14.2f}% "
            f"{metrics.false_negative_rate * 100:>14.2f}% {metrics.accuracy * 100:>8.1f}%"
        )
    return "\n".join(lines)
