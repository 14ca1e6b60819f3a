"""Loss, optimizer, schedule and the training / evaluation loops."""

from __future__ import annotations

import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from decimal import Decimal

import numpy as np

from .data import Dataset, augment, split_dataset
from .metrics import compute_metrics, confusion_matrix
from .model import ModelConfig, SwinWeights, forward_logits, init_weights
from .tensor import Tensor, as_tensor, backward, log_softmax, make_rng

__all__ = [
    "TrainConfig",
    "AdamWState",
    "EpochRecord",
    "TrainResult",
    "TrainingDivergedError",
    "label_smoothing_ce",
    "adamw_step",
    "step_lr",
    "train",
    "evaluate",
    "predict",
]

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at optimizer step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    step_size: int = 3
    gamma: float = 0.97
    smoothing: float = 0.1
    weight_decay: float = 0.05
    batch_size: int = 16
    seed: int = 0
    split: float = 0.7
    init_std: float = 0.02

    def __post_init__(self):
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError(f"smoothing must lie in [0, 1), got {self.smoothing}")
        if not 0.0 < self.split < 1.0:
            raise ValueError(f"split must lie in (0, 1), got {self.split}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.epochs < 1 or self.batch_size < 1 or self.step_size < 1:
            raise ValueError("epochs, batch_size and step_size must be positive")


def label_smoothing_ce(logits, target, smoothing: float = 0.1) -> Tensor:
    """Cross-entropy against ``smoothing/K + (1-smoothing)*onehot``.

    ``logits`` is ``(K,)`` or ``(B, K)``; batched losses are averaged.
    """
    logits = as_tensor(logits)
    k = logits.shape[-1]
    if k < 2:
        raise ValueError("need at least two classes")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    target = np.asarray(target, dtype=np.int64)
    if target.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"class index out of range 0..{k - 1}: {target}")
    t = np.full(logits.shape, smoothing / k, dtype=logits.dtype)
    np.put_along_axis(t, target[..., None], smoothing / k + (1.0 - smoothing), axis=-1)
    per_sample = (log_softmax(logits) * Tensor(t)).sum(axis=-1) * -1.0
    if per_sample.ndim == 0:
        return per_sample
    return per_sample.mean()


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.05) -> dict:
    """In-place AdamW update with decoupled weight decay; returns ``params``."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, theta in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps) + weight_decay * theta
        theta -= (lr * update).astype(theta.dtype, copy=False)
    return params


def step_lr(epoch: int, lr0: float = 1e-3, step: int = 3, gamma: float = 0.97) -> float:
    """``lr0 * gamma ** (epoch // step)``, rounded to float once.

    The product is formed in decimal from the shortest repr of each input, so
    e.g. epoch 3 gives exactly ``0.00097`` rather than ``0.0009699999999999999``.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    exact = Decimal(repr(float(lr0))) * Decimal(repr(float(gamma))) ** (epoch // step)
    return float(exact)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    weights: SwinWeights
    log: list[EpochRecord]
    train_index: np.ndarray
    test_index: np.ndarray
    confusion: np.ndarray
    metrics: dict
    epoch_seconds: list[float] = field(default_factory=list)


def _crop_batch(images, index, size, rng, training):
    return np.stack([augment(images[i], rng, size, training) for i in index])


def predict(weights: SwinWeights, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Inference-mode logits for already-cropped images ``(N, S, S, 3)``."""
    config = weights.config
    out = []
    for start in range(0, len(images), batch_size):
        out.append(forward_logits(images[start : start + batch_size], weights, config).data)
    return np.concatenate(out) if out else np.zeros((0, config.num_classes))


def evaluate(weights: SwinWeights, dataset: Dataset, index=None, smoothing: float = 0.1,
             batch_size: int = 64) -> tuple[float, np.ndarray]:
    """Mean smoothed loss and confusion matrix on center crops of ``dataset[index]``."""
    config = weights.config
    index = np.arange(len(dataset)) if index is None else np.asarray(index)
    crops = _crop_batch(dataset.images, index, config.image_size, None, False)
    crops = crops.astype(next(iter(weights.arrays.values())).dtype, copy=False)
    logits = predict(weights, crops, batch_size)
    labels = dataset.labels[index]
    loss = label_smoothing_ce(logits, labels, smoothing).item() if len(index) else float("nan")
    cm = confusion_matrix(labels, logits.argmax(axis=-1), config.num_classes)
    return loss, cm


def train(model_config: ModelConfig, train_config: TrainConfig, dataset: Dataset,
          weights: SwinWeights | None = None, on_epoch=None) -> TrainResult:
    """Seeded epoch loop: augment -> forward -> smoothed CE -> backward -> AdamW.

    Validation uses the held-out part of the split each epoch. ``on_epoch`` is
    called with every :class:`EpochRecord` as it is produced.
    """
    if dataset.num_classes != model_config.num_classes:
        raise ValueError(
            f"dataset has {dataset.num_classes} classes, model expects {model_config.num_classes}"
        )
    tc = train_config
    train_idx, test_idx = split_dataset(dataset.labels, tc.split, tc.seed)
    if weights is None:
        weights = init_weights(model_config, seed=tc.seed, std=tc.init_std)
    weights = weights.copy()
    dtype = next(iter(weights.arrays.values())).dtype
    rng = make_rng(tc.seed, stream=3)
    state = AdamWState()
    history: list[EpochRecord] = []
    seconds: list[float] = []

    for epoch in range(tc.epochs):
        t0 = time.perf_counter()
        lr = step_lr(epoch, tc.lr, tc.step_size, tc.gamma)
        order = rng.permutation(train_idx)
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), tc.batch_size):
            batch = order[start : start + tc.batch_size]
            x = _crop_batch(dataset.images, batch, model_config.image_size, rng, True).astype(dtype)
            y = dataset.labels[batch]
            params = weights.as_tensors(requires_grad=True)
            logits = forward_logits(x, params, model_config, training=True, rng=rng)
            loss = label_smoothing_ce(logits, y, tc.smoothing)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(state.step + 1, value)
            grads = backward(loss, list(params.values()))
            adamw_step(weights.arrays, OrderedDict(zip(params, grads)), state, lr,
                       weight_decay=tc.weight_decay)
            loss_sum += value * len(batch)
            correct += int((logits.data.argmax(axis=-1) == y).sum())
        val_loss, cm = evaluate(weights, dataset, test_idx, tc.smoothing)
        record = EpochRecord(
            epoch=epoch + 1,
            lr=lr,
            train_loss=loss_sum / len(order),
            train_acc=correct / len(order),
            val_loss=val_loss,
            val_acc=float(np.trace(cm) / cm.sum()),
        )
        history.append(record)
        seconds.append(time.perf_counter() - t0)
        log.info(
            "epoch %d lr %.6g train loss %.4f acc %.4f | val loss %.4f acc %.4f",
            record.epoch, lr, record.train_loss, record.train_acc, record.val_loss, record.val_acc,
        )
        if on_epoch is not None:
            on_epoch(record)

    _, cm = evaluate(weights, dataset, test_idx, tc.smoothing)
    return TrainResult(weights, history, train_idx, test_idx, cm, compute_metrics(cm), seconds)
