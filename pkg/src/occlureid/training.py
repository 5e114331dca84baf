"""Optimizers, learning-rate schedules, and the training loop.

Defaults mirror the published configuration: base learning rate 0.1,
momentum 0.95, weight decay 1e-4, batch size 50, adam. The stepwise
schedule divides the rate by 10 every 10 epochs; a one-cycle schedule
driven by cycle_length and pct_start sits behind the ``schedule`` switch.

Weight decay is decoupled (applied directly to the parameter, scaled by
the learning rate) and touches only weight matrices and kernels, never
biases or normalization parameters. After every step the parameters are
rounded through float32, which keeps checkpoints bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import LabeledImage, OcclusionClass
from .gru import cross_entropy
from .network import Model

OPTIMISERS = ("adam", "sgd-momentum")
SCHEDULES = ("stepwise", "one-cycle")

STEP_DECAY_EPOCHS = 10
STEP_DECAY_FACTOR = 0.1

ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# One-cycle shape: ramp from base/10 up to base over the pct_start fraction
# of each cycle, then anneal linearly down to base/100.
CYCLE_START_DIV = 10.0
CYCLE_FINAL_DIV = 100.0

INT_FIELDS = ("batch_size", "epochs", "seed", "cycle_length")
FLOAT_FIELDS = ("base_learning_rate", "momentum", "weight_decay", "pct_start")


class TrainingError(RuntimeError):
    """Raised when a run must abort (non-finite loss, bad data)."""


@dataclass(frozen=True)
class TrainConfig:
    base_learning_rate: float = 0.1
    schedule: str = "stepwise"
    momentum: float = 0.95
    weight_decay: float = 1e-4
    batch_size: int = 50
    optimiser: str = "adam"
    epochs: int = 20
    seed: int = 0
    cycle_length: int = 10
    pct_start: float = 0.9

    def __post_init__(self) -> None:
        if self.base_learning_rate < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.base_learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.optimiser not in OPTIMISERS:
            raise ValueError(f"unknown optimiser {self.optimiser!r}; expected one of {OPTIMISERS}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.cycle_length < 1:
            raise ValueError(f"cycle length must be >= 1, got {self.cycle_length}")
        if not 0.0 < self.pct_start <= 1.0:
            raise ValueError(f"pct_start must be in (0, 1], got {self.pct_start}")


def parse_train_config(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """Parse ``key = value`` lines; blank lines and # comments are skipped."""
    overrides: Dict[str, object] = {}
    known = {f.name for f in fields(TrainConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            if key in INT_FIELDS:
                overrides[key] = int(value)
            elif key in FLOAT_FIELDS:
                overrides[key] = float(value)
            else:
                overrides[key] = value
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: bad value {value!r} for {key}") from exc
    return replace(base or TrainConfig(), **overrides)


def load_train_config(path: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_train_config(fh.read(), base)


def learning_rate_for_epoch(tc: TrainConfig, epoch: int) -> float:
    """Learning rate in effect for the given zero-based epoch."""
    base = tc.base_learning_rate
    if tc.schedule == "stepwise":
        return base * STEP_DECAY_FACTOR ** (epoch // STEP_DECAY_EPOCHS)
    position = (epoch % tc.cycle_length) / tc.cycle_length
    low, floor = base / CYCLE_START_DIV, base / CYCLE_FINAL_DIV
    if position < tc.pct_start:
        return low + (base - low) * (position / tc.pct_start)
    down = (position - tc.pct_start) / (1.0 - tc.pct_start) if tc.pct_start < 1.0 else 0.0
    return base + (floor - base) * down


class AdamOptimizer:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, model: Model, tc: TrainConfig) -> None:
        self.model = model
        self.beta1 = tc.momentum
        self.weight_decay = tc.weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p, _, _ in model.parameter_slots()}
        self.v = {name: np.zeros_like(p) for name, p, _, _ in model.parameter_slots()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, ADAM_BETA2
        for name, param, grad, decayed in self.model.parameter_slots():
            m = self.m[name]
            v = self.v[name]
            m[...] = b1 * m + (1.0 - b1) * grad
            v[...] = b2 * v + (1.0 - b2) * grad * grad
            m_hat = m / (1.0 - b1 ** self.t)
            v_hat = v / (1.0 - b2 ** self.t)
            param[...] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
            if decayed:
                param[...] -= lr * self.weight_decay * param


class MomentumOptimizer:
    """Classic momentum SGD with the same decoupled weight decay."""

    def __init__(self, model: Model, tc: TrainConfig) -> None:
        self.model = model
        self.momentum = tc.momentum
        self.weight_decay = tc.weight_decay
        self.velocity = {name: np.zeros_like(p) for name, p, _, _ in model.parameter_slots()}

    def step(self, lr: float) -> None:
        for name, param, grad, decayed in self.model.parameter_slots():
            vel = self.velocity[name]
            vel[...] = self.momentum * vel + grad
            param[...] -= lr * vel
            if decayed:
                param[...] -= lr * self.weight_decay * param


def make_optimizer(model: Model, tc: TrainConfig):
    if tc.optimiser == "adam":
        return AdamOptimizer(model, tc)
    return MomentumOptimizer(model, tc)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    learning_rate: float
    train_loss: float
    train_accuracy: float
    val_loss: Optional[float] = None
    val_accuracy: Optional[float] = None


def _as_arrays(dataset: Sequence[LabeledImage], class_count: int):
    if not dataset:
        raise TrainingError("dataset is empty")
    images = np.stack([img.pixels for img in dataset])
    labels = np.array([int(img.occlusion) for img in dataset])
    if labels.min() < 0 or labels.max() >= class_count:
        raise TrainingError(f"labels must fall in the {class_count} known classes")
    targets = np.zeros((len(labels), class_count))
    targets[np.arange(len(labels)), labels] = 1.0
    return images, labels, targets


def toy_overfit_config() -> TrainConfig:
    """Recipe that drives the toy profile to >= 99% on the bundled fixture.

    A single one-cycle ramp sized well past the actual stopping point keeps
    the learning rate from decaying before the saturated recurrent units
    have committed; stepwise decay stalls below the target on this fixture.
    """
    return TrainConfig(
        base_learning_rate=0.01,
        schedule="one-cycle",
        cycle_length=200,
        pct_start=0.3,
        epochs=200,
        batch_size=20,
        optimiser="adam",
        seed=0,
    )


def evaluate(model: Model, dataset: Sequence[LabeledImage], batch_size: int = 50):
    """(mean loss, accuracy, predicted classes) in inference mode."""
    images, labels, targets = _as_arrays(dataset, model.config.class_count)
    total_loss = 0.0
    predictions = np.zeros(len(labels), dtype=int)
    for start in range(0, len(labels), batch_size):
        stop = min(start + batch_size, len(labels))
        readout = model.forward(images[start:stop])
        total_loss += cross_entropy(readout, targets[start:stop])
        predictions[start:stop] = np.argmax(readout, axis=1)
    accuracy = float(np.mean(predictions == labels))
    predicted_classes = [OcclusionClass(int(p)) for p in predictions]
    return total_loss / len(labels), accuracy, predicted_classes


def train(
    model: Model,
    dataset: Sequence[LabeledImage],
    tc: TrainConfig,
    val_dataset: Optional[Sequence[LabeledImage]] = None,
    truncation: Optional[int] = None,
    stop_at_accuracy: Optional[float] = None,
) -> List[EpochStats]:
    """Run the configured optimization; returns per-epoch history.

    Losses are mean cross-entropy per sample. The train columns come from
    the optimization batches; validation columns are inference-mode passes
    over ``val_dataset`` after each epoch. ``stop_at_accuracy`` ends the
    run once an inference-mode pass over the training set reaches the
    target. Same seed, data, and config give an identical history.
    """
    images, labels, targets = _as_arrays(dataset, model.config.class_count)
    rng = np.random.default_rng(tc.seed)
    optimizer = make_optimizer(model, tc)
    history: List[EpochStats] = []
    for epoch in range(tc.epochs):
        lr = learning_rate_for_epoch(tc, epoch)
        order = rng.permutation(len(labels))
        epoch_loss = 0.0
        correct = 0
        for start in range(0, len(order), tc.batch_size):
            batch = order[start : start + tc.batch_size]
            model.zero_grads()
            trace, readout = model.forward_train(images[batch])
            loss = cross_entropy(readout, targets[batch])
            if not np.isfinite(loss):
                raise TrainingError(f"loss became non-finite at step {model.step}")
            model.backward(trace, targets[batch], scale=1.0 / len(batch), truncation=truncation)
            optimizer.step(lr)
            model.snap_to_f32()
            model.step += 1
            epoch_loss += loss
            correct += int(np.sum(np.argmax(readout, axis=1) == labels[batch]))
        stats = EpochStats(
            epoch=epoch,
            learning_rate=lr,
            train_loss=epoch_loss / len(labels),
            train_accuracy=correct / len(labels),
        )
        if val_dataset is not None:
            val_loss, val_accuracy, _ = evaluate(model, val_dataset, tc.batch_size)
            stats = replace(stats, val_loss=val_loss, val_accuracy=val_accuracy)
        history.append(stats)
        if stop_at_accuracy is not None:
            _, train_acc, _ = evaluate(model, dataset, tc.batch_size)
            if train_acc >= stop_at_accuracy:
                break
    model.rng_state = rng.bit_generator.state
    return history
