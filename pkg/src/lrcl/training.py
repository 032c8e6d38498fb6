"""Optimizers, the cosine schedule, and the three training loops.

Pretraining (left-right or rotation-SimCLR) runs SGD with a per-step
cosine-decayed learning rate on the contrastive loss. Classification
(finetune or supervised-from-scratch) runs Adam on cross-entropy with
early stopping on validation loss and restores the best epoch's weights.
Every loop is bitwise deterministic given (seed, config, dataset): all
randomness flows through child streams of one seeded generator
(tag 1 shuffling, tag 2 dropout, tag 3 parameter init, tag 4 rotations).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import contrastive, model
from . import tensor_core as tc
from .data import WindowedDataset
from .errors import ConfigError, DataError, NumericError, ParameterError
from .model import ClassifierParams, EncoderParams, HeadParams
from .tensor_core import Rng, Tensor, zero_grads


@dataclass
class PretrainConfig:
    batch_size: int = 64
    temperature: float = 0.05
    base_lr: float = 0.004
    epochs: int = 200
    seed: int = 0
    momentum: float = 0.0  # plain SGD unless raised
    simclr_side: str = "left"

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ParameterError(
                "contrastive pretraining needs batch_size >= 2 "
                "(a single pair has no negatives and zero loss)"
            )
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.simclr_side not in ("left", "right"):
            raise ConfigError(f"simclr_side must be left or right, got {self.simclr_side!r}")


@dataclass
class FinetuneConfig:
    lr: float = 0.0001
    epochs: int = 50
    patience: int = 5
    batch_size: int = 64
    seed: int = 0
    freeze_policy: str = "last_conv"  # last_conv | all | none
    input_policy: str = "both"  # left | right | both

    def __post_init__(self) -> None:
        if self.patience < 1:
            raise ParameterError(f"patience must be >= 1, got {self.patience}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.freeze_policy not in ("last_conv", "all", "none"):
            raise ConfigError(f"unknown freeze_policy {self.freeze_policy!r}")
        if self.input_policy not in ("left", "right", "both"):
            raise ConfigError(f"unknown input_policy {self.input_policy!r}")


@dataclass
class LossTrace:
    """Per-step and per-epoch losses plus the validation curve."""

    steps: list[tuple[int, int, float]] = field(default_factory=list)  # (step, epoch, loss)
    epoch_means: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)

    def record_step(self, step: int, epoch: int, loss: float) -> None:
        self.steps.append((step, epoch, loss))

    def rows(self) -> list[tuple[int, int, str, float]]:
        out = [(s, e, "train", v) for s, e, v in self.steps]
        last_step_of_epoch: dict[int, int] = {}
        for s, e, _ in self.steps:
            last_step_of_epoch[e] = s
        for i, v in enumerate(self.epoch_means, start=1):
            out.append((last_step_of_epoch.get(i, 0), i, "train_epoch", v))
        for i, v in enumerate(self.val_losses, start=1):
            out.append((last_step_of_epoch.get(i, 0), i, "validation", v))
        out.sort(key=lambda r: (r[1], r[0], r[2]))
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "epoch", "split", "value"])
            for row in self.rows():
                writer.writerow([row[0], row[1], row[2], f"{row[3]:.9g}"])


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr at step 0, decaying along a half cosine to 0 at total_steps."""
    if total_steps < 1:
        raise ParameterError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ParameterError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(
    params: dict[str, Tensor],
    lr: float,
    momentum: float = 0.0,
    velocities: dict[str, np.ndarray] | None = None,
) -> None:
    """theta <- theta - lr * grad on trainable tensors with gradients."""
    for name, t in params.items():
        if not t.requires_grad or t.grad is None:
            continue
        if momentum > 0.0:
            assert velocities is not None
            v = velocities.get(name)
            if v is None:
                v = np.zeros_like(t.data)
            v = momentum * v + t.grad
            velocities[name] = v
            t.data -= (lr * v).astype(t.data.dtype, copy=False)
        else:
            t.data -= (lr * t.grad).astype(t.data.dtype, copy=False)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    t: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam update; t counts steps from 1."""
    if t < 1:
        raise ParameterError(f"Adam step counter must be >= 1, got {t}")
    for name, tensor in params.items():
        if not tensor.requires_grad or tensor.grad is None:
            continue
        g = tensor.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(tensor.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        tensor.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(
            tensor.data.dtype, copy=False
        )


class EarlyStopper:
    """Stop after `patience` epochs without strict validation improvement."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ParameterError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self._epoch = 0

    def update(self, loss: float) -> bool:
        """Feed one epoch's validation loss; returns True on improvement."""
        self._epoch += 1
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = self._epoch
            return True
        return False

    @property
    def should_stop(self) -> bool:
        return self._epoch - self.best_epoch >= self.patience


def _check_finite(loss: float, step: int) -> None:
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss} at step {step}")


def _stack(pairs, side: str) -> np.ndarray:
    if side == "left":
        return np.stack([p.left for p in pairs])
    return np.stack([p.right for p in pairs])


def _pretrain_loop(
    dataset: WindowedDataset,
    encoder: EncoderParams,
    head: HeadParams,
    cfg: PretrainConfig,
    make_views: Callable[[list, Rng], tuple[np.ndarray, np.ndarray]],
) -> LossTrace:
    n_pairs = len(dataset.pairs)
    batches_per_epoch = n_pairs // cfg.batch_size  # final short batch dropped
    if batches_per_epoch == 0:
        raise DataError(
            f"dataset of {n_pairs} pairs is smaller than one batch of {cfg.batch_size}"
        )
    total_steps = cfg.epochs * batches_per_epoch
    root = Rng(cfg.seed)
    shuffle_rng = root.derive(1)
    dropout_rng = root.derive(2)
    view_rng = root.derive(4)

    params = {f"encoder.{k}": t for k, t in encoder.tensors().items()}
    params.update({f"head.{k}": t for k, t in head.tensors().items()})
    velocities: dict[str, np.ndarray] = {}

    trace = LossTrace()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n_pairs)
        epoch_losses = []
        for b in range(batches_per_epoch):
            batch = [dataset.pairs[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            view_a, view_b = make_views(batch, view_rng)
            za = model.head_forward(
                head, model.encoder_forward(encoder, Tensor(view_a), True, dropout_rng)
            )
            zb = model.head_forward(
                head, model.encoder_forward(encoder, Tensor(view_b), True, dropout_rng)
            )
            z = contrastive.interleave_embeddings(za, zb)
            loss = contrastive.nt_xent(z, cfg.temperature)
            value = loss.item()
            _check_finite(value, step)
            loss.backward()
            lr = cosine_lr(step, total_steps, cfg.base_lr)
            sgd_step(params, lr, cfg.momentum, velocities)
            zero_grads(params.values())
            trace.record_step(step, epoch, value)
            epoch_losses.append(value)
            step += 1
        trace.epoch_means.append(float(np.mean(epoch_losses)))
    return trace


def pretrain_lr_ssl(
    dataset: WindowedDataset,
    encoder: EncoderParams,
    head: HeadParams,
    cfg: PretrainConfig,
) -> tuple[EncoderParams, HeadParams, LossTrace]:
    """Contrastive pretraining on synchronized left/right windows (no labels)."""

    def views(batch, _rng):
        return _stack(batch, "left"), _stack(batch, "right")

    trace = _pretrain_loop(dataset, encoder, head, cfg, views)
    return encoder, head, trace


def pretrain_simclr(
    dataset: WindowedDataset,
    encoder: EncoderParams,
    head: HeadParams,
    cfg: PretrainConfig,
    rotation_sampler: Callable[[Rng], np.ndarray] = contrastive.random_rotation,
) -> tuple[EncoderParams, HeadParams, LossTrace]:
    """Rotation-SimCLR baseline: two independently rotated views per window.

    Uses a single side's stream (cfg.simclr_side). `rotation_sampler` is a
    test seam; the default draws fresh rotations per window per epoch.
    """

    def views(batch, rng: Rng):
        windows = _stack(batch, cfg.simclr_side)
        r1 = np.stack([rotation_sampler(rng) for _ in batch])
        r2 = np.stack([rotation_sampler(rng) for _ in batch])
        return (
            contrastive.apply_rotations_batch(windows, r1),
            contrastive.apply_rotations_batch(windows, r2),
        )

    trace = _pretrain_loop(dataset, encoder, head, cfg, views)
    return encoder, head, trace


def classification_examples(
    dataset: WindowedDataset, input_policy: str
) -> list[tuple[np.ndarray, int]]:
    """Expand labeled pairs into (window, label) examples per input policy.

    "both" treats the two sides as independent examples, doubling the set.
    """
    out = []
    for p in dataset.pairs:
        if p.label < 0:
            continue
        if input_policy in ("left", "both"):
            out.append((p.left, p.label))
        if input_policy in ("right", "both"):
            out.append((p.right, p.label))
    return out


def _apply_freeze_policy(encoder: EncoderParams, policy: str) -> None:
    frozen: Sequence[str]
    if policy == "none":
        frozen = ()
    elif policy == "last_conv":
        frozen = ("conv1_w", "conv1_b", "conv2_w", "conv2_b")
    else:  # "all": linear probe
        frozen = tuple(encoder.tensors())
    for name, t in encoder.tensors().items():
        t.requires_grad = name not in frozen


def _mean_val_loss(
    encoder: EncoderParams,
    classifier: ClassifierParams,
    examples: list[tuple[np.ndarray, int]],
    batch_size: int,
) -> float:
    total = 0.0
    for i in range(0, len(examples), batch_size):
        chunk = examples[i : i + batch_size]
        x = Tensor(np.stack([w for w, _ in chunk]))
        y = np.array([label for _, label in chunk], dtype=np.int64)
        h = model.encoder_forward(encoder, x, training=False)
        logits = model.classifier_forward(classifier, h)
        total += tc.softmax_cross_entropy(logits, y).item() * len(chunk)
    return total / len(examples)


def _train_classifier(
    encoder: EncoderParams,
    classifier: ClassifierParams,
    train_set: WindowedDataset,
    val_set: WindowedDataset,
    cfg: FinetuneConfig,
    val_loss_fn: Callable[[int], float] | None = None,
    on_epoch_end: Callable[[int, EncoderParams, ClassifierParams], None] | None = None,
) -> tuple[LossTrace, int]:
    train_examples = classification_examples(train_set, cfg.input_policy)
    if not train_examples:
        raise DataError("no labeled training windows")
    present = {label for _, label in train_examples}
    missing = [c for c in range(train_set.n_classes) if c not in present]
    if missing:
        raise DataError(
            f"classes {missing} have no labeled training windows"
        )
    val_examples = classification_examples(val_set, cfg.input_policy)
    if not val_examples and val_loss_fn is None:
        raise ConfigError("validation set has no labeled windows")

    root = Rng(cfg.seed)
    shuffle_rng = root.derive(1)
    dropout_rng = root.derive(2)

    params = {f"encoder.{k}": t for k, t in encoder.tensors().items()}
    params.update({f"classifier.{k}": t for k, t in classifier.tensors().items()})
    state = AdamState()
    stopper = EarlyStopper(cfg.patience)
    best: dict[str, np.ndarray] = {}

    trace = LossTrace()
    step = 0
    t_adam = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_examples))
        epoch_losses = []
        for i in range(0, len(order), cfg.batch_size):
            chunk = [train_examples[j] for j in order[i : i + cfg.batch_size]]
            x = Tensor(np.stack([w for w, _ in chunk]))
            y = np.array([label for _, label in chunk], dtype=np.int64)
            h = model.encoder_forward(encoder, x, training=True, rng=dropout_rng)
            logits = model.classifier_forward(classifier, h)
            loss = tc.softmax_cross_entropy(logits, y)
            value = loss.item()
            _check_finite(value, step)
            loss.backward()
            t_adam += 1
            adam_step(params, state, cfg.lr, t_adam)
            zero_grads(params.values())
            trace.record_step(step, epoch, value)
            epoch_losses.append(value)
            step += 1
        trace.epoch_means.append(float(np.mean(epoch_losses)))

        if val_loss_fn is not None:
            val_loss = float(val_loss_fn(epoch))
        else:
            val_loss = _mean_val_loss(encoder, classifier, val_examples, cfg.batch_size)
        _check_finite(val_loss, step)
        trace.val_losses.append(val_loss)
        if stopper.update(val_loss):
            best = {name: t.data.copy() for name, t in params.items()}
        if on_epoch_end is not None:
            on_epoch_end(epoch, encoder, classifier)
        if stopper.should_stop:
            break

    for name, t in params.items():
        if name in best:
            t.data = best[name]
    return trace, stopper.best_epoch


def finetune(
    encoder: EncoderParams,
    classifier: ClassifierParams,
    train_set: WindowedDataset,
    val_set: WindowedDataset,
    cfg: FinetuneConfig,
    val_loss_fn: Callable[[int], float] | None = None,
    on_epoch_end: Callable[[int, EncoderParams, ClassifierParams], None] | None = None,
) -> tuple[EncoderParams, ClassifierParams, LossTrace, int]:
    """Finetune a pretrained encoder plus a fresh classifier.

    The projection head plays no part here. With the default freeze
    policy only the last conv layer and the classifier train; frozen
    tensors stay bitwise identical. Returns the weights of the best
    validation epoch. `val_loss_fn` and `on_epoch_end` are test seams.
    """
    _apply_freeze_policy(encoder, cfg.freeze_policy)
    trace, best_epoch = _train_classifier(
        encoder, classifier, train_set, val_set, cfg, val_loss_fn, on_epoch_end
    )
    return encoder, classifier, trace, best_epoch


def train_supervised(
    train_set: WindowedDataset,
    val_set: WindowedDataset,
    cfg: FinetuneConfig,
    dropout_rate: float = model.DEFAULT_DROPOUT_RATE,
) -> tuple[EncoderParams, ClassifierParams, LossTrace, int]:
    """From-scratch baseline: fresh encoder+classifier trained end to end."""
    root = Rng(cfg.seed)
    init_rng = root.derive(3)
    encoder = model.init_encoder(init_rng, dropout_rate=dropout_rate)
    classifier = model.init_classifier(init_rng, train_set.n_classes)
    _apply_freeze_policy(encoder, "none")
    trace, best_epoch = _train_classifier(
        encoder, classifier, train_set, val_set, cfg
    )
    return encoder, classifier, trace, best_epoch
