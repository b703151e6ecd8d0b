"""Cross-entropy training with Adam, step-decay schedule, and hold-out metrics.

The loop is deterministic end to end for a given seed: batch order, per-sample
augmentation, and dropout masks are all keyed off (seed, epoch, step), so the
same configuration reproduces the same history byte for byte.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .data import DEFAULT_MEAN, DEFAULT_STD, AugmentPolicy, DatasetIndex, batch_iterator
from .errors import ConfigError, NumericError
from .metrics import ConfusionMatrix, ScoredPredictions, accuracy, macro_metrics
from .model import ModelConfig, ModelParams, forward, init_model, named_parameters, set_requires_grad
from .ops import log_softmax
from .tensor import Tensor, no_grad, zero_grads

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "OptimState",
    "TrainResult",
    "EvalOutcome",
    "cross_entropy",
    "lr_schedule",
    "init_optim_state",
    "adam_step",
    "evaluate",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr0: float = 1e-3
    weight_decay: float = 0.04
    decay_factor: float = 0.85
    decay_interval: int = 20
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_mode: str = "decoupled"
    class_weights: Optional[tuple[float, ...]] = None
    grad_clip: Optional[float] = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        for name in ("lr0", "decay_interval", "batch_size", "eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.decay_factor < 1.0:
            raise ConfigError(f"decay_factor must be in (0, 1), got {self.decay_factor}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        if self.decay_mode not in ("decoupled", "l2"):
            raise ConfigError(f"decay_mode must be 'decoupled' or 'l2', got {self.decay_mode!r}")
        if self.class_weights is not None:
            if any(w <= 0 for w in self.class_weights):
                raise ConfigError("class_weights must all be positive")
            object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")


def cross_entropy(logits: Tensor, labels, class_weights: Optional[Sequence[float]] = None) -> Tensor:
    """Mean of -log softmax(logits)[label]; a weighted mean when class weights are given."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"need logits (B, C) with labels (B,), got {logits.shape} and {labels.shape}")
    num_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    log_probs = log_softmax(logits, axis=-1)
    picked = log_probs[np.arange(labels.shape[0]), labels]
    if class_weights is None:
        return -picked.mean()
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (num_classes,):
        raise ValueError(f"class_weights must have length {num_classes}")
    sample_w = weights[labels]
    return (-picked * Tensor(sample_w)).sum() * (1.0 / sample_w.sum())


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """lr0 scaled by decay_factor once per completed decay interval."""
    if epoch < 0:
        raise ConfigError(f"epoch must be non-negative, got {epoch}")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_interval)


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_optim_state(params: ModelParams) -> OptimState:
    named = named_parameters(params)
    return OptimState(
        m={name: np.zeros_like(t.data) for name, t in named},
        v={name: np.zeros_like(t.data) for name, t in named},
    )


def adam_step(
    named: Sequence[tuple[str, Tensor]],
    state: OptimState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    decay_mode: str = "decoupled",
) -> None:
    """One bias-corrected Adam update in place; parameters without a gradient are left alone.

    With weight_decay == 0 both decay modes skip the decay arithmetic
    entirely, so they reduce bitwise to plain Adam.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in named:
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ValueError(f"gradient shape {p.grad.shape} does not match {name} {p.data.shape}")
        g = p.grad.astype(p.data.dtype, copy=False)
        if decay_mode == "l2" and weight_decay != 0.0:
            g = g + weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if decay_mode == "decoupled" and weight_decay != 0.0:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class EvalOutcome:
    confusion: ConfusionMatrix
    scored: ScoredPredictions
    features: Optional[np.ndarray]
    labels: np.ndarray


def evaluate(
    params: ModelParams,
    config: ModelConfig,
    index: DatasetIndex,
    split: str,
    batch_size: int = 16,
    mean: Sequence[float] = DEFAULT_MEAN,
    std: Sequence[float] = DEFAULT_STD,
    collect_features: bool = False,
) -> EvalOutcome:
    """Run the model over one split without augmentation and gather predictions."""
    pc = config.patch
    if pc.image_h != pc.image_w:
        raise ConfigError("the image pipeline resizes to squares; configure image_h == image_w")
    prob_rows: list[np.ndarray] = []
    label_rows: list[np.ndarray] = []
    feature_rows: list[np.ndarray] = []
    for images, labels in batch_iterator(
        index, split, batch_size=batch_size, seed=0, epoch=0,
        policy=None, target=pc.image_h, mean=mean, std=std,
    ):
        with no_grad():
            logits, penultimate = forward(images, params, config)
        prob_rows.append(_softmax_rows(logits.data))
        label_rows.append(labels)
        if collect_features:
            feature_rows.append(penultimate.data.astype(np.float64))
    probs = np.concatenate(prob_rows)
    labels = np.concatenate(label_rows)
    cm = ConfusionMatrix.from_predictions(labels, probs.argmax(axis=1), index.class_names)
    scored = ScoredPredictions(probs, labels)
    features = np.concatenate(feature_rows) if feature_rows else None
    return EvalOutcome(cm, scored, features, labels)


@dataclass
class TrainResult:
    history: list[dict]
    step_losses: list[float]
    best_epoch: Optional[int]
    best_val_f1: float
    params: ModelParams
    best_params: ModelParams
    optim: OptimState


def _snapshot(named: Sequence[tuple[str, Tensor]]) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in named}


def _restore(config: ModelConfig, snapshot: dict[str, np.ndarray]) -> ModelParams:
    params = init_model(config, seed=0)
    for name, t in named_parameters(params):
        t.data = snapshot[name].copy()
    return params


def train(
    params: ModelParams,
    config: ModelConfig,
    index: DatasetIndex,
    cfg: TrainConfig,
    policy: Optional[AugmentPolicy] = None,
    checkpoint_dir=None,
    mean: Sequence[float] = DEFAULT_MEAN,
    std: Sequence[float] = DEFAULT_STD,
    on_epoch: Optional[Callable[[dict], None]] = None,
    checkpoint_extra: Optional[dict[str, str]] = None,
) -> TrainResult:
    """Fit ``params`` in place; returns per-epoch history and the best-F1 snapshot.

    The best epoch is the one with the highest validation macro F1, ties
    resolved toward the earlier epoch.  When ``checkpoint_dir`` is given,
    ``best.ckpt`` holds that snapshot (weights only) and ``last.ckpt`` the
    final state including optimizer moments.
    """
    pc = config.patch
    if pc.image_h != pc.image_w:
        raise ConfigError("the image pipeline resizes to squares; configure image_h == image_w")
    if cfg.class_weights is not None and len(cfg.class_weights) != config.num_classes:
        raise ConfigError(
            f"class_weights has {len(cfg.class_weights)} entries for {config.num_classes} classes"
        )

    set_requires_grad(params, True)
    named = named_parameters(params)
    state = init_optim_state(params)
    tensors = [t for _, t in named]

    history: list[dict] = []
    step_losses: list[float] = []
    best_epoch: Optional[int] = None
    best_f1 = -math.inf
    best_state = _snapshot(named)
    last_grad_norm = float("nan")
    global_step = 0

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        loss_sum = 0.0
        sample_count = 0
        for step, (images, labels) in enumerate(
            batch_iterator(
                index, "train", batch_size=cfg.batch_size, seed=cfg.seed, epoch=epoch,
                policy=policy, target=pc.image_h, mean=mean, std=std,
            )
        ):
            zero_grads(tensors)
            rng = np.random.default_rng([cfg.seed, epoch, step, 1])
            logits, _ = forward(images, params, config, train_mode=True, rng=rng)
            loss = cross_entropy(logits, labels, cfg.class_weights)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {global_step} "
                    f"(lr={lr:.6g}, last gradient norm={last_grad_norm:.6g})"
                )
            loss.backward()

            sq_sum = 0.0
            for _, p in named:
                if p.grad is not None:
                    sq_sum += float(np.sum(p.grad.astype(np.float64) ** 2))
            grad_norm = math.sqrt(sq_sum)
            if not math.isfinite(grad_norm):
                raise NumericError(
                    f"non-finite gradient at epoch {epoch} step {global_step} "
                    f"(lr={lr:.6g}, loss={loss_value:.6g})"
                )
            if cfg.grad_clip is not None and grad_norm > cfg.grad_clip:
                scale = cfg.grad_clip / grad_norm
                for _, p in named:
                    if p.grad is not None:
                        p.grad = p.grad * scale
            adam_step(
                named, state, lr,
                weight_decay=cfg.weight_decay, beta1=cfg.beta1, beta2=cfg.beta2,
                eps=cfg.eps, decay_mode=cfg.decay_mode,
            )
            last_grad_norm = grad_norm
            batch_n = labels.shape[0]
            loss_sum += loss_value * batch_n
            sample_count += batch_n
            step_losses.append(loss_value)
            global_step += 1

        outcome = evaluate(params, config, index, "val", batch_size=cfg.batch_size, mean=mean, std=std)
        val_acc = accuracy(outcome.confusion)
        val_f1 = macro_metrics(outcome.confusion).f1
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / sample_count,
            "val_acc": val_acc,
            "val_f1": val_f1,
        }
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        log.info(
            "epoch %d: lr=%.6g train_loss=%.4f val_acc=%.2f val_f1=%.4f",
            epoch, lr, record["train_loss"], val_acc, val_f1,
        )
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_epoch = epoch
            best_state = _snapshot(named)

    best_params = _restore(config, best_state)
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        shared_extra = dict(checkpoint_extra or {})
        best_extra = {**shared_extra, "kind": "best", "epoch": str(-1 if best_epoch is None else best_epoch)}
        save_checkpoint(checkpoint_dir / "best.ckpt", best_params, config, extra=best_extra)
        moments = {name: (state.m[name], state.v[name]) for name in state.m}
        last_extra = {**shared_extra, "kind": "last", "epoch": str(cfg.epochs - 1), "step": str(state.t)}
        save_checkpoint(checkpoint_dir / "last.ckpt", params, config, extra=last_extra, moments=moments)

    return TrainResult(
        history=history,
        step_losses=step_losses,
        best_epoch=best_epoch,
        best_val_f1=0.0 if best_epoch is None else best_f1,
        params=params,
        best_params=best_params,
        optim=state,
    )
