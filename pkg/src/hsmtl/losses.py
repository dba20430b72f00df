"""Task losses, class-imbalance corrections, and multitask balancing.

Categorical losses operate on raw logits and integer label maps with an
ignore id; continuous losses operate on prediction maps with a pixel
mask.  Ignored or masked pixels contribute exact zeros, so perturbing
them leaves every loss bit-unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

IGNORE_ID = 255


@dataclass(frozen=True)
class ClassWeightTable:
    """Per-class frequencies and inverse-median-frequency costs."""

    freqs: np.ndarray
    costs: np.ndarray
    median: float


def inverse_median_frequency_weights(freqs) -> ClassWeightTable:
    """cost_i = median(freqs) / freqs_i for strictly positive freqs summing to 1."""
    freqs = np.asarray(freqs, dtype=np.float64)
    if freqs.ndim != 1 or freqs.size == 0:
        raise ValueError(f"freqs must be a non-empty vector, got shape {freqs.shape}")
    if np.any(freqs <= 0):
        raise ValueError("zero or negative class frequency; filter rare classes first")
    if abs(freqs.sum() - 1.0) > 1e-9:
        raise ValueError(f"frequencies must sum to 1, got {freqs.sum():.12f}")
    med = float(np.median(freqs))
    return ClassWeightTable(freqs=freqs.copy(), costs=med / freqs, median=med)


@dataclass
class FocalConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    weights: Optional[ClassWeightTable] = None

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0,1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


def _prepare_labels(logits: Tensor, labels: np.ndarray, ignore: int):
    if logits.data.ndim != 4:
        raise ShapeError(f"logits must be (N,K,H,W), got {logits.data.shape}")
    n, k, h, w = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} != {(n, h, w)}")
    mask = labels != ignore
    if not mask.any():
        raise ValueError("all pixels carry the ignore id")
    valid = labels[mask]
    if valid.min() < 0 or valid.max() >= k:
        raise ValueError(f"labels outside [0, {k}) (ignore id is {ignore})")
    safe = np.where(mask, labels, 0).astype(np.int64)
    return safe, mask


def cross_entropy(logits: Tensor, labels: np.ndarray,
                  weights: Optional[ClassWeightTable] = None,
                  ignore: int = IGNORE_ID) -> Tensor:
    """Mean negative log-likelihood; class costs reweight both sum and norm."""
    safe, mask = _prepare_labels(logits, labels, ignore)
    lp = ad.gather_channel(ad.log_softmax(logits, axis=1), safe)
    if weights is None:
        pix = mask.astype(np.float64)
    else:
        if weights.costs.size != logits.data.shape[1]:
            raise ShapeError(
                f"weight table has {weights.costs.size} classes, logits {logits.data.shape[1]}")
        pix = weights.costs[safe] * mask
    denom = pix.sum()
    return ad.mul_const(ad.sum_all(ad.mul_const(lp, pix[:, None, :, :])), -1.0 / denom)


def focal_loss(logits: Tensor, labels: np.ndarray, config: FocalConfig,
               ignore: int = IGNORE_ID) -> Tensor:
    """Mean of -alpha (1-p)^gamma log p over contributing pixels.

    With a class-weight table the balance factor becomes alpha * cost_y
    per pixel; normalization stays the pixel count either way.
    """
    safe, mask = _prepare_labels(logits, labels, ignore)
    lp = ad.gather_channel(ad.log_softmax(logits, axis=1), safe)
    p = ad.exp(lp)
    modulator = ad.pow_const(ad.rsub_const(1.0, p), config.gamma)
    if config.weights is None:
        alpha_pix = config.alpha * mask.astype(np.float64)
    else:
        if config.weights.costs.size != logits.data.shape[1]:
            raise ShapeError(
                f"weight table has {config.weights.costs.size} classes, "
                f"logits {logits.data.shape[1]}")
        alpha_pix = config.alpha * config.weights.costs[safe] * mask
    count = float(mask.sum())
    term = ad.mul_const(ad.mul(modulator, lp), alpha_pix[:, None, :, :])
    return ad.mul_const(ad.sum_all(term), -1.0 / count)


def mae_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean absolute deviation over unmasked pixels."""
    if pred.data.ndim != 4 or pred.data.shape[1] != 1:
        raise ShapeError(f"pred must be (N,1,H,W), got {pred.data.shape}")
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.data.shape:
        raise ShapeError(f"target shape {target.shape} != pred shape {pred.data.shape}")
    n, _, h, w = pred.data.shape
    mask = np.asarray(mask)
    if mask.shape != (n, h, w):
        raise ShapeError(f"mask shape {mask.shape} != {(n, h, w)}")
    count = float(np.count_nonzero(mask))
    if count == 0:
        raise ValueError("mask excludes every pixel")
    diff = ad.absolute(ad.add_const(pred, -target))
    pix = mask.astype(np.float64)[:, None, :, :]
    return ad.mul_const(ad.sum_all(ad.mul_const(diff, pix)), 1.0 / count)


# ---------------------------------------------------------------------------
# multitask balancing


class UncertaintyState:
    """Per-task log-variance parameters s_i = log sigma_i^2."""

    KINDS = ("categorical", "continuous")

    def __init__(self, kinds: Sequence[str]):
        kinds = tuple(kinds)
        if not kinds:
            raise ValueError("at least one task required")
        for k in kinds:
            if k not in self.KINDS:
                raise ValueError(f"unknown task kind {k!r}; expected one of {self.KINDS}")
        self.kinds = kinds
        self.s = [Tensor(np.zeros(()), requires_grad=True) for _ in kinds]

    def variances(self) -> np.ndarray:
        return np.exp([float(t.data) for t in self.s])

    def named_params(self, prefix: str = "balancer.uncertainty"):
        return [(f"{prefix}.s{i}", t) for i, t in enumerate(self.s)]


def uncertainty_combine(task_losses: Sequence[Tensor], state: UncertaintyState) -> Tensor:
    """Sum of exp(-s)-scaled losses plus s/2 regularizers.

    Continuous tasks carry the 1/(2 sigma^2) coefficient, categorical
    tasks 1/sigma^2; both add the log-sigma term s/2.
    """
    if len(task_losses) != len(state.kinds):
        raise ValueError(
            f"{len(task_losses)} losses for {len(state.kinds)} configured tasks")
    total = None
    for loss, kind, s in zip(task_losses, state.kinds, state.s):
        coef = 0.5 if kind == "continuous" else 1.0
        scaled = ad.mul_const(ad.mul(ad.exp(ad.mul_const(s, -1.0)), loss), coef)
        term = ad.add(scaled, ad.mul_const(s, 0.5))
        total = term if total is None else ad.add(total, term)
    return total


class GradNormState:
    """Adaptive task weights matched to relative training rates."""

    def __init__(self, alpha: float = 1.5, weight_lr: float = 0.025):
        if weight_lr <= 0:
            raise ValueError("weight_lr must be positive")
        self.alpha = float(alpha)
        self.weight_lr = float(weight_lr)
        self.weights: Optional[np.ndarray] = None
        self.initial_losses: Optional[np.ndarray] = None

    @property
    def task_count(self) -> int:
        return 0 if self.weights is None else self.weights.size


def gradnorm_step(task_losses, grad_norms, state: GradNormState) -> float:
    """One balancing update; returns the gradient-matching objective value.

    ``grad_norms`` are the L2 norms of each raw task loss's gradient over
    the designated shared parameters; the weighted norm G_i = w_i * g_i.
    The matching target is treated as a constant, so the weight gradient
    is sign(G_i - target_i) * g_i.
    """
    losses = np.asarray(task_losses, dtype=np.float64)
    norms = np.asarray(grad_norms, dtype=np.float64)
    if losses.ndim != 1 or losses.shape != norms.shape:
        raise ValueError(f"losses {losses.shape} and grad norms {norms.shape} must match 1-D")
    if losses.size == 0:
        raise ValueError("no tasks; the shared parameter set is missing or empty")
    if state.initial_losses is None:
        if np.any(losses == 0.0):
            raise ValueError("initial task loss of zero makes training rates undefined")
        state.initial_losses = losses.copy()
        state.weights = np.ones(losses.size)
    if losses.size != state.task_count:
        raise ValueError(f"{losses.size} tasks but state tracks {state.task_count}")
    w = state.weights
    big_g = w * norms
    mean_g = big_g.mean()
    rate = (losses / state.initial_losses)
    rel = rate / rate.mean()
    target = mean_g * np.power(rel, state.alpha)
    objective = float(np.abs(big_g - target).sum())
    grad_w = np.sign(big_g - target) * norms
    w = w - state.weight_lr * grad_w
    w = np.maximum(w, 1e-6)
    state.weights = w * (w.size / w.sum())
    return objective


# ---------------------------------------------------------------------------
# composite loss


@dataclass(frozen=True)
class TaskDef:
    """Loss-relevant view of a task: a name and a categorical/continuous kind."""

    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in UncertaintyState.KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")


CATEGORICAL_LOSSES = ("ce", "cost_sensitive_ce", "focal", "focal_with_weights")
BALANCE_MODES = ("fixed_equal", "uncertainty", "gradnorm")


def total_loss(outputs, targets, tasks: Sequence[TaskDef], mode: str = "fixed_equal", *,
               categorical_loss: str = "focal_with_weights",
               focal: Optional[FocalConfig] = None,
               weight_tables: Optional[dict] = None,
               uncertainty: Optional[UncertaintyState] = None,
               gradnorm: Optional[GradNormState] = None,
               ignore: int = IGNORE_ID):
    """Per-task losses combined under the selected balancing mode.

    ``outputs`` maps task name to prediction tensor; ``targets`` maps a
    categorical task to its label map and a continuous task to a
    (target, mask) pair.  Returns (total, {name: per-task scalar}).
    """
    if mode not in BALANCE_MODES:
        raise ValueError(f"mode must be one of {BALANCE_MODES}, got {mode!r}")
    if categorical_loss not in CATEGORICAL_LOSSES:
        raise ValueError(
            f"categorical_loss must be one of {CATEGORICAL_LOSSES}, got {categorical_loss!r}")
    if mode == "uncertainty":
        if uncertainty is None:
            raise ValueError("uncertainty mode requires an UncertaintyState")
        if len(uncertainty.kinds) != len(tasks):
            raise ValueError(
                f"uncertainty state tracks {len(uncertainty.kinds)} tasks, got {len(tasks)}")
    if mode == "gradnorm" and gradnorm is None:
        raise ValueError("gradnorm mode requires a GradNormState")
    weight_tables = weight_tables or {}
    focal = focal or FocalConfig()

    per_task = {}
    ordered = []
    for task in tasks:
        out = outputs[task.name]
        if task.kind == "categorical":
            labels = targets[task.name]
            table = weight_tables.get(task.name)
            if categorical_loss == "ce":
                loss = cross_entropy(out, labels, weights=None, ignore=ignore)
            elif categorical_loss == "cost_sensitive_ce":
                if table is None:
                    raise ValueError(f"cost_sensitive_ce needs a weight table for {task.name!r}")
                loss = cross_entropy(out, labels, weights=table, ignore=ignore)
            elif categorical_loss == "focal":
                cfg = FocalConfig(focal.alpha, focal.gamma, weights=None)
                loss = focal_loss(out, labels, cfg, ignore=ignore)
            else:
                if table is None:
                    raise ValueError(f"focal_with_weights needs a weight table for {task.name!r}")
                cfg = FocalConfig(focal.alpha, focal.gamma, weights=table)
                loss = focal_loss(out, labels, cfg, ignore=ignore)
        else:
            target, mask = targets[task.name]
            loss = mae_loss(out, target, mask)
        per_task[task.name] = loss
        ordered.append(loss)

    if mode == "fixed_equal":
        total = ordered[0]
        for loss in ordered[1:]:
            total = ad.add(total, loss)
    elif mode == "uncertainty":
        total = uncertainty_combine(ordered, uncertainty)
    else:
        if gradnorm.weights is None:
            gradnorm.weights = np.ones(len(ordered))
            # loss snapshot for training-rate ratios on the very first batch
        if gradnorm.task_count != len(ordered):
            raise ValueError(
                f"gradnorm state tracks {gradnorm.task_count} tasks, got {len(ordered)}")
        total = None
        for w, loss in zip(gradnorm.weights, ordered):
            term = ad.mul_const(loss, float(w))
            total = term if total is None else ad.add(total, term)
    return total, per_task
