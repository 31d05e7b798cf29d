"""Continuous Dice losses used for supervised and semi-supervised training.

Conventions: fields are arrays of shape (B, C, H, W) with values in [0, 1];
masks have shape (B, H, W), (B, 1, H, W) or (B, C, H, W) and are cast to
float.  Every loss returns its value together with the gradient w.r.t. the
prediction so it can be fed straight into ``UNet.backward``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class LossDomainError(ValueError):
    pass


def _check_unit(name, a):
    if a.size and (np.nanmin(a) < 0.0 or np.nanmax(a) > 1.0 or not np.all(np.isfinite(a))):
        raise LossDomainError(f"{name} must lie in [0, 1]")


def _dice_terms(y, yh, m):
    """Value of the continuous Dice and its gradients w.r.t. ``y`` and ``yh``.

    All arguments are flat float arrays of equal length.
    """
    my = m * y
    myh = m * yh
    inter = float(np.dot(my, yh))
    sum_y = float(my.sum())
    sum_yh = float(myh.sum())
    zeros = np.zeros_like(y)
    y_empty = not np.any(my != 0)
    yh_empty = not np.any(myh != 0)
    if y_empty and yh_empty:
        return 1.0, zeros, zeros
    if y_empty or yh_empty:
        return 0.0, zeros, zeros
    pos = (yh > 0).astype(np.float64)
    support = float(np.dot(my, pos))
    # with subnormal inputs the true gradient can exceed the float range; it
    # then becomes inf and the trainer's finiteness check reports it
    with np.errstate(over="ignore"):
        if support == 0.0:
            c, dc_dy, dc_dyh = 1.0, zeros, zeros
        else:
            c = inter / support
            dc_dy = (m * yh * support - inter * m * pos) / support / support
            dc_dyh = m * y / support
        denom = c * sum_y + sum_yh
        value = 2.0 * inter / denom
        # d(2I/D) = 2 (dI D - I dD) / D^2
        d_dy = 2.0 * (m * yh * denom - inter * (dc_dy * sum_y + c * m)) / denom / denom
        d_dyh = 2.0 * (m * y * denom - inter * (dc_dyh * sum_y + m)) / denom / denom
    return value, d_dy, d_dyh


def agreement(a, b):
    """Soft Dice ``2 sum(ab) / (sum(a^2) + sum(b^2))`` of two soft fields.

    Equals 1 exactly when ``a == b`` and reduces to the classical Dice on
    binary fields.  Returns the value and its gradient w.r.t. ``a``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    inter = float(np.vdot(a, b))
    denom = float(np.vdot(a, a) + np.vdot(b, b))
    if denom == 0.0:
        return 1.0, np.zeros_like(a)
    value = 2.0 * inter / denom
    grad = 2.0 * (b * denom - 2.0 * inter * a) / denom / denom
    return value, grad


def continuous_dice(y, y_hat, mask=None) -> float:
    """Continuous Dice coefficient of two single-class fields over ``mask``.

    ``c = sum(y * y_hat) / sum(y * [y_hat > 0])`` rescales the reference
    volume so that partially confident predictions are not penalised for
    their softness.  Returns 1 when both masked fields vanish and 0 when
    exactly one does.
    """
    return continuous_dice_with_grad(y, y_hat, mask)[0]


def continuous_dice_with_grad(y, y_hat, mask=None):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise LossDomainError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    _check_unit("y", y)
    _check_unit("y_hat", y_hat)
    m = np.ones_like(y) if mask is None else np.broadcast_to(np.asarray(mask, dtype=np.float64), y.shape)
    v, gy, gyh = _dice_terms(y.ravel(), y_hat.ravel(), np.ascontiguousarray(m).ravel())
    return v, gy.reshape(y.shape), gyh.reshape(y.shape)


def _class_mask(mask, shape):
    """Broadcast a voxel or voxel-by-class mask to (B, C, H, W)."""
    b, c, h, w = shape
    if mask is None:
        return np.ones(shape)
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 3:
        m = m[:, None]
    return np.broadcast_to(m, shape)


def per_class_dice(Y, Y_hat, M=None):
    """Per-class continuous Dice values with gradients w.r.t. both fields."""
    Y = np.asarray(Y, dtype=np.float64)
    Y_hat = np.asarray(Y_hat, dtype=np.float64)
    if Y.shape != Y_hat.shape or Y.ndim != 4:
        raise LossDomainError(f"expected equal (B, C, H, W) shapes, got {Y.shape} and {Y_hat.shape}")
    _check_unit("Y", Y)
    _check_unit("Y_hat", Y_hat)
    m = _class_mask(M, Y.shape)
    values = np.empty(Y.shape[1])
    gY = np.empty_like(Y)
    gYh = np.empty_like(Y)
    for s in range(Y.shape[1]):
        v, gy, gyh = _dice_terms(Y[:, s].ravel(), Y_hat[:, s].ravel(), np.ascontiguousarray(m[:, s]).ravel())
        values[s] = v
        gY[:, s] = gy.reshape(Y[:, s].shape)
        gYh[:, s] = gyh.reshape(Y[:, s].shape)
    return values, gY, gYh


def task_loss(Y, Y_hat, M=None):
    """Negative sum of per-class continuous Dice over masked voxels.

    Returns ``(loss, per_class_dice, grad_wrt_Y_hat)``; the loss lies in
    ``[-C, 0]``.
    """
    m = _class_mask(M, np.shape(Y))
    if not np.any(m):
        raise LossDomainError("confidence mask is empty for every class; no supervisory signal")
    values, _, gYh = per_class_dice(Y, Y_hat, m)
    return -float(values.sum()), values, -gYh


def consistency_loss(Y_hat, E_hat):
    """``1 - mean_s agreement(Y_hat_s, E_hat_s)`` over all voxels.

    Zero exactly at perfect agreement, one at total disagreement.  The
    continuous Dice is not used here because it stays below one for two
    identical soft fields.  The gradient is taken w.r.t. ``Y_hat`` (the
    ensemble target is constant).
    """
    Y_hat = np.asarray(Y_hat, dtype=np.float64)
    E_hat = np.asarray(E_hat, dtype=np.float64)
    if Y_hat.shape != E_hat.shape or Y_hat.ndim != 4:
        raise LossDomainError(f"shape mismatch: {Y_hat.shape} vs {E_hat.shape}")
    _check_unit("Y_hat", Y_hat)
    _check_unit("E_hat", E_hat)
    n = Y_hat.shape[1]
    grad = np.empty_like(Y_hat)
    total = 0.0
    for s in range(n):
        v, g = agreement(Y_hat[:, s], E_hat[:, s])
        total += v
        grad[:, s] = -g / n
    return 1.0 - total / n, grad


@dataclass
class LossReport:
    task_loss: float
    consistency_loss: float
    lambda_effective: float
    per_class_dice: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def total(self) -> float:
        return self.task_loss + self.lambda_effective * self.consistency_loss

    def csv_row(self, epoch: int) -> list:
        return [epoch, self.task_loss, self.consistency_loss, self.lambda_effective, *self.per_class_dice]


def effective_lambda(lam: float, prev_task: float | None, prev_cons: float | None) -> float:
    """Switch the consistency weight off for an epoch after it dominated the task loss."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if prev_task is None or prev_cons is None:
        return lam
    return 0.0 if lam * prev_cons > abs(prev_task) else lam


def combined_loss(task: float, cons: float, lam: float, prev_epoch_task: float | None,
                  prev_epoch_cons: float | None, per_class=None) -> LossReport:
    lam_eff = effective_lambda(lam, prev_epoch_task, prev_epoch_cons)
    pc = np.zeros(0) if per_class is None else np.asarray(per_class, dtype=np.float64)
    return LossReport(float(task), float(cons), lam_eff, pc)
