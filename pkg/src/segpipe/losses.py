"""Soft Dice loss, thresholded Dice coefficient, and a finite-difference check of the loss."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad

VOID = 255
TRAIN_SMOOTH = 1e-5


def _valid(mask: np.ndarray) -> np.ndarray:
    return mask != VOID


def dice_loss_value(pred: np.ndarray, mask: np.ndarray, smooth: float = 0.0) -> tuple[float, np.ndarray]:
    """Return (loss, d loss / d pred) over the non-void pixels of the whole batch.

    loss = -2 sum(o*y) / (sum(o) + sum(y) + smooth)
    """
    pred = np.asarray(pred)
    mask = np.asarray(mask)
    if pred.shape != mask.shape:
        raise ValueError(f"prediction shape {pred.shape} != mask shape {mask.shape}")
    valid = _valid(mask)
    if not valid.any():
        raise ValueError("mask is entirely void")
    y = np.where(valid, mask == 1, 0).astype(np.float64)
    o = np.where(valid, pred, 0).astype(np.float64)
    inter = float((o * y).sum())
    denom = float(o.sum() + y.sum() + smooth)
    if denom == 0:
        raise ZeroDivisionError("dice loss undefined: empty prediction and empty foreground with smooth=0")
    loss = -2.0 * inter / denom
    grad = np.where(valid, -2.0 * (y * denom - inter) / denom**2, 0.0)
    return loss, grad.astype(pred.dtype)


def dice_loss(pred, mask, smooth: float = TRAIN_SMOOTH) -> ad.Node:
    """Differentiable Dice loss node on a prediction node with values in [0, 1]."""
    pred = ad.as_node(pred)
    loss, grad = dice_loss_value(pred.value, mask, smooth)

    def backward_fn(g):
        return (g.reshape(()) * grad,)

    return ad._result(np.array([loss], dtype=pred.value.dtype), (pred,), backward_fn, "dice_loss")


def dice_coefficient(pred, mask, threshold: float = 0.5) -> float:
    """2|P & G| / (|P| + |G|) after thresholding; 1.0 when both are empty."""
    pred = np.asarray(pred)
    mask = np.asarray(mask)
    valid = _valid(mask)
    p = (pred >= threshold) & valid if pred.dtype != bool else pred & valid
    g = (mask == 1) & valid
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def per_image_dice(pred, mask, threshold: float = 0.5) -> list[float]:
    return [dice_coefficient(pred[i], mask[i], threshold) for i in range(len(pred))]


def loss_gradient_check(shape=(1, 1, 6, 6), smooth: float = TRAIN_SMOOTH, eps: float = 1e-6, seed: int = 0,
                        void_fraction: float = 0.1) -> dict:
    """Compare the analytic Dice-loss gradient with central differences in float64."""
    rng = np.random.default_rng(seed)
    pred = rng.uniform(0.05, 0.95, size=shape)
    mask = (rng.random(shape) < 0.4).astype(np.int64)
    mask[rng.random(shape) < void_fraction] = VOID
    if not (mask == 1).any():
        mask.flat[0] = 1
    _, analytic = dice_loss_value(pred, mask, smooth)
    numeric = np.zeros_like(pred)
    for i in range(pred.size):
        old = pred.flat[i]
        pred.flat[i] = old + eps
        lp, _ = dice_loss_value(pred, mask, smooth)
        pred.flat[i] = old - eps
        lm, _ = dice_loss_value(pred, mask, smooth)
        pred.flat[i] = old
        numeric.flat[i] = (lp - lm) / (2 * eps)
    err = relative_error(analytic, numeric)
    return {
        "op": "dice_loss",
        "max_rel_error": err,
        "void_grad_max": float(np.abs(analytic[mask == VOID]).max(initial=0.0)),
    }


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
