"""Training loop with Dice-based early stopping, checkpointing and ensembles."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig
from .checkpoint import Checkpoint
from .data import Subset, batch_iterator
from .losses import TRAIN_SMOOTH, dice_coefficient, dice_loss, dice_loss_value
from .optim import NumericalError, OptimConfig, RMSprop
from .tensor import Rng, atomic_write

log = logging.getLogger(__name__)

HISTORY_HEADER = "epoch,train_loss,val_loss,val_dice,lr"


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_dice: float = -math.inf
    best_epoch: int = -1
    since_improvement: int = 0
    history: list[tuple] = field(default_factory=list)

    def history_csv(self) -> str:
        rows = [HISTORY_HEADER]
        for e, tl, vl, vd, lr in self.history:
            rows.append(f"{e},{tl!r},{vl!r},{vd!r},{lr!r}")
        return "\n".join(rows) + "\n"


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    state: TrainState

    @property
    def history_csv(self) -> str:
        return self.state.history_csv()


def predict(model, images: np.ndarray) -> np.ndarray:
    """Eval-mode sigmoid output for a batch [B,1,H,W]."""
    with ad.no_grad():
        return model(ad.variable(np.asarray(images), requires_grad=False), False).value


def evaluate(model, dataset: Sequence) -> tuple[float, float, list[float]]:
    """(mean Dice loss, mean per-image Dice, per-image Dice), one image at a time."""
    losses, dices = [], []
    for rec in dataset:
        if rec.mask is None:
            raise ValueError(f"sample {rec.name!r} has no mask")
        out = predict(model, rec.image[None])
        mask = rec.mask[None]
        losses.append(dice_loss_value(out, mask, TRAIN_SMOOTH)[0])
        dices.append(dice_coefficient(out, mask))
    if not all(np.isfinite(losses)):
        raise NumericalError("non-finite validation loss")
    return float(np.mean(losses)), float(np.mean(dices)), dices


def train(model, train_ds: Sequence, val_ds: Sequence, optim: OptimConfig,
          augment: AugmentConfig | None = None, patience: int = 50, max_epochs: int = 500,
          seed: int = 0, out_dir=None, config_hash: bytes = b"\0" * 32,
          on_epoch: Callable[[TrainState], None] | None = None) -> TrainResult:
    """Fit ``model`` and return the checkpoint of the best validation-Dice epoch.

    Early stopping follows the usual patience rule: training stops once
    ``patience`` consecutive epochs pass without a strict improvement.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("train and validation splits must be nonempty")
    if patience < 0 or max_epochs < 1:
        raise ValueError("need patience >= 0 and max_epochs >= 1")
    rng = Rng(seed)
    data_rng = rng.stream("data")
    opt = RMSprop(model.parameters(), optim)
    state = TrainState()
    best = None
    out = Path(out_dir) if out_dir is not None else None

    for epoch in range(max_epochs):
        state.epoch = epoch
        batch_losses, weights = [], []
        for b, (x, y) in enumerate(batch_iterator(train_ds, optim.batch_size, True, augment, data_rng, epoch)):
            model.zero_grad()
            pred = model(ad.variable(x, requires_grad=False), True, rng.stream(f"dropout/{epoch}", b))
            loss = dice_loss(pred, y)
            value = float(loss.value[0])
            if not np.isfinite(value):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, batch {b}")
            ad.backward(loss)
            opt.step()
            batch_losses.append(value)
            weights.append(len(x))
        state.step = opt.step_count
        train_loss = float(np.average(batch_losses, weights=weights))
        val_loss, val_dice, _ = evaluate(model, val_ds)
        state.history.append((epoch, train_loss, val_loss, val_dice, opt.lr))
        log.info("epoch %d train_loss %.5f val_loss %.5f val_dice %.4f", epoch, train_loss, val_loss, val_dice)

        if val_dice > state.best_dice:
            state.best_dice, state.best_epoch, state.since_improvement = val_dice, epoch, 0
            best = Checkpoint.from_model(model, config_hash, opt, epoch=epoch, val_dice=val_dice,
                                         step=opt.step_count)
            if out is not None:
                best.save(out / "best.sgc")
        else:
            state.since_improvement += 1
        stop = state.since_improvement >= patience and state.best_epoch != epoch
        if out is not None:
            atomic_write(out / "history.csv", state.history_csv().encode())
        if on_epoch is not None:
            on_epoch(state)
        if stop:
            break
    return TrainResult(best, state)


def split_indices(n: int, rng, val_fraction: float = 0.2) -> tuple[list[int], list[int]]:
    """Random train/validation split; both sides nonempty when n >= 2."""
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    n_val = min(max(1, int(round(n * val_fraction))), n - 1)
    perm = rng.permutation(n)
    return sorted(int(i) for i in perm[n_val:]), sorted(int(i) for i in perm[:n_val])


def train_ensemble(build_model: Callable[[int], object], dataset: Sequence, optim: OptimConfig, n: int = 10,
                   base_seed: int = 0, augment: AugmentConfig | None = None, patience: int = 50,
                   max_epochs: int = 500, out_dir=None, config_hash: bytes = b"\0" * 32,
                   val_fraction: float = 0.2) -> list[TrainResult]:
    """Train ``n`` members, each on its own random 80/20 split and seed."""
    if n < 1:
        raise ValueError("ensemble size must be >= 1")
    results = []
    root = Rng(base_seed)
    for m in range(n):
        member_seed = int(root.stream("member", m).integers(2**31))
        tr, va = split_indices(len(dataset), root.stream("split", m), val_fraction)
        model = build_model(member_seed)
        sub = None if out_dir is None else Path(out_dir) / f"member_{m:02d}"
        results.append(train(model, Subset(dataset, tr), Subset(dataset, va), optim, augment, patience,
                             max_epochs, member_seed, sub, config_hash))
    return results


def predict_ensemble(models: Sequence, images: np.ndarray) -> np.ndarray:
    """Arithmetic mean of the members' sigmoid outputs."""
    if not models:
        raise ValueError("empty ensemble")
    outs = [predict(m, images) for m in models]
    if len(outs) == 1:
        return outs[0]
    return np.mean(np.stack(outs).astype(np.float64), axis=0).astype(outs[0].dtype)


def load_members(checkpoints: Sequence, build: Callable[[], object], expected_hash: bytes | None = None) -> list:
    models = []
    for ck in checkpoints:
        ck = ck if isinstance(ck, Checkpoint) else Checkpoint.load(ck)
        models.append(ck.apply_to(build(), expected_hash))
    return models
