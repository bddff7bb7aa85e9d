"""Training objective: CE + Dice on both branches, MSE consistency
between branch predictions, and the lambda-weighted total.

All losses take post-sigmoid probabilities. CE clamps predictions to
[1e-7, 1 - 1e-7]; Dice aggregates each class over the whole batch as a
single ratio (soft predictions, stabilizer 1e-6) and averages classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CE_CLAMP = 1e-7
DICE_EPS = 1e-6


@dataclass
class LossBundle:
    ce_O: float
    dice_O: float
    ce_E: float
    dice_E: float
    consist: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {"ce_O": self.ce_O, "dice_O": self.dice_O, "ce_E": self.ce_E,
                "dice_E": self.dice_E, "consist": self.consist, "total": self.total}


def ce_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over every element."""
    p = ad.clip(pred, CE_CLAMP, 1.0 - CE_CLAMP)
    t = np.asarray(target, dtype=np.float64)
    ll = Tensor(t) * ad.log(p) + Tensor(1.0 - t) * ad.log(1.0 - p)
    return -ad.mean(ll)


def dice_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """1 - 2*sum(p*t)/(sum(p) + sum(t) + eps), per class then averaged.

    pred/target: [B, K, H, W]; sums run over batch and pixels."""
    t = Tensor(np.asarray(target, dtype=np.float64))
    axes = (0, 2, 3)
    inter = ad.sum(pred * t, axis=axes)
    denom = ad.sum(pred, axis=axes) + ad.sum(t, axis=axes) + DICE_EPS
    return ad.mean(1.0 - 2.0 * inter / denom)


def consistency_loss(pred_o: Tensor, pred_e: Tensor) -> Tensor:
    """Mean squared difference between the two branch predictions."""
    if pred_o.shape != pred_e.shape:
        raise ValueError(f"shape mismatch: {pred_o.shape} vs {pred_e.shape}")
    d = pred_o - pred_e
    return ad.mean(d * d)


def total_loss(ce_o: Tensor, dice_o: Tensor, ce_e: Tensor | None,
               dice_e: Tensor | None, consist: Tensor | None,
               lam: float) -> tuple[Tensor, LossBundle]:
    """Assemble the weighted total; absent branch terms count as zero.

    Returns the differentiable total plus a float snapshot of every part."""
    total = ce_o + dice_o
    if ce_e is not None:
        total = total + ce_e
    if dice_e is not None:
        total = total + dice_e
    if consist is not None:
        total = total + lam * consist

    def val(t: Tensor | None) -> float:
        v = 0.0 if t is None else t.item()
        if not np.isfinite(v):
            raise FloatingPointError("non-finite loss term")
        return v

    bundle = LossBundle(ce_O=val(ce_o), dice_O=val(dice_o), ce_E=val(ce_e),
                        dice_E=val(dice_e), consist=val(consist), total=val(total))
    return total, bundle
