"""Training objective: soft Dice on warped one-hot labels plus field smoothness."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ContractError, ShapeError
from .fields import warp

DICE_EPS = 1e-5


def one_hot(labels: np.ndarray, label_set=None) -> np.ndarray:
    """Encode an integer [D,H,W] volume as [K,D,H,W] float indicator channels."""
    if label_set is None:
        label_set = np.unique(labels)
    return np.stack([(labels == v).astype(np.float64) for v in label_set])


def soft_dice_loss(warped_probs: Tensor, target_onehot) -> Tensor:
    """1 - mean foreground Dice between soft channels; channel 0 is background."""
    warped_probs = as_tensor(warped_probs)
    target_onehot = as_tensor(target_onehot)
    k = warped_probs.data.shape[0]
    if k < 2:
        raise ContractError(f"soft_dice_loss needs background + foreground channels, got {k}")
    if warped_probs.data.shape != target_onehot.data.shape:
        raise ShapeError(f"soft_dice_loss: shapes {warped_probs.data.shape} vs "
                         f"{target_onehot.data.shape}")
    p = ad.narrow(warped_probs, 0, 1, k - 1)
    q = ad.narrow(target_onehot, 0, 1, k - 1)
    spatial = (1, 2, 3)
    inter = ad.reduce_sum(ad.mul(p, q), axis=spatial)
    sums = ad.add(ad.reduce_sum(p, axis=spatial), ad.reduce_sum(q, axis=spatial))
    dice = ad.div(ad.add_const(ad.scale(inter, 2.0), DICE_EPS), ad.add_const(sums, DICE_EPS))
    return ad.add_const(ad.neg(ad.reduce_mean(dice)), 1.0)


def smooth_loss(u: Tensor) -> Tensor:
    """Mean squared forward difference of each component along each axis."""
    u = as_tensor(u)
    shape = u.data.shape
    if u.data.ndim != 4 or shape[0] != 3 or min(shape[1:]) < 2:
        raise ShapeError(f"smooth_loss expects [3,D,H,W] with extents >= 2, got {shape}")
    total = None
    count = 0
    for axis in range(1, 4):
        n = shape[axis]
        d = ad.sub(ad.narrow(u, axis, 1, n - 1), ad.narrow(u, axis, 0, n - 1))
        ssq = ad.reduce_sum(ad.mul(d, d))
        total = ssq if total is None else ad.add(total, ssq)
        count += 3 * (n - 1) * int(np.prod(shape[1:])) // n
    return ad.scale(total, 1.0 / count)


def total_loss(fields, s_src: np.ndarray, s_tgt: np.ndarray, smooth_weight: float) -> Tensor:
    """Mean over recursion levels of Dice + smoothness, with deep supervision.

    At every level the source one-hot labels are warped trilinearly by that
    level's accumulated field and compared against the target one-hot.
    """
    if smooth_weight < 0:
        raise ContractError(f"smooth weight must be >= 0, got {smooth_weight}")
    label_set = np.union1d(np.unique(s_src), np.unique(s_tgt))
    src_hot = Tensor(one_hot(s_src, label_set))
    tgt_hot = Tensor(one_hot(s_tgt, label_set))
    per_level = []
    for phi in fields:
        level = soft_dice_loss(warp(src_hot, phi), tgt_hot)
        if smooth_weight > 0:
            level = ad.add(level, ad.scale(smooth_loss(phi), smooth_weight))
        per_level.append(level)
    out = per_level[0]
    for term in per_level[1:]:
        out = ad.add(out, term)
    return ad.scale(out, 1.0 / len(per_level))
