"""Similarity, smoothness, Dice and sequence losses (all differentiable)."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .config import LossConfig
from .errors import ContractError

NCC_EPS = 1e-5
DICE_EPS = 1.0


def _pair(a, b):
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise ContractError(f"loss inputs differ in shape: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _pair(a, b)
    return ad.mean(ad.square(a - b))


def ncc(a, b, window=9, eps=NCC_EPS):
    """``1 - mean(cc)`` with ``cc`` the squared local correlation over ``window**3`` boxes.

    Windows are clipped to the grid: statistics near the border use only the
    in-grid voxels, so the loss is invariant to affine intensity maps
    everywhere. ``eps`` guards flat windows.
    """
    a, b = _pair(a, b)
    inv_n = ad.Tensor(np.broadcast_to(1.0 / ad.window_count(a.shape[1:], window), a.shape).astype(a.dtype))
    sa, sb = ad.box_sum(a, window), ad.box_sum(b, window)
    saa = ad.box_sum(a * a, window)
    sbb = ad.box_sum(b * b, window)
    sab = ad.box_sum(a * b, window)
    cross = sab - sa * sb * inv_n
    var_a = saa - sa * sa * inv_n
    var_b = sbb - sb * sb * inv_n
    cc = ad.div(cross * cross, ad.add_scalar(var_a * var_b, eps))
    return 1.0 - ad.mean(cc)


def grad_l2(field):
    """Sum over the three axes of the mean squared forward difference."""
    field = ad.as_tensor(field)
    if field.data.ndim != 4 or min(field.shape[1:]) < 2:
        raise ContractError("grad_l2 needs a (3, D, H, W) field with at least 2 voxels per axis")
    total = None
    for axis in (1, 2, 3):
        term = ad.mean(ad.square(ad.diff(field, axis)))
        total = term if total is None else total + term
    return total


def dice_loss(warped, fixed, eps=DICE_EPS):
    """``1 - mean_k`` soft Dice over the channels of two (K, D, H, W) maps."""
    warped, fixed = _pair(warped, fixed)
    K = warped.shape[0]
    axes = (1, 2, 3)
    inter = ad.sum(warped * fixed, axis=axes)
    denom = ad.add_scalar(ad.sum(warped, axis=axes) + ad.sum(fixed, axis=axes), eps)
    score = ad.div(ad.add_scalar(inter * 2.0, eps), denom)
    return 1.0 - ad.sum(score) * (1.0 / K)


def single_loss(fixed, moving, field, cfg: LossConfig, labels_fixed=None, labels_moving=None):
    """Similarity of the warped moving image plus weighted smoothness (and Dice)."""
    fixed, moving, field = ad.as_tensor(fixed), ad.as_tensor(moving), ad.as_tensor(field)
    warped = ad.warp(moving, field)
    if cfg.similarity == "mse":
        sim = mse(fixed, warped)
    else:
        sim = ncc(fixed, warped, cfg.ncc_window)
    loss = sim + grad_l2(field) * cfg.lambda_
    if cfg.dice_weight > 0 and labels_fixed is not None and labels_moving is not None:
        warped_lab = ad.warp(ad.as_tensor(labels_moving), field)
        loss = loss + dice_loss(warped_lab, labels_fixed) * cfg.dice_weight
    return loss


def sequence_weights(T, gamma):
    """``gamma ** (T - t)`` for ``t = 1..T``."""
    if T < 1:
        raise ContractError("empty sequence")
    return np.array([gamma ** (T - t) for t in range(1, T + 1)], dtype=np.float64)


def supervised_indices(scales, supervision="full-sequence"):
    """Positions of supervised fields: all, or the last field of each scale."""
    if supervision == "full-sequence":
        return list(range(len(scales)))
    if supervision == "last-of-scale":
        return [k for k in range(len(scales)) if k == len(scales) - 1 or scales[k + 1] != scales[k]]
    raise ContractError(f"unknown supervision {supervision!r}")


def sequence_loss(trace, fixed, moving, cfg: LossConfig, labels_fixed=None, labels_moving=None,
                  return_terms=False):
    """Exponentially weighted sum of per-field losses over the supervised fields.

    Weights follow each field's position in the full sequence, so the
    last-of-scale sum is a sub-sum of the full-sequence one.
    """
    if len(trace.fields) == 0:
        raise ContractError("empty registration trace")
    weights = sequence_weights(len(trace.fields), cfg.gamma)
    total = None
    terms = []
    for k in supervised_indices(trace.scales, cfg.supervision):
        term = single_loss(fixed, moving, trace.fields[k], cfg, labels_fixed, labels_moving)
        terms.append(float(term.data))
        weighted = term * float(weights[k])
        total = weighted if total is None else total + weighted
    return (total, terms) if return_terms else total
