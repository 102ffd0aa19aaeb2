"""Voxel-to-region local search: warp, shift, correlate."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import offsets
from .errors import ContractError

__all__ = ["local_search", "soft_argmax", "offsets", "offset_array"]


def local_search(F_f, F_m, field, r=3):
    """Correlation volume of ``r**3`` channels.

    ``F_m`` is first warped by ``field`` (search-center relocation), then each
    fixed voxel is compared with the warped moving features at every integer
    shift in ``[-r//2, r//2]^3``. Channel ``k`` holds shift ``offsets(r)[k]``.
    """
    F_f, F_m, field = ad.as_tensor(F_f), ad.as_tensor(F_m), ad.as_tensor(field)
    if F_f.shape != F_m.shape:
        raise ContractError(f"feature shapes differ: {F_f.shape} vs {F_m.shape}")
    if field.shape != (3,) + F_f.shape[1:]:
        raise ContractError(f"field {field.shape} does not match feature grid {F_f.shape[1:]}")
    if r < 1 or r % 2 == 0:
        raise ContractError(f"r must be a positive odd integer, got {r}")
    return ad.correlation(F_f, ad.warp(F_m, field), r)


def offset_array(r, dtype=np.float64):
    """``(r**3, 3)`` array of shift vectors in channel order."""
    return np.array(offsets(r), dtype=dtype)


def soft_argmax(corr, temperature=0.1):
    """Expected shift under a per-voxel softmax over correlation channels.

    Returns a ``(3, D, H, W)`` residual displacement at the current scale.
    """
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    corr = np.asarray(corr.data if isinstance(corr, ad.Tensor) else corr)
    n = corr.shape[0]
    r = round(n ** (1 / 3))
    if r**3 != n:
        raise ContractError(f"correlation has {n} channels, not a cube")
    logits = corr / temperature
    logits = logits - logits.max(axis=0, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=0, keepdims=True)
    return np.tensordot(offset_array(r, corr.dtype).T, w, axes=([1], [0]))
