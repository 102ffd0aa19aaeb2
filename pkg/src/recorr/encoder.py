"""Shared feature encoder producing a five-level pyramid per image."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .config import EncoderConfig
from .errors import ContractError
from .params import LEAKY_GAIN, ParamStore, conv_init

N_LEVELS = 5


def init_params(store: ParamStore, cfg: EncoderConfig, rng) -> None:
    ch = cfg.channels
    w, b = conv_init(rng, ch[0], 1, (3, 3, 3), gain=LEAKY_GAIN)
    store.add("enc.stem.w", w)
    store.add("enc.stem.b", b)
    for k in range(1, N_LEVELS):
        w, b = conv_init(rng, ch[k], ch[k - 1], (3, 3, 3), gain=LEAKY_GAIN)
        store.add(f"enc.down{k}.w", w)
        store.add(f"enc.down{k}.b", b)


def encode(image, params: ParamStore) -> list:
    """Feature pyramid of a single-channel image.

    Returns ``[F0, F1, F2, F3, F4]`` at scales 1/16, 1/8, 1/4, 1/2 and 1:
    a full-resolution stem conv followed by one stride-2 conv per level,
    each with leaky ReLU.
    """
    image = ad.as_tensor(image)
    if image.data.ndim != 4 or image.shape[0] != 1:
        raise ContractError(f"encode expects a single-channel (1, D, H, W) image, got {image.shape}")
    if any(n % 16 for n in image.shape[1:]):
        raise ContractError(f"image dims {image.shape[1:]} must be multiples of 16 (pad first)")
    x = ad.leaky_relu(ad.conv3d(image, params["enc.stem.w"], params["enc.stem.b"]))
    levels = [x]
    for k in range(1, N_LEVELS):
        x = ad.leaky_relu(ad.conv3d(x, params[f"enc.down{k}.w"], params[f"enc.down{k}.b"], stride=2))
        levels.append(x)
    return levels[::-1]


def split_context(features):
    """Split fixed-image features into ``(h0, context)`` halves.

    The first half through tanh seeds the recurrent hidden state; the second
    half through leaky ReLU is the context guidance.
    """
    C = features.shape[0]
    if C % 2:
        raise ContractError(f"context split needs an even channel count, got {C}")
    pre_h, pre_c = ad.split(features, [C // 2, C // 2])
    return ad.tanh(pre_h), ad.leaky_relu(pre_c)


def pad_to_multiple(image: np.ndarray, multiple=16, mode="edge"):
    """Pad the spatial axes of ``(C, D, H, W)`` up to ``multiple``; returns (padded, original dims)."""
    dims = image.shape[1:]
    pad = [(0, 0)] + [(0, (-n) % multiple) for n in dims]
    return np.pad(image, pad, mode=mode), tuple(dims)
