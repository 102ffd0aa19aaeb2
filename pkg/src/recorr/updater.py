"""Per-scale recurrent updater: motion detector, separable conv-GRU, field head.

All iterations at scale ``i`` read the parameters prefixed ``upd{i}.``;
different scales never share weights.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .params import LEAKY_GAIN, ParamStore, conv_init

# applied in this order inside one GRU step
GRU_KERNELS = ((1, 1, 5), (1, 5, 1), (5, 1, 1))
GATES = ("z", "r", "h")


@dataclass
class UpdaterState:
    h: Tensor
    context: Tensor
    scale: int


def init_params(store: ParamStore, scale: int, corr_channels: int, hidden: int, motion: int, rng) -> None:
    p = f"upd{scale}"
    for name, (o, c, k) in {
        "motion1": (motion, corr_channels + 3, (3, 3, 3)),
        "motion2": (motion, motion, (3, 3, 3)),
    }.items():
        w, b = conv_init(rng, o, c, k, gain=LEAKY_GAIN)
        store.add(f"{p}.{name}.w", w)
        store.add(f"{p}.{name}.b", b)
    gru_in = hidden + motion + hidden
    for k, kernel in enumerate(GRU_KERNELS):
        for gate in GATES:
            w, b = conv_init(rng, hidden, gru_in, kernel)
            store.add(f"{p}.gru{k}.{gate}.w", w)
            store.add(f"{p}.gru{k}.{gate}.b", b)
    w, b = conv_init(rng, 3, hidden, (3, 3, 3), zero=True)
    store.add(f"{p}.head.w", w)
    store.add(f"{p}.head.b", b)


def _conv(x, params, name):
    return ad.conv3d(x, params[name + ".w"], params[name + ".b"])


def motion_detect(corr, field, params: ParamStore, scale: int):
    """Two conv + leaky ReLU layers over ``[corr, field]``."""
    if corr.shape[1:] != field.shape[1:]:
        raise ContractError(f"correlation grid {corr.shape[1:]} != field grid {field.shape[1:]}")
    p = f"upd{scale}"
    x = ad.concat([corr, field])
    x = ad.leaky_relu(_conv(x, params, f"{p}.motion1"))
    return ad.leaky_relu(_conv(x, params, f"{p}.motion2"))


def gru_cell(h, m, context, params: ParamStore, prefix: str):
    """One gated update with the gate convs stored under ``prefix``."""
    x = ad.concat([h, m, context])
    z = ad.sigmoid(_conv(x, params, prefix + ".z"))
    r = ad.sigmoid(_conv(x, params, prefix + ".r"))
    q = ad.tanh(_conv(ad.concat([r * h, m, context]), params, prefix + ".h"))
    return (1.0 - z) * h + z * q


def gru_step(state: UpdaterState, m, params: ParamStore) -> UpdaterState:
    """Chain of three gated updates using 1x1x5, 1x5x1 and 5x1x1 kernels."""
    if state.h.shape[1:] != m.shape[1:] or state.context.shape[1:] != m.shape[1:]:
        raise ContractError("hidden state, context and motion features must share a grid")
    h = state.h
    for k in range(len(GRU_KERNELS)):
        h = gru_cell(h, m, state.context, params, f"upd{state.scale}.gru{k}")
    return UpdaterState(h, state.context, state.scale)


def head(state: UpdaterState, params: ParamStore):
    """Residual displacement at the current scale (3 channels)."""
    return _conv(state.h, params, f"upd{state.scale}.head")
