"""Named parameter storage with AdamW state."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, DataError
from .io import load_checkpoint, save_checkpoint


class ParamStore:
    """Named, shaped weight tensors plus AdamW moments.

    Parameters are :class:`Tensor` leaves with ``requires_grad=True``; the
    optimizer reads their ``.grad`` and clears it after each step.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.tensors: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def __contains__(self, name):
        return name in self.tensors

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def add(self, name, value) -> Tensor:
        if name in self.tensors:
            raise ContractError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=self.dtype)
        t = Tensor(value, requires_grad=True, name=name)
        self.tensors[name] = t
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return t

    def items(self):
        return self.tensors.items()

    def values(self) -> dict:
        return {k: t.data for k, t in self.tensors.items()}

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for t in self.tensors.values():
            if t.grad is not None:
                total += float(np.sum(np.square(t.grad, dtype=np.float64)))
        return float(np.sqrt(total))

    def clip_grad_norm(self, max_norm) -> tuple[float, bool]:
        """Scale gradients so their global L2 norm is at most ``max_norm``."""
        norm = self.grad_norm()
        if norm > max_norm:
            factor = max_norm / (norm + 1e-12)
            for t in self.tensors.values():
                if t.grad is not None:
                    t.grad = t.grad * t.grad.dtype.type(factor)
            return norm, True
        return norm, False

    def copy(self, dtype=None) -> "ParamStore":
        other = ParamStore(self.dtype if dtype is None else dtype)
        for k, t in self.tensors.items():
            other.add(k, t.data)
            other.m[k] = self.m[k].astype(other.dtype)
            other.v[k] = self.v[k].astype(other.dtype)
        other.step = self.step
        return other

    def state_dict(self) -> dict:
        """Flat ``{name: array}`` mapping in checkpoint layout."""
        out = {}
        for k, t in self.tensors.items():
            out[k] = t.data
        for k in self.tensors:
            out[f"{k}.m"] = self.m[k]
            out[f"{k}.v"] = self.v[k]
        out["step"] = np.array(self.step, dtype=np.float32)
        return out

    def load_state_dict(self, entries: dict, strict=True):
        for k, t in self.tensors.items():
            if k not in entries:
                if strict:
                    raise DataError(f"checkpoint lacks parameter {k!r}")
                continue
            arr = np.asarray(entries[k])
            if arr.shape != t.shape:
                raise DataError(f"checkpoint shape for {k!r} is {arr.shape}, model expects {t.shape}")
            t.data = arr.astype(self.dtype)
            self.m[k] = np.asarray(entries.get(f"{k}.m", np.zeros_like(arr))).astype(self.dtype)
            self.v[k] = np.asarray(entries.get(f"{k}.v", np.zeros_like(arr))).astype(self.dtype)
        self.step = int(np.asarray(entries.get("step", 0)))

    def save(self, path):
        save_checkpoint(path, self.state_dict())

    def load(self, path, strict=True):
        self.load_state_dict(load_checkpoint(path), strict=strict)


def adamw_step(store: ParamStore, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One decoupled-weight-decay Adam update; clears gradients.

    Parameters without a gradient are left untouched.
    """
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in store.tensors.items():
        g = p.grad
        if g is None:
            continue
        dt = p.data.dtype.type
        data = p.data * dt(1.0 - lr * weight_decay)
        m = store.m[name] * dt(beta1) + g * dt(1.0 - beta1)
        v = store.v[name] * dt(beta2) + g * g * dt(1.0 - beta2)
        denom = np.sqrt(v / dt(bc2)) + dt(eps)
        p.data = (data - dt(lr / bc1) * m / denom).astype(p.data.dtype, copy=False)
        store.m[name] = m
        store.v[name] = v
        p.grad = None


# He gain for leaky ReLU with slope 0.2
LEAKY_GAIN = float(np.sqrt(2.0 / (1.0 + 0.2**2)))


def conv_init(rng, out_ch, in_ch, kernel, zero=False, gain=None):
    """Conv weights and bias.

    Default: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for both. With ``gain`` the
    weights are He-uniform, U(-b, b) with ``b = gain * sqrt(3 / fan_in)``,
    which keeps activation scale through a stack of leaky-ReLU convs, and
    the bias starts at zero.
    """
    shape = (out_ch, in_ch) + tuple(kernel)
    if zero:
        return np.zeros(shape), np.zeros(out_ch)
    fan_in = in_ch * np.prod(kernel)
    if gain is not None:
        bound = gain * np.sqrt(3.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape), np.zeros(out_ch)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape), rng.uniform(-bound, bound, size=out_ch)
