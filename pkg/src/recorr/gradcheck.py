"""Finite-difference audit of every differentiable op and of the composed network.

All checks run in float64 with central differences (``h = 1e-4``). The error
of one check is ``max|analytic - numeric| / max(max|numeric|, 1e-6)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses
from . import updater as upd
from .config import RunConfig
from .encoder import split_context
from .params import ParamStore
from .pyramid import IterationSchedule, build_params, exp_field, register
from .search import local_search

H = 1e-4
TOL = 1e-4
FLOOR = 1e-6
MIN_STEP = 1e-8


@dataclass
class CheckResult:
    name: str
    error: float
    ok: bool
    note: str = ""


def rel_error(analytic, numeric) -> float:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(analytic - numeric)) / max(float(np.max(np.abs(numeric))), FLOOR))


def numeric_grad(f, arrays, idx, h=H):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arrays[idx]`` (mutated in place)."""
    x = arrays[idx]
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f()
        flat[k] = old - h
        fm = f()
        flat[k] = old
        gflat[k] = (fp - fm) / (2 * h)
    return g


def check_op(name, fn, inputs, rng, tol=TOL) -> CheckResult:
    """Compare analytic and numeric gradients of ``sum(R * fn(*inputs))`` for every input."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    out = fn(*[ad.Tensor(a) for a in arrays])
    weights = rng.normal(size=out.shape)

    def value():
        with ad.no_grad():
            return float(np.sum(weights * fn(*[ad.Tensor(a) for a in arrays]).data))

    leaves = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    res = fn(*leaves)
    loss = ad.sum(res * ad.Tensor(weights)) if res.shape != () else res * ad.Tensor(weights)
    loss.backward()
    err = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
        err = max(err, rel_error(analytic, numeric_grad(value, arrays, i)))
    return CheckResult(name, err, err < tol)


def _off_lattice_field(rng, dims, reach=1):
    # integer part plus a fraction kept away from lattice points, so +-h never crosses a kink
    ints = rng.integers(-reach, reach + 1, size=(3,) + dims)
    return ints + rng.uniform(0.15, 0.85, size=(3,) + dims)


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.05, 0.05 * np.sign(x + 1e-12), x)


def op_cases(rng):
    """``(name, fn, inputs)`` triples covering every differentiable op."""
    cfg = RunConfig()
    lcfg_ncc = cfg.loss.model_copy(update={"similarity": "ncc", "ncc_window": 3})

    def dims():
        return tuple(int(n) for n in rng.integers(2, 5, size=3))

    def vol(c=None, d=None):
        d = d or dims()
        return rng.normal(size=((c or int(rng.integers(1, 4))),) + d)

    d = dims()
    c = int(rng.integers(1, 4))
    a, b = vol(c, d), vol(c, d)
    yield "add", ad.add, [a, b]
    yield "sub", ad.sub, [a, b]
    yield "mul", ad.mul, [a, b]
    yield "div", ad.div, [a, np.abs(b) + 0.5]
    yield "scale", lambda x: ad.scale(x, 1.7), [a]
    yield "add_scalar", lambda x: ad.add_scalar(x, -0.3), [a]
    yield "square", ad.square, [a]
    yield "sqrt", ad.sqrt, [np.abs(a) + 0.5]
    yield "leaky_relu", ad.leaky_relu, [_away_from_zero(rng, a.shape)]
    yield "sigmoid", ad.sigmoid, [a]
    yield "tanh", ad.tanh, [a]
    yield "sum", lambda x: ad.sum(x, axis=(1, 2, 3)), [a]
    yield "mean", ad.mean, [a]
    yield "concat", lambda x, y: ad.concat([x, y]), [a, vol(2, d)]
    yield "channels", lambda x: ad.channels(x, 0, 1), [a]

    def split_mix(x):
        first, rest = ad.split(x, [1, 2])
        return ad.concat([rest, first * 3.0])

    yield "split", split_mix, [vol(3, d)]
    axis = int(rng.integers(1, 4))
    yield "diff", lambda x: ad.diff(x, axis), [a]
    ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = tuple(int(v) for v in rng.choice([1, 3], size=3))
    yield "conv3d", lambda x, w, bb: ad.conv3d(x, w, bb), [vol(ci, d), rng.normal(size=(co, ci) + k), rng.normal(size=co)]
    yield "conv3d_stride2", lambda x, w: ad.conv3d(x, w, stride=2), [vol(ci, (4, 4, 4)), rng.normal(size=(co, ci, 3, 3, 3))]
    sep = upd.GRU_KERNELS[int(rng.integers(0, 3))]
    yield "separable_conv3d", lambda x, w: ad.conv3d(x, w), [vol(ci, (5, 5, 5)), rng.normal(size=(co, ci) + sep)]
    out_dims = tuple(2 * n for n in d)
    yield "resize", lambda x: ad.resize(x, out_dims), [a]
    yield "upsample_field", lambda x: ad.resize(x, out_dims, vector_scale=True), [vol(3, d)]
    fld, img = _off_lattice_field(rng, d), vol(c, d)
    yield "warp_image", lambda x: ad.warp(x, ad.Tensor(fld)), [a]
    yield "warp_field", lambda u: ad.warp(ad.Tensor(img), u), [fld]
    yield "warp", ad.warp, [img, fld]
    yield "compose", ad.compose, [rng.uniform(-0.4, 0.4, (3,) + d), _off_lattice_field(rng, d)]
    r = int(rng.choice([1, 3]))
    yield "correlation", lambda f, g: ad.correlation(f, g, r), [a, b]
    yield "local_search", lambda f, g, u: local_search(f, g, u, r), [a, b, _off_lattice_field(rng, d)]
    yield "box_sum", lambda x: ad.box_sum(x, 3), [a]
    yield "mse", losses.mse, [a, b]
    yield "ncc", lambda x, y: losses.ncc(x, y, 3), [vol(1, (4, 4, 4)), vol(1, (4, 4, 4))]
    yield "grad_l2", losses.grad_l2, [vol(3, d)]
    pa, pb = rng.uniform(0.1, 0.9, (2,) + d), rng.uniform(0.1, 0.9, (2,) + d)
    yield "dice_loss", losses.dice_loss, [pa, pb]
    yield "single_loss_ncc", lambda f, m, u: losses.single_loss(f, m, u, lcfg_ncc), \
        [vol(1, (4, 4, 4)), vol(1, (4, 4, 4)), _off_lattice_field(rng, (4, 4, 4), reach=0) - 0.5]
    yield "exp_field", lambda v: exp_field(v), [0.3 * vol(3, (4, 4, 4))]
    yield from _updater_cases(rng)


def _updater_cases(rng):
    hidden, motion, r = 2, 3, 3
    d = (3, 3, 3)
    store = ParamStore(np.float64)
    upd.init_params(store, 0, r**3, hidden, motion, rng)
    for name, t in store.items():
        t.data = rng.normal(scale=0.3, size=t.shape)
    names = list(store)

    corr, field = rng.normal(size=(r**3,) + d), rng.normal(size=(3,) + d)
    h, ctx, m = np.tanh(rng.normal(size=(hidden,) + d)), rng.normal(size=(hidden,) + d), rng.normal(size=(motion,) + d)
    sel = [n for n in names if ".motion" in n]
    yield "motion_detect", _bind(store, sel, lambda c, u: upd.motion_detect(c, u, store, 0)), \
        [store[n].data for n in sel] + [corr, field]
    sel = [n for n in names if ".gru" in n]
    yield "gru_step", _bind(store, sel, lambda hh, mm, cc: upd.gru_step(upd.UpdaterState(hh, cc, 0), mm, store).h), \
        [store[n].data for n in sel] + [h, m, ctx]
    sel = [n for n in names if ".head" in n]
    yield "head", _bind(store, sel, lambda hh: upd.head(upd.UpdaterState(hh, hh, 0), store)), \
        [store[n].data for n in sel] + [h]
    yield "split_context", lambda x: ad.concat(list(split_context(x))), [rng.normal(size=(4,) + d)]


def _bind(store, names, fn):
    """Adapter: the first ``len(names)`` inputs replace the named parameters."""
    def wrapped(*args):
        for n, t in zip(names, args[: len(names)]):
            store.tensors[n] = t
        return fn(*args[len(names):])
    return wrapped


def network_check(seed=0, tol=TOL):
    """Composed network: two scales, 8^3 images zero-padded to 16^3, nonzero heads and biases, float64.

    Each parameter tensor is probed along one random unit direction plus
    three single coordinates. All probes form one gradient vector, so the
    error is normalised by its largest numeric entry; one result per tensor
    is reported on that common scale.

    A central difference straddling a leaky-ReLU sign flip or a trilinear
    cell boundary measures a secant, not a derivative. Such probes are
    detected by comparing branch digests at ``x`` and ``x +- h`` and repeated
    with ``h / 10`` until the interval lies on one smooth piece.
    """
    rng = np.random.default_rng(seed)
    cfg = RunConfig.model_validate({"encoder": {"channels": [4, 4, 4, 4, 4]}, "updater": {"motion_channels": 4},
                                    "refine": {"channels": 4}, "schedule": {"iterations": [0, 0, 1, 1]}})
    schedule = IterationSchedule((0, 0, 1, 1), True)
    params = build_params(cfg, seed=seed, dtype=np.float64)
    for name, t in params.items():
        if name.endswith("head.w") or name.startswith("refine.conv2"):
            t.data = rng.normal(scale=0.05, size=t.shape)
        elif name.endswith(".b"):
            # zero biases over zero padding put whole regions exactly on the leaky-ReLU kink
            t.data = rng.normal(scale=0.05, size=t.shape)
    small = np.zeros((2, 1, 16, 16, 16))
    small[:, :, :8, :8, :8] = rng.uniform(0, 1, size=(2, 1, 8, 8, 8))
    fixed, moving = small[0], small[1]

    def loss_value():
        with ad.no_grad():
            trace = register(fixed, moving, params, cfg, schedule=schedule, mode="learned")
            return float(losses.sequence_loss(trace, fixed, moving, cfg.loss).data)

    def branches(t, value):
        t.data = value
        with ad.record_branches() as log:
            f = loss_value()
        return f, log

    reprobed = []

    def central(t, base, direction, name):
        # shrink the step only when +-h straddles a kink (branch pattern changes)
        _, ref = branches(t, base)
        h = H
        while True:
            fp, lp = branches(t, base + h * direction)
            fm, lm = branches(t, base - h * direction)
            if (lp == ref and lm == ref) or h <= MIN_STEP:
                break
            h /= 10
        t.data = base
        if h < H:
            reprobed.append((name, h))
        return (fp - fm) / (2 * h)

    params.zero_grad()
    trace = register(fixed, moving, params, cfg, schedule=schedule, mode="learned")
    losses.sequence_loss(trace, fixed, moving, cfg.loss).backward()
    # parameters off the active path have no gradient; their numeric derivative must vanish too
    analytic = {n: np.zeros(t.shape) if t.grad is None else np.array(t.grad) for n, t in params.items()}
    probes = {}
    for name, t in params.items():
        base = t.data.copy()
        d = rng.normal(size=base.shape)
        d /= np.linalg.norm(d)
        num = [central(t, base, d, name)]
        ana = [float(np.sum(analytic[name] * d))]
        for k in rng.choice(base.size, size=min(3, base.size), replace=False):
            e = np.zeros(base.size)
            e[k] = 1.0
            num.append(central(t, base, e.reshape(base.shape), name))
            ana.append(float(analytic[name].reshape(-1)[k]))
        probes[name] = (np.array(ana), np.array(num))
    scale = max(max(float(np.max(np.abs(n))) for _, n in probes.values()), FLOOR)
    results = []
    for name, (a, n) in probes.items():
        err = float(np.max(np.abs(a - n))) / scale
        steps = [h for nm, h in reprobed if nm == name]
        note = f"{len(steps)} probe(s) straddled a kink, step reduced to {min(steps):.0e}" if steps else ""
        results.append(CheckResult(f"network:{name}", err, err < tol, note))
    return results


def run_audit(seed=0, shapes_per_op=10, network=True) -> list:
    """All op checks (``shapes_per_op`` random instances each) plus the network check."""
    rng = np.random.default_rng(seed)
    worst: dict[str, CheckResult] = {}
    for _ in range(shapes_per_op):
        for name, fn, inputs in op_cases(rng):
            res = check_op(name, fn, inputs, rng)
            if name not in worst or res.error > worst[name].error:
                worst[name] = res
    results = list(worst.values())
    if network:
        results.extend(network_check(seed))
    return results
