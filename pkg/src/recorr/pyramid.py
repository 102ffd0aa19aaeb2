"""Coarse-to-fine recurrent registration across the feature pyramid.

Scales 0..3 (1/16 .. 1/2 resolution) each run ``T_i`` search-and-update
iterations, accumulating residual fields; the result of one scale is
upsampled by 2 to initialise the next. A conv block at full resolution
optionally refines the final field.

Two drivers share this loop. ``learned`` runs the trainable updater.
``direct`` needs no training and serves as an oracle for the search scheme
itself: it correlates fixed block descriptors (see :func:`direct_features`)
and turns each correlation volume into a residual by soft-argmax, minus the
soft-argmax of the fixed image's own autocorrelation (zero at alignment, so
an identical pair stays at the identity), smoothed with a Gaussian.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from . import encoder as enc
from . import updater as upd
from .config import RunConfig
from .errors import ContractError
from .params import LEAKY_GAIN, ParamStore, conv_init
from .search import local_search, soft_argmax
from .volume import downsample_volume
from .volume import warp as np_warp

N_SCALES = 4
FINAL_SCALE = 4


@dataclass(frozen=True)
class IterationSchedule:
    iterations: tuple = (3, 3, 2, 2)
    refine: bool = True

    def __post_init__(self):
        its = tuple(int(t) for t in self.iterations)
        if len(its) != N_SCALES or min(its) < 0:
            raise ContractError(f"schedule needs four non-negative counts, got {self.iterations}")
        if sum(its) < 1:
            raise ContractError("schedule must contain at least one iteration")
        object.__setattr__(self, "iterations", its)

    @property
    def length(self) -> int:
        """Number of fields in a trace (supervised outputs)."""
        return sum(self.iterations) + (1 if self.refine else 0)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "IterationSchedule":
        return cls(tuple(cfg.schedule.iterations), cfg.schedule.refine)


@dataclass
class RegistrationTrace:
    fields: list = dc_field(default_factory=list)  # full-resolution displacements, Tensor
    scales: list = dc_field(default_factory=list)  # scale index per field, 4 = refinement
    diagnostics: list = dc_field(default_factory=list)
    velocity: object = None  # final accumulated velocity (diffeo variant)

    def __len__(self):
        return len(self.fields)

    @property
    def final(self):
        return self.fields[-1]

    def final_numpy(self) -> np.ndarray:
        return np.asarray(self.fields[-1].data)


def build_params(cfg: RunConfig, seed=None, dtype=np.float32) -> ParamStore:
    """Freshly initialised parameters for the whole network."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    store = ParamStore(dtype)
    enc.init_params(store, cfg.encoder, rng)
    corr_ch = cfg.search.radius**3
    for i in range(N_SCALES):
        hidden = cfg.encoder.level_channels(i) // 2
        upd.init_params(store, i, corr_ch, hidden, cfg.updater.motion_channels, rng)
    c4 = cfg.encoder.level_channels(FINAL_SCALE)
    w, b = conv_init(rng, cfg.refine.channels, 2 * c4 + 3, (3, 3, 3), gain=LEAKY_GAIN)
    store.add("refine.conv1.w", w)
    store.add("refine.conv1.b", b)
    w, b = conv_init(rng, 3, cfg.refine.channels, (3, 3, 3), zero=True)
    store.add("refine.conv2.w", w)
    store.add("refine.conv2.b", b)
    return store


def exp_field(v, steps=5):
    """Scaling and squaring: integrate a stationary velocity field.

    ``u = v / 2**steps`` followed by ``steps`` self-compositions. Accepts a
    Tensor (differentiable) or an ndarray (returns an ndarray).
    """
    if steps < 1:
        raise ContractError("steps must be >= 1")
    is_array = not isinstance(v, ad.Tensor)
    u = ad.scale(ad.as_tensor(np.asarray(v) if is_array else v), 1.0 / 2**steps)
    for _ in range(steps):
        u = ad.compose(u, u)
    return np.asarray(u.data) if is_array else u


def _to_full(field, full_dims):
    if field.shape[1:] == tuple(full_dims):
        return field
    return ad.resize(field, full_dims, vector_scale=True)


def direct_features(image: np.ndarray, block=2) -> list:
    """Training-free descriptors for the direct driver, one per pyramid level.

    At a level with voxel size ``f`` the image is mean-pooled to cells of
    ``f / b`` voxels (``b = min(block, f)``) and each coarse voxel is described
    by the ``(3b)**3`` cells covering its 3x3x3 neighbourhood. Descriptors are
    centred and scaled to norm ``sqrt(C)``, so the 1/C-normalised correlation
    equals the cosine similarity.
    """
    image = np.asarray(image, dtype=np.float64)
    D = image.shape[1:]
    pooled = {1: image}
    out = []
    for level in range(5):
        f = 2 ** (4 - level)
        b = min(block, f)
        cell = f // b
        while cell not in pooled:
            prev = max(pooled)
            pooled[prev * 2] = downsample_volume(pooled[prev])
        L = np.pad(pooled[cell][0], b, mode="edge")
        n = [d // f for d in D]
        chans = [L[a : a + n[0] * b : b, c : c + n[1] * b : b, e : e + n[2] * b : b]
                 for a in range(3 * b) for c in range(3 * b) for e in range(3 * b)]
        F = np.stack(chans)
        F = F - F.mean(axis=0, keepdims=True)
        norm = np.sqrt(np.sum(F * F, axis=0, keepdims=True))
        out.append(F / np.maximum(norm, 1e-8) * np.sqrt(F.shape[0]))
    return out


def _smooth(field, sigma):
    if sigma <= 0:
        return field
    return np.stack([gaussian_filter(c, sigma, mode="nearest") for c in field])


def register(fixed, moving, params: ParamStore, cfg: RunConfig, schedule=None, mode=None,
             variant=None, diagnostics=False) -> RegistrationTrace:
    """Register ``moving`` onto ``fixed``; both ``(1, D, H, W)`` with dims % 16 == 0.

    The returned trace holds every intermediate field upsampled to full
    resolution; ``trace.final`` is the estimate of ``u`` with
    ``moving(p + u(p)) ~ fixed(p)``.
    """
    schedule = schedule or IterationSchedule.from_config(cfg)
    mode = mode or cfg.mode
    variant = variant or cfg.variant
    if mode not in ("learned", "direct"):
        raise ContractError(f"unknown mode {mode!r}")
    if variant not in ("standard", "diffeo"):
        raise ContractError(f"unknown variant {variant!r}")
    fixed = ad.as_tensor(fixed)
    moving = ad.as_tensor(moving)
    if fixed.shape != moving.shape:
        raise ContractError(f"fixed {fixed.shape} and moving {moving.shape} differ")
    if mode == "direct":
        with ad.no_grad():
            return _run(fixed, moving, params, cfg, schedule, "direct", variant, diagnostics)
    return _run(fixed, moving, params, cfg, schedule, mode, variant, diagnostics)


def _run(fixed, moving, params, cfg, schedule, mode, variant, diagnostics):
    diffeo = variant == "diffeo"
    learned = mode == "learned"
    r = cfg.search.radius
    full_dims = fixed.shape[1:]
    dtype = fixed.dtype if fixed.dtype.kind == "f" else np.float32
    if learned:
        pyr_f = enc.encode(fixed, params)
        pyr_m = enc.encode(moving, params)
        dtype = pyr_f[0].dtype
    else:
        pyr_f = [ad.Tensor(F.astype(dtype)) for F in direct_features(fixed.data)]
        pyr_m = [ad.Tensor(F.astype(dtype)) for F in direct_features(moving.data)]
    trace = RegistrationTrace()
    field = ad.Tensor(np.zeros((3,) + pyr_f[0].shape[1:], dtype=dtype))

    def deformation(f):
        return exp_field(f) if diffeo else f

    def direct_delta(F_f, F_m, f, auto):
        corr = local_search(F_f, F_m, deformation(f), r)
        d = soft_argmax(corr, cfg.search.temperature) - auto
        return ad.Tensor(_smooth(d, cfg.search.direct_smoothing).astype(dtype))

    def autocorr(F_f):
        zero = np.zeros((3,) + F_f.shape[1:], dtype=dtype)
        return soft_argmax(local_search(F_f, F_f, zero, r), cfg.search.temperature)

    def record(f, scale, it, delta):
        full = deformation(_to_full(f, full_dims))
        trace.fields.append(full)
        trace.scales.append(scale)
        diag = {"scale": scale, "iteration": it, "mean_abs_delta": float(np.mean(np.abs(delta.data)))}
        if diagnostics:
            warped = np_warp(moving.data, full.data)
            diag["similarity_mse"] = float(np.mean((warped - fixed.data) ** 2))
        trace.diagnostics.append(diag)

    for i in range(N_SCALES):
        F_f, F_m = pyr_f[i], pyr_m[i]
        if i > 0:
            field = ad.resize(field, F_f.shape[1:], vector_scale=True)
        if schedule.iterations[i] == 0:
            continue
        if learned:
            h0, ctx = enc.split_context(F_f)
            state = upd.UpdaterState(h0, ctx, i)
        else:
            auto = autocorr(F_f)
        for t in range(schedule.iterations[i]):
            if learned:
                corr = local_search(F_f, F_m, deformation(field), r)
                m = upd.motion_detect(corr, field, params, i)
                state = upd.gru_step(state, m, params)
                delta = upd.head(state, params)
            else:
                delta = direct_delta(F_f, F_m, field, auto)
            field = field + delta
            record(field, i, t + 1, delta)

    field = _to_full(field, full_dims)
    if schedule.refine:
        F_f, F_m = pyr_f[FINAL_SCALE], pyr_m[FINAL_SCALE]
        if learned:
            x = ad.concat([F_f, ad.warp(F_m, deformation(field)), field])
            x = ad.leaky_relu(ad.conv3d(x, params["refine.conv1.w"], params["refine.conv1.b"]))
            delta = ad.conv3d(x, params["refine.conv2.w"], params["refine.conv2.b"])
        else:
            delta = direct_delta(F_f, F_m, field, autocorr(F_f))
        field = field + delta
        record(field, FINAL_SCALE, 1, delta)
    if diffeo:
        trace.velocity = field
    return trace
