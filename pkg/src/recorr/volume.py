"""Grids, trilinear sampling, warping, resampling and Jacobian analysis.

Conventions used throughout the package:

* image arrays are ``(C, D, H, W)``, index ``[c, z, y, x]``;
* displacement fields are ``(3, D, H, W)`` in voxel units with components
  ordered ``(z, y, x)``; the deformation is ``phi(p) = p + u(p)``;
* sampling outside the grid clamps to the border voxel.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ContractError, NumericalError

__all__ = [
    "Volume",
    "identity_grid",
    "trilinear_sample",
    "warp",
    "compose",
    "resize",
    "upsample_field",
    "resize_field",
    "downsample_volume",
    "jacobian_det",
    "fold_fraction",
]


@dataclass
class Volume:
    """A multi-channel 3-D grid with voxel spacing in mm.

    ``values`` has shape ``(C, D, H, W)``; displacement fields are stored
    as ``Volume`` objects with ``C == 3``.
    """

    values: np.ndarray
    spacing: tuple = dc_field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim == 3:
            values = values[None]
        if values.ndim != 4 or min(values.shape) < 1:
            raise ContractError(f"volume values must be (C, D, H, W), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ContractError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ContractError(f"spacing must be three positive numbers, got {self.spacing}")
        self.values = values
        self.spacing = spacing

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> tuple:
        return tuple(self.values.shape[1:])


def _check_field(field, dims=None):
    if field.ndim != 4 or field.shape[0] != 3:
        raise ContractError(f"displacement field must be (3, D, H, W), got {field.shape}")
    if dims is not None and tuple(field.shape[1:]) != tuple(dims):
        raise ContractError(f"field dims {field.shape[1:]} do not match grid dims {tuple(dims)}")


def identity_grid(dims, dtype=np.float64):
    """Voxel-center coordinates ``(3, D, H, W)``."""
    return np.stack(np.meshgrid(*[np.arange(n, dtype=dtype) for n in dims], indexing="ij"))


def _axis_terms(coord, n):
    # clamp to [0, n-1]; the clamp derivative is taken right-continuous, so it
    # is 1 on [0, n-1) and 0 elsewhere
    c = np.clip(coord, 0, n - 1)
    i0 = np.floor(c)
    if n > 1:
        i0 = np.minimum(i0, n - 2)
    i0 = i0.astype(np.intp)
    frac = c - i0
    i1 = np.minimum(i0 + 1, n - 1)
    live = (coord >= 0) & (coord < n - 1)
    return i0, i1, frac, live


class SampleCache:
    """Corner indices and weights of one trilinear gather, reused by backward."""

    __slots__ = ("dims", "out_shape", "idx", "frac", "live")

    def __init__(self, dims, out_shape, idx, frac, live):
        self.dims = dims
        self.out_shape = out_shape
        self.idx = idx  # per axis: (i0, i1)
        self.frac = frac
        self.live = live

    def corners(self):
        """Yield ``(flat_index, weight, (bz, by, bx))`` for the eight corners."""
        (z0, z1), (y0, y1), (x0, x1) = self.idx
        fz, fy, fx = self.frac
        _, H, W = self.dims
        for bz, zi, wz in ((0, z0, 1 - fz), (1, z1, fz)):
            for by, yi, wy in ((0, y0, 1 - fy), (1, y1, fy)):
                for bx, xi, wx in ((0, x0, 1 - fx), (1, x1, fx)):
                    yield (zi * H + yi) * W + xi, wz * wy * wx, (bz, by, bx)


def sample_cache(dims, coords):
    if not np.all(np.isfinite(coords)):
        raise NumericalError("non-finite sample coordinates (displacement field contains NaN or inf)")
    terms = [_axis_terms(coords[a], dims[a]) for a in range(3)]
    return SampleCache(
        tuple(dims),
        coords.shape[1:],
        [(t[0], t[1]) for t in terms],
        [t[2] for t in terms],
        [t[3] for t in terms],
    )


def gather(values, cache):
    """Trilinear interpolation of ``values`` given a precomputed cache."""
    C = values.shape[0]
    flat = values.reshape(C, -1)
    out = np.zeros((C,) + cache.out_shape, dtype=values.dtype)
    for idx, w, _ in cache.corners():
        out += flat[:, idx] * w
    return out


def trilinear_sample(values, coords):
    """Sample ``values`` (C, D, H, W) at absolute voxel ``coords`` (3, ...)."""
    values = np.asarray(values)
    coords = np.asarray(coords, dtype=values.dtype if values.dtype.kind == "f" else np.float64)
    return gather(values, sample_cache(values.shape[1:], coords))


def warp(image, field):
    """Resample ``image`` at ``p + u(p)``; channels are preserved."""
    image = np.asarray(image)
    field = np.asarray(field)
    _check_field(field, image.shape[1:])
    coords = identity_grid(image.shape[1:], field.dtype) + field
    return trilinear_sample(image, coords)


def compose(outer, inner):
    """Displacement of ``phi_outer o phi_inner``: ``u_in(p) + u_out(p + u_in(p))``."""
    outer = np.asarray(outer)
    inner = np.asarray(inner)
    _check_field(outer)
    _check_field(inner, outer.shape[1:])
    return inner + warp(outer, inner)


def interp_matrix(n_in, n_out, dtype=np.float64):
    """Linear interpolation matrix mapping ``n_in`` samples to ``n_out``.

    Uses half-voxel alignment: output ``j`` reads input coordinate
    ``(j + 0.5) * n_in / n_out - 0.5``, clamped to the grid.
    """
    A = np.zeros((n_out, n_in), dtype=dtype)
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0, i1, frac, _ = _axis_terms(pos, n_in)
    rows = np.arange(n_out)
    np.add.at(A, (rows, i0), 1 - frac)
    np.add.at(A, (rows, i1), frac)
    return A


def resize(values, out_dims):
    """Separable trilinear resampling of a (C, D, H, W) array to ``out_dims``."""
    values = np.asarray(values)
    out = values
    for axis, n_out in enumerate(out_dims):
        A = interp_matrix(out.shape[axis + 1], n_out, values.dtype)
        out = np.moveaxis(np.tensordot(A, out, axes=([1], [axis + 1])), 0, axis + 1)
    return np.ascontiguousarray(out)


def field_scale(in_dims, out_dims):
    return tuple(o / i for i, o in zip(in_dims, out_dims))


def resize_field(field, out_dims):
    """Resample a displacement field and rescale its vectors to the new voxel size."""
    field = np.asarray(field)
    _check_field(field)
    out = resize(field, out_dims)
    for a, s in enumerate(field_scale(field.shape[1:], out_dims)):
        out[a] *= s
    return out


def upsample_field(field, factor=2):
    field = np.asarray(field)
    return resize_field(field, tuple(n * factor for n in field.shape[1:]))


def downsample_volume(image, factor=2):
    """``factor``-cubed mean pooling per channel."""
    image = np.asarray(image)
    C, D, H, W = image.shape
    if D % factor or H % factor or W % factor:
        raise ContractError(f"dims {(D, H, W)} not divisible by {factor}")
    f = factor
    return image.reshape(C, D // f, f, H // f, f, W // f, f).mean(axis=(2, 4, 6))


def jacobian_det(field):
    """Determinant of the Jacobian of ``id + u`` on interior voxels.

    Central differences; the result has shape ``(D-2, H-2, W-2)``.
    """
    field = np.asarray(field, dtype=np.float64)
    _check_field(field)
    if min(field.shape[1:]) < 3:
        raise ContractError("jacobian_det needs at least 3 voxels per axis")
    J = np.empty((3, 3) + tuple(n - 2 for n in field.shape[1:]))
    inner = (slice(1, -1),) * 3
    for b in range(3):
        hi = list(inner)
        lo = list(inner)
        hi[b] = slice(2, None)
        lo[b] = slice(None, -2)
        for a in range(3):
            J[a, b] = (field[a][tuple(hi)] - field[a][tuple(lo)]) / 2.0
        J[b, b] += 1.0
    return (
        J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
        - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
        + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0])
    )


def fold_fraction(jmap) -> float:
    """Fraction of voxels with a non-positive Jacobian determinant."""
    jmap = np.asarray(jmap)
    if jmap.size == 0:
        return 0.0
    return float(np.count_nonzero(jmap <= 0)) / jmap.size
