"""Deterministic labelled phantoms and ground-truth registration pairs.

A pair keeps the phantom as the moving image and builds the fixed image by
warping it with the ground-truth field, so ``true_field`` maps fixed
coordinates to moving ones and ``warp(moving, true_field) == fixed``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import RunConfig
from .errors import ContractError, DataError
from .io import read_vol3, write_vol3
from .metrics import LabelMap, warp_labels
from .pyramid import exp_field
from .volume import Volume, fold_fraction, identity_grid, jacobian_det, resize, warp

MANIFEST_VERSION = 1


@dataclass
class PhantomSpec:
    seed: int = 0
    dims: tuple = (32, 32, 32)
    labels: int = 4
    noise: float = 0.02
    texture: float = 0.15
    smoothing: float = 2.0
    spacing: tuple = (1.0, 1.0, 1.0)


@dataclass
class PerturbSpec:
    kind: str = "svf"  # svf | affine-offset | affine-scale | translation | none
    magnitude: float = 4.0
    seed: int = 0
    s: int = 4
    translation: tuple | None = None


@dataclass
class Pair:
    fixed: np.ndarray  # (1, D, H, W)
    moving: np.ndarray
    labels_fixed: LabelMap
    labels_moving: LabelMap
    true_field: np.ndarray  # (3, D, H, W)
    perturb: PerturbSpec


def _ellipsoid(grid, center, radii):
    q = sum(((grid[a] - center[a]) / radii[a]) ** 2 for a in range(3))
    return q <= 1.0


def make_phantom(spec: PhantomSpec):
    """Textured image in [0, 1] and its label map.

    Label 1 is a large ellipsoid, label 2 sits inside it, label 3 is a
    smaller ellipsoid offset towards its rim; everything else is background.
    """
    dims = tuple(int(n) for n in spec.dims)
    if len(dims) != 3 or min(dims) < 16:
        raise ContractError(f"phantom dims must be at least 16 per axis, got {spec.dims}")
    if not 2 <= spec.labels <= 4:
        raise ContractError("phantom supports 2 to 4 labels (background included)")
    rng = np.random.default_rng(spec.seed)
    grid = identity_grid(dims)
    d = np.array(dims, dtype=np.float64)
    for _ in range(100):
        c1 = (d - 1) / 2 + rng.uniform(-0.06, 0.06, 3) * d
        r1 = rng.uniform(0.28, 0.36, 3) * d
        lab = np.zeros(dims, dtype=np.int32)
        lab[_ellipsoid(grid, c1, r1)] = 1
        if spec.labels > 2:
            c2 = c1 + rng.uniform(-0.3, 0.3, 3) * r1
            lab[_ellipsoid(grid, c2, r1 * rng.uniform(0.3, 0.45, 3))] = 2
        if spec.labels > 3:
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            c3 = c1 + direction * r1 * 0.75
            lab[_ellipsoid(grid, c3, rng.uniform(0.12, 0.18, 3) * d)] = 3
        if all(np.any(lab == k) for k in range(spec.labels)):
            break
    else:  # pragma: no cover - geometry above always leaves room
        raise ContractError("could not place non-empty labels")
    base = np.array([0.1, 0.45, 0.75, 0.95]) + rng.uniform(-0.05, 0.05, 4)
    img = base[lab]
    tex = gaussian_filter(rng.normal(size=dims), spec.smoothing, mode="reflect")
    tex /= tex.std() + 1e-12
    img = img + spec.texture * tex + spec.noise * rng.normal(size=dims)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Volume(img[None], spec.spacing), LabelMap(lab, spec.spacing)


def svf_field(dims, s, magnitude, rng):
    """Random smooth velocity at ``dims / s``, integrated to a displacement.

    Returns ``(field, used_magnitude)``. The velocity is rescaled so its
    largest vector has length ``magnitude``; if the integrated field folds,
    the magnitude is shrunk by 20% and the same velocity retried.
    """
    coarse = tuple(max(2, n // s) for n in dims)
    v = rng.normal(size=(3,) + coarse)
    v = np.stack([gaussian_filter(c, 1.0, mode="nearest") for c in v])
    v = resize(v, dims)
    v /= np.sqrt(np.sum(v * v, axis=0)).max() + 1e-12
    mag = float(magnitude)
    for _ in range(50):
        u = exp_field(v * mag)
        if fold_fraction(jacobian_det(u)) == 0.0:
            return u, mag
        mag *= 0.8
    raise ContractError("could not generate a fold-free SVF field")


def true_field_for(dims, perturb: PerturbSpec) -> tuple:
    """Ground-truth displacement for a perturbation; returns (field, spec used)."""
    dims = tuple(dims)
    rng = np.random.default_rng(perturb.seed)
    u = np.zeros((3,) + dims)
    used = PerturbSpec(**asdict(perturb))
    if perturb.kind == "none":
        pass
    elif perturb.kind == "svf":
        u, used.magnitude = svf_field(dims, perturb.s, perturb.magnitude, rng)
    elif perturb.kind == "translation":
        if perturb.translation is not None:
            t = np.asarray(perturb.translation, dtype=np.float64)
        else:
            t = rng.normal(size=3)
            t *= perturb.magnitude / np.linalg.norm(t)
        used.translation = tuple(float(x) for x in t)
        u += t[:, None, None, None]
    elif perturb.kind == "affine-offset":
        # shift along x, magnitude in normalised [-1, 1] coordinates
        u[2] = perturb.magnitude * (dims[2] - 1) / 2.0
    elif perturb.kind == "affine-scale":
        x = np.arange(dims[2], dtype=np.float64) - (dims[2] - 1) / 2.0
        u[2] = perturb.magnitude * x[None, None, :]
    else:
        raise ContractError(f"unknown perturbation kind {perturb.kind!r}")
    return u, used


def make_pair(img: Volume, labels: LabelMap, perturb: PerturbSpec) -> Pair:
    moving = np.asarray(img.values, dtype=np.float32)
    u, used = true_field_for(labels.dims, perturb)
    fixed = warp(moving.astype(np.float64), u).astype(np.float32)
    return Pair(fixed, moving, warp_labels(labels, u), labels, u.astype(np.float32), used)


def _split_seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def generate_dataset(cfg: RunConfig, out_dir) -> Path:
    """Write all pairs as ``.vol3`` plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = cfg.data
    dims = (data.dims,) * 3
    sizes = {"train": data.n_train, "val": data.n_val, "test": data.n_test}
    seeds = _split_seeds(cfg.seed, 2 * sum(sizes.values()))
    manifest = {"manifest_version": MANIFEST_VERSION, "seed": cfg.seed, "dims": list(dims),
                "splits": {}}
    n = 0
    for split, count in sizes.items():
        entries = []
        for j in range(count):
            pseed, tseed = seeds[2 * n], seeds[2 * n + 1]
            n += 1
            ph = PhantomSpec(seed=pseed, dims=dims, labels=data.phantom.labels, noise=data.phantom.noise,
                             texture=data.phantom.texture, smoothing=data.phantom.smoothing,
                             spacing=tuple(data.spacing))
            pt = data.perturb
            spec = PerturbSpec(kind=pt.kind, magnitude=pt.magnitude, seed=tseed, s=pt.s,
                               translation=tuple(pt.translation) if pt.translation else None)
            img, lab = make_phantom(ph)
            pair = make_pair(img, lab, spec)
            pid = f"{split}_{j:03d}"
            entries.append(write_pair(out, pid, pair, ph))
        manifest["splits"][split] = entries
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def write_pair(out: Path, pid: str, pair: Pair, phantom: PhantomSpec) -> dict:
    d = out / pid
    d.mkdir(parents=True, exist_ok=True)
    sp = pair.labels_fixed.spacing
    files = {
        "fixed": Volume(pair.fixed, sp),
        "moving": Volume(pair.moving, sp),
        "labels_fixed": Volume(pair.labels_fixed.labels[None].astype(np.float32), sp),
        "labels_moving": Volume(pair.labels_moving.labels[None].astype(np.float32), sp),
        "true_field": Volume(pair.true_field, sp),
    }
    entry = {"id": pid, "phantom_seed": phantom.seed, "perturb": asdict(pair.perturb)}
    for key, vol in files.items():
        write_vol3(d / f"{key}.vol3", vol)
        entry[key] = f"{pid}/{key}.vol3"
    return entry


def load_manifest(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    doc["_root"] = str(path.parent)
    return doc


def load_pair(manifest: dict, entry: dict) -> Pair:
    root = Path(manifest["_root"])
    vols = {k: read_vol3(root / entry[k]) for k in
            ("fixed", "moving", "labels_fixed", "labels_moving", "true_field")}
    sp = vols["fixed"].spacing
    return Pair(
        vols["fixed"].values,
        vols["moving"].values,
        LabelMap(vols["labels_fixed"].values[0], sp),
        LabelMap(vols["labels_moving"].values[0], sp),
        vols["true_field"].values,
        PerturbSpec(**{k: v for k, v in entry.get("perturb", {}).items()}),
    )
