"""Training loop, validation selection and evaluation reports."""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from . import losses
from .config import RunConfig, write_config
from .encoder import pad_to_multiple
from .errors import DataError, NumericalError
from .metrics import assd, dice, hd95, one_hot, warp_labels
from .params import ParamStore, adamw_step
from .pyramid import build_params, register
from .synth import load_manifest, load_pair
from .volume import fold_fraction, jacobian_det

log = logging.getLogger(__name__)

METRICS = ("dice", "hd95", "assd", "fold", "epe")


def _dtype(cfg: RunConfig):
    return np.float64 if cfg.train.dtype == "float64" else np.float32


def _entries(manifest: dict, split: str) -> list:
    entries = manifest.get("splits", {}).get(split, [])
    if not entries:
        raise DataError(f"manifest split {split!r} is empty or missing")
    return entries


def _load(manifest, entry):
    try:
        return load_pair(manifest, entry)
    except (OSError, KeyError) as exc:
        raise DataError(f"pair {entry.get('id', '?')}: {exc}") from None


def _label_ids(pair):
    return sorted((set(pair.labels_fixed.ids()) | set(pair.labels_moving.ids())) - {0})


def estimate_field(fixed, moving, params, cfg: RunConfig, mode=None, variant=None) -> np.ndarray:
    """Final displacement for one pair; inputs are padded to multiples of 16 and the field cropped back."""
    dims = fixed.shape[1:]
    f_pad, _ = pad_to_multiple(fixed)
    m_pad, _ = pad_to_multiple(moving)
    dtype = params.dtype if params is not None else np.float32
    trace = register(f_pad.astype(dtype), m_pad.astype(dtype), params, cfg, mode=mode, variant=variant)
    u = trace.final_numpy()
    return np.ascontiguousarray(u[:, : dims[0], : dims[1], : dims[2]]).astype(np.float64)


def pair_loss(pair, params: ParamStore, cfg: RunConfig, return_terms=False):
    """Sequence loss of one training pair under the learned driver."""
    dt = params.dtype
    fixed, moving = pair.fixed.astype(dt), pair.moving.astype(dt)
    trace = register(fixed, moving, params, cfg, mode="learned")
    lf = lm = None
    if cfg.loss.dice_weight > 0:
        ids = _label_ids(pair)
        lf = one_hot(pair.labels_fixed, ids, dt)
        lm = one_hot(pair.labels_moving, ids, dt)
    return losses.sequence_loss(trace, fixed, moving, cfg.loss, lf, lm, return_terms=return_terms)


def pair_metrics(pair, u) -> dict:
    """Dice / HD95 / ASSD / %fold / endpoint error of field ``u`` on one pair."""
    warped = warp_labels(pair.labels_moving, u)
    ids = _label_ids(pair)
    per, mean = dice(warped, pair.labels_fixed, ids)
    h = hd95(warped, pair.labels_fixed, ids)
    a = assd(warped, pair.labels_fixed, ids)
    err = np.sqrt(np.sum((u - pair.true_field) ** 2, axis=0))
    return {
        "dice": float(mean),
        "dice_per_label": {str(k): float(v) for k, v in per.items()},
        "hd95": float(np.mean(list(h.values()))),
        "hd95_per_label": {str(k): float(v) for k, v in h.items()},
        "assd": float(np.mean(list(a.values()))),
        "assd_per_label": {str(k): float(v) for k, v in a.items()},
        "fold": float(fold_fraction(jacobian_det(u))),
        "epe": float(np.mean(err)),
    }


def _summary(rows: list) -> dict:
    out = {}
    for key in METRICS:
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def evaluate(manifest, cfg: RunConfig, split="test", params: ParamStore | None = None,
             mode=None, variant=None) -> dict:
    """Metrics report over one split; ``params=None`` selects the direct driver."""
    if not isinstance(manifest, dict):
        manifest = load_manifest(manifest)
    mode = "direct" if params is None else (mode or "learned")
    variant = variant or cfg.variant
    rows, base_rows = [], []
    for entry in _entries(manifest, split):
        pair = _load(manifest, entry)
        u = estimate_field(pair.fixed, pair.moving, params, cfg, mode=mode, variant=variant)
        if not np.all(np.isfinite(u)):
            raise NumericalError(f"non-finite field on pair {entry['id']}", {"pair": entry["id"]})
        row = {"id": entry["id"], **pair_metrics(pair, u)}
        base = {"id": entry["id"], **pair_metrics(pair, np.zeros_like(pair.true_field, dtype=np.float64))}
        rows.append(row)
        base_rows.append(base)
    return {
        "split": split,
        "mode": mode,
        "variant": variant,
        "seed": cfg.seed,
        "pairs": rows,
        "baseline": base_rows,
        "summary": _summary(rows),
        "baseline_summary": _summary(base_rows),
    }


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def validation_dice(manifest, cfg: RunConfig, params: ParamStore, split="val") -> float:
    scores = []
    for entry in _entries(manifest, split):
        pair = _load(manifest, entry)
        u = estimate_field(pair.fixed, pair.moving, params, cfg, mode="learned")
        scores.append(dice(warp_labels(pair.labels_moving, u), pair.labels_fixed, _label_ids(pair))[1])
    return float(np.mean(scores))


def _dump_nonfinite(out: Path, pid: str, epoch: int, terms) -> Path:
    path = out / f"nonfinite_{pid}.json"
    path.write_text(json.dumps({"pair": pid, "epoch": epoch, "terms": [repr(t) for t in terms]}, indent=2))
    return path


def train(manifest, cfg: RunConfig, out_dir, params: ParamStore | None = None) -> dict:
    """Train the learned driver; writes best/last checkpoints, a JSONL log and the resolved config.

    Pairs are visited in a seeded random order each epoch. Returns a summary
    with the best validation Dice and checkpoint paths.
    """
    if not isinstance(manifest, dict):
        manifest = load_manifest(manifest)
    train_entries = _entries(manifest, "train")
    _entries(manifest, "val")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.json")
    params = params or build_params(cfg, seed=cfg.seed, dtype=_dtype(cfg))
    rng = np.random.default_rng(cfg.seed)
    tc = cfg.train
    pairs = [_load(manifest, e) for e in train_entries]
    best = -np.inf
    best_path, last_path = out / "best.ckpt", out / "last.ckpt"
    log_path = out / "train_log.jsonl"
    log_path.write_text("")
    start = time.perf_counter()
    for epoch in range(1, tc.epochs + 1):
        total, clipped = 0.0, 0
        for idx in rng.permutation(len(pairs)):
            pid = train_entries[idx]["id"]
            loss, terms = pair_loss(pairs[idx], params, cfg, return_terms=True)
            value = float(loss.data)
            if not np.isfinite(value):
                dump = _dump_nonfinite(out, pid, epoch, terms)
                raise NumericalError(f"non-finite loss on pair {pid} (epoch {epoch}); dump at {dump}",
                                     {"pair": pid, "epoch": epoch})
            loss.backward()
            _, was_clipped = params.clip_grad_norm(tc.clip_norm)
            clipped += int(was_clipped)
            adamw_step(params, tc.lr, tc.beta1, tc.beta2, tc.eps, tc.weight_decay)
            total += value
        val = validation_dice(manifest, cfg, params)
        record = {
            "epoch": epoch,
            "loss": total / len(pairs),
            "val_dice": val,
            "clipped": clipped,
            "wall_time": round(time.perf_counter() - start, 3),
            "seed": cfg.seed,
        }
        with log_path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")
        log.info("epoch %d loss %.6f val dice %.4f clipped %d", epoch, record["loss"], val, clipped)
        if val > best:
            best = val
            params.save(best_path)
        params.save(last_path)
    return {"best_val_dice": best, "best": str(best_path), "last": str(last_path), "log": str(log_path)}


def load_params(path, cfg: RunConfig) -> ParamStore:
    params = build_params(cfg, seed=cfg.seed, dtype=_dtype(cfg))
    try:
        params.load(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    return params


def read_log(path) -> list:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


__all__ = ["estimate_field", "evaluate", "load_params", "pair_loss", "pair_metrics", "read_log",
           "train", "validation_dice", "write_report"]
