"""Command-line entry point: ``recorr <command> ...``.

Exit codes: 0 ok, 1 usage / configuration error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig, describe_keys, load_config, parse_config, write_config
from .errors import ConfigError, ContractError, DataError, NumericalError
from .io import read_vol3, write_vol3
from .synth import generate_dataset
from .trainer import estimate_field, evaluate, load_params, train, write_report
from .volume import Volume, warp

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(path) -> RunConfig:
    return load_config(path) if path else parse_config({})


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".config.json")


def _echo_seed(cfg: RunConfig):
    print(f"seed: {cfg.seed}")


def cmd_gen(args):
    cfg = _config(args.spec)
    _echo_seed(cfg)
    out = Path(args.out)
    manifest = generate_dataset(cfg, out)
    write_config(cfg, out / "config.json")
    print(f"manifest: {manifest}")


def cmd_train(args):
    cfg = _config(args.config)
    _echo_seed(cfg)
    res = train(args.data, cfg, args.out)
    print(json.dumps(res, indent=2))


def _params_for(args, cfg):
    if args.direct:
        return None
    if not args.ckpt:
        raise UsageError("one of --ckpt or --direct is required")
    return load_params(args.ckpt, cfg)


def cmd_register(args):
    cfg = _config(args.config)
    _echo_seed(cfg)
    fixed, moving = read_vol3(args.fixed), read_vol3(args.moving)
    if fixed.dims != moving.dims:
        raise DataError(f"fixed {fixed.dims} and moving {moving.dims} differ in size")
    if fixed.channels != 1 or moving.channels != 1:
        raise DataError("register expects single-channel volumes")
    params = _params_for(args, cfg)
    variant = "diffeo" if args.diffeo else cfg.variant
    mode = "direct" if params is None else "learned"
    u = estimate_field(fixed.values, moving.values, params, cfg, mode=mode, variant=variant)
    if not np.all(np.isfinite(u)):
        raise NumericalError("registration produced non-finite displacements")
    out = Path(args.out)
    write_vol3(out, Volume(u.astype(np.float32), fixed.spacing))
    if args.warped:
        write_vol3(args.warped, Volume(warp(moving.values.astype(np.float64), u).astype(np.float32), fixed.spacing))
    resolved = cfg.model_copy(update={"mode": mode, "variant": variant})
    write_config(resolved, _sidecar(out))
    print(f"mean |u|: {float(np.mean(np.sqrt(np.sum(u * u, axis=0)))):.6f}")


def cmd_evaluate(args):
    cfg = _config(args.config)
    _echo_seed(cfg)
    params = _params_for(args, cfg)
    variant = "diffeo" if args.diffeo else cfg.variant
    report = evaluate(args.data, cfg, args.split, params, variant=variant)
    out = Path(args.report)
    write_report(report, out)
    write_config(cfg.model_copy(update={"variant": variant}), _sidecar(out))
    print(json.dumps(report["summary"], indent=2))


def cmd_gradcheck(args):
    from .gradcheck import run_audit

    print(f"seed: {args.seed}")
    results = run_audit(seed=args.seed, shapes_per_op=args.shapes)
    failed = [r for r in results if not r.ok]
    for r in results:
        note = f"  ({r.note})" if r.note else ""
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:32s} {r.error:.3e}{note}")
    worst = max(r.error for r in results)
    print(f"{len(results)} checks, {len(failed)} failed, worst relative error {worst:.3e}")
    if failed:
        raise NumericalError(f"{len(failed)} gradient checks failed")


def bench_correlation(radii, dims, channels, repeats=3, seed=0) -> dict:
    """Best-of-``repeats`` wall time of the correlation kernel and of warp per radius."""
    rng = np.random.default_rng(seed)
    shape = (channels, dims, dims, dims)
    f = ad.Tensor(rng.normal(size=shape).astype(np.float32))
    g = ad.Tensor(rng.normal(size=shape).astype(np.float32))
    u = ad.Tensor(rng.uniform(-2, 2, size=(3, dims, dims, dims)).astype(np.float32))
    out = {"dims": dims, "channels": channels, "repeats": repeats, "seed": seed, "correlation": {}, "warp": None}
    with ad.no_grad():
        ad.correlation(f, g, 1)
        for r in radii:
            best = np.inf
            for _ in range(repeats):
                t = time.perf_counter()
                ad.correlation(f, g, r)
                best = min(best, time.perf_counter() - t)
            out["correlation"][str(r)] = best
        best = np.inf
        for _ in range(repeats):
            t = time.perf_counter()
            ad.warp(g, u)
            best = min(best, time.perf_counter() - t)
        out["warp"] = best
    base = out["correlation"][str(radii[0])]
    out["ratios"] = {str(r): out["correlation"][str(r)] / base for r in radii}
    return out


def cmd_bench(args):
    try:
        radii = [int(x) for x in args.radii.split(",") if x]
    except ValueError:
        raise UsageError(f"--radii must be comma-separated integers, got {args.radii!r}") from None
    if not radii or any(r < 1 or r % 2 == 0 for r in radii):
        raise UsageError("radii must be positive odd integers")
    print(f"seed: {args.seed}")
    res = bench_correlation(radii, args.dims, args.channels, args.repeats, args.seed)
    text = json.dumps(res, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join("  " + line for line in describe_keys())
    epilog = f"configuration keys (JSON, dotted paths) and defaults:\n{keys}"
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="recorr", description="Recurrent correlation registration engine.", epilog=epilog,
                formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen", help="write a synthetic dataset and manifest", epilog=epilog, formatter_class=fmt)
    s.add_argument("--spec", help="JSON run config (data section used)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("train", help="train the learned driver", epilog=epilog, formatter_class=fmt)
    s.add_argument("--config")
    s.add_argument("--data", required=True, help="manifest.json")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("register", help="register one pair of .vol3 volumes", epilog=epilog, formatter_class=fmt)
    s.add_argument("--fixed", required=True)
    s.add_argument("--moving", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--ckpt")
    g.add_argument("--direct", action="store_true")
    s.add_argument("--diffeo", action="store_true")
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="displacement field .vol3")
    s.add_argument("--warped", help="optional warped moving image .vol3")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("evaluate", help="metrics report over a manifest split", epilog=epilog, formatter_class=fmt)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--ckpt")
    g.add_argument("--direct", action="store_true")
    s.add_argument("--diffeo", action="store_true")
    s.add_argument("--config")
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", help="finite-difference audit of all ops and the network")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--shapes", type=int, default=10, help="random instances per op")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="correlation / warp kernel timings as JSON")
    s.add_argument("--radii", default="1,3,5")
    s.add_argument("--dims", type=int, default=32)
    s.add_argument("--channels", type=int, default=16)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ContractError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main_entry():  # pragma: no cover - console script shim
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_entry()
