"""``umm`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, load_config
from .data.umtf import read_umtf, write_umtf
from .errors import ConfigError, DataError, IngestionError, NumericError, UmmError


def _config(args, **extra) -> Config:
    overrides = {"seed": args.seed, "out": args.out, **extra}
    if args.config:
        return load_config(args.config, **overrides)
    return Config.from_dict({k: v for k, v in overrides.items() if v is not None})


def _write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def cmd_synth(args) -> int:
    from .data.synth import synth_dataset

    cfg = _config(args)
    out = args.out or "data"
    m = synth_dataset(cfg.seed, args.classes, cfg.modalities, args.n_train, args.n_test, args.anomaly_frac,
                      out, cfg.image_size, args.task_id, args.first_class)
    print(m.root / "manifest.json")
    return 0


def cmd_train(args) -> int:
    from .trainer import train

    extra = {"data": ",".join(args.data) if args.data else None, "epochs": args.epochs}
    print(train(_config(args, **extra)))
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .trainer import evaluate, load_manifests

    model, _, _ = load_checkpoint(args.model)
    data = args.data or list(model.cfg.data)
    if not data:
        raise ConfigError("no evaluation manifests given (--data)")
    out = Path(args.out) if args.out else Path(args.model).parent / "report.json"
    if out.suffix != ".json":
        out = out / "report.json"
    report = evaluate(model, load_manifests(data), out, cache=not args.no_cache, oracle=args.oracle,
                      priors_dir=model.cfg.priors_dir)
    print(json.dumps(report["mean"], sort_keys=True))
    return 0


def read_sample_dir(path, modalities) -> dict[str, np.ndarray]:
    """Modality tensors from ``<dir>/<modality>.umtf`` or ``<dir>/*.<modality>.umtf``."""
    path = Path(path)
    if not path.is_dir():
        raise IngestionError(f"sample directory not found: {path}")
    bundle = {}
    for name, _ in modalities:
        hits = [path / f"{name}.umtf"] if (path / f"{name}.umtf").exists() else sorted(path.glob(f"*.{name}.umtf"))
        if len(hits) > 1:
            raise DataError(f"{path}: several files for modality {name!r}")
        if hits:
            arr = read_umtf(hits[0])
            bundle[name] = arr if arr.ndim == 4 else arr[None]
    if not bundle:
        raise IngestionError(f"{path}: no modality files found")
    return bundle


def cmd_infer(args) -> int:
    from .checkpoint import load_checkpoint

    model, _, _ = load_checkpoint(args.model)
    bundle = read_sample_dir(args.sample, model.cfg.modalities)
    model.eval()
    s_al, s_ad = model.infer(bundle)
    write_umtf(args.out, s_al)
    print(repr(float(np.atleast_1d(s_ad)[0])))
    return 0


def cmd_continue(args) -> int:
    from .trainer import continue_train, load_manifests

    extra = {"replay_frac": args.replay_frac, "epochs": args.epochs}
    cfg = _config(args, **extra) if args.config else None
    if cfg is None:
        from .checkpoint import read_index

        stored = read_index(args.model)["config"]
        stored.update({k: v for k, v in {"seed": args.seed, "out": args.out, **extra}.items() if v is not None})
        cfg = Config.from_dict(stored)
    previous = args.replay if args.replay is not None else list(cfg.data)
    path, report = continue_train(args.model, load_manifests(args.data), load_manifests(previous), cfg)
    print(json.dumps(report, sort_keys=True))
    print(path)
    return 0


def cmd_bench(args) -> int:
    from .bench import bench

    report = bench(_config(args), iters=args.iters, warmup=args.warmup)
    out = Path(args.out or ".") / "bench.json"
    _write_json(out, report)
    print(json.dumps({"ratio_3x3": report["parameter_counts"]["default_3x3"]["ratio"],
                      "grouped_vs_serial": report["grouped_vs_serial"]["max_abs_deviation"],
                      "cache": report["cache"]}, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    from .modelcheck import model_gradcheck

    report = model_gradcheck(seed=args.seed or 0)
    worst = max(report.values())
    for group, err in report.items():
        print(f"{group:16s} {err:.3e} {'ok' if err <= args.tol else 'FAIL'}")
    if args.out:
        _write_json(Path(args.out) / "gradcheck.json", report)
    if worst > args.tol:
        raise NumericError(f"gradient check failed: worst relative error {worst:.3e} > {args.tol:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="umm", description="Unified multi-modal anomaly detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.set_defaults(fn=fn)
        return p

    p = add("synth", cmd_synth, "generate a synthetic task")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--n-train", type=int, default=30)
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--anomaly-frac", type=float, default=0.5)
    p.add_argument("--task-id", default="synth")
    p.add_argument("--first-class", type=int, default=0)

    p = add("train", cmd_train, "train from scratch")
    p.add_argument("--data", nargs="+", help="task manifests")
    p.add_argument("--epochs", type=int)

    p = add("eval", cmd_eval, "evaluate a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", nargs="+")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--oracle", action="store_true", help="decode priors exactly (sanity mode)")

    p = add("infer", cmd_infer, "score one sample")
    p.add_argument("--model", required=True)
    p.add_argument("--sample", required=True)
    p.set_defaults(out=None)

    p = add("continue", cmd_continue, "continual fine-tuning on a new task")
    p.add_argument("--model", required=True)
    p.add_argument("--data", nargs="+", required=True, help="new task manifests")
    p.add_argument("--replay", nargs="*", help="previous task manifests")
    p.add_argument("--replay-frac", type=float)
    p.add_argument("--epochs", type=int)

    p = add("bench", cmd_bench, "parameter counts, equivalence and timings")
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of all parameter groups")
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "infer" and not args.out:
        parser.error("infer requires --out")
    try:
        return args.fn(args)
    except UmmError as exc:
        print(f"umm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"umm {args.command}: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"umm {args.command}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
