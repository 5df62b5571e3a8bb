"""Command-line entry point: prepare, train, eval, ablate, gradcheck.

Exit codes: 0 success, 1 other runtime failure, 2 configuration or
precondition error, 3 numeric failure, 4 failed check (ordering or
gradient tolerance). Failures print one JSON error record to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path


from . import checkpoint
from .checkpoint import atomic_write_bytes
from .config import ConfigError, DataSource, RunConfig, load_config
from .data.io import DataError, load_dataset_dir, png_bytes
from .data.prepare import PreparedDataset, load_prepared, prepare_samples, write_prepared
from .data.synthetic import synth_generate
from .gradcheck import format_report, run_gradcheck
from .metrics import ConfusionMatrix, error_map
from .networks import NetworkSpec, SpecError, build_network
from .train import (CHECKPOINT_NAME, SPEC_NAME, UNIMODAL_VARIANTS, InitError, NumericError, PlanError,
                    predict, train)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3, 4


class PreconditionError(ValueError):
    pass


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def _out_dir(cfg: RunConfig) -> Path:
    if cfg.out is None:
        raise ConfigError("no output directory: set 'out' in the config or pass --out")
    return Path(cfg.out)


def load_source(src: DataSource) -> PreparedDataset:
    if src.synthetic is not None:
        return prepare_samples(synth_generate(src.synthetic))
    if src.raw is not None:
        return prepare_samples(load_dataset_dir(src.raw))
    return load_prepared(src.prepared)


def _require_data(cfg: RunConfig) -> None:
    if cfg.data is None:
        raise ConfigError("config has no data section")
    for src in (cfg.data.train, cfg.data.eval):
        if src is None:
            continue
        path = src.raw or src.prepared
        if path is not None and not Path(path).is_dir():
            raise PreconditionError(f"dataset directory does not exist: {path}")


# -- commands -----------------------------------------------------------------

def cmd_prepare(cfg: RunConfig, args) -> int:
    _require_data(cfg)
    src = cfg.data.train
    if src.prepared is not None:
        raise ConfigError("prepare needs a synthetic or raw data source")
    out = _out_dir(cfg)
    samples = synth_generate(src.synthetic) if src.synthetic is not None else load_dataset_dir(src.raw)
    manifest = write_prepared(out, samples, src.describe())
    print(f"prepared {manifest['count']} samples in {out}")
    return EXIT_OK


def _train_spec(cfg: RunConfig, args):
    spec, plan = cfg.network, cfg.train
    if args.stage is not None:
        plan = type(plan).from_dict({**plan.to_dict(), "stage": args.stage})
    if args.iterations is not None:
        plan = type(plan).from_dict({**plan.to_dict(), "iterations": args.iterations})
    if plan.stage == "unimodal":
        modality = args.modality or (spec.variant.split("_")[1] if spec.variant in UNIMODAL_VARIANTS else None)
        if modality is None:
            raise ConfigError("unimodal training needs --modality or a unimodal network variant")
        spec = spec.replace(variant=f"unimodal_{modality}", rfb_start_stage=None)
    elif args.modality is not None:
        raise ConfigError("--modality only applies to the unimodal stage")
    if plan.stage == "multimodal":
        if args.from_scratch:
            plan = type(plan).from_dict({**plan.to_dict(), "init_from": None})
        elif not plan.init_from:
            raise PreconditionError("multimodal training needs train.init_from {rgb, depth} "
                                    "checkpoints, or --from-scratch")
    for path in (plan.init_from or {}).values():
        if not Path(path).is_file():
            raise PreconditionError(f"init checkpoint not found: {path}")
    plan.validate(spec)
    return spec, plan


def cmd_train(cfg: RunConfig, args) -> int:
    _require_data(cfg)
    spec, plan = _train_spec(cfg, args)
    out = _out_dir(cfg)
    ds = load_source(cfg.data.train)
    result = train(plan, spec, ds, out_dir=out, dtype=cfg.dtype)
    print(f"trained {plan.iterations} iterations; train mIoU {result.final['miou']:.4f}, "
          f"pixel accuracy {result.final['pixel_accuracy']:.4f}; checkpoint {out / CHECKPOINT_NAME}")
    return EXIT_OK


def _load_model(spec, path):
    net = build_network(spec, 0)
    try:
        state = checkpoint.load(path)
    except FileNotFoundError:
        raise PreconditionError(f"checkpoint not found: {path}") from None
    try:
        net.load_state_dict(state)
    except ValueError as exc:
        raise PreconditionError(f"checkpoint {path} does not match the network: {exc}") from exc
    return net


def _spec_beside(path, default):
    sidecar = Path(path).parent / SPEC_NAME
    if sidecar.is_file():
        return NetworkSpec.from_dict(json.loads(sidecar.read_text()))
    return default


def cmd_eval(cfg: RunConfig, args) -> int:
    _require_data(cfg)
    if args.checkpoint is None:
        raise ConfigError("eval needs --checkpoint")
    out = _out_dir(cfg)
    spec = _spec_beside(args.checkpoint, cfg.network)
    net = _load_model(spec, args.checkpoint)
    other = None
    if args.compare is not None:
        other = _load_model(_spec_beside(args.compare, cfg.network), args.compare)
    ds = load_source(cfg.data.eval or cfg.data.train)
    pred = predict(net, ds, dtype=cfg.dtype)
    cm = ConfusionMatrix(spec.num_classes).update(pred, ds.label)
    summary = cm.summary()
    os.makedirs(out, exist_ok=True)
    atomic_write_bytes(out / "eval.json", _json_bytes({"checkpoint": str(args.checkpoint), **summary}))
    lines = ["class\tiou"] + [f"{k}\t{'' if v is None else f'{v:.6f}'}" for k, v in enumerate(summary["iou"])]
    lines.append(f"mean\t{summary['miou']:.6f}")
    atomic_write_bytes(out / "iou.tsv", ("\n".join(lines) + "\n").encode())
    if other is not None:
        pred_other = predict(other, ds, dtype=cfg.dtype)
        os.makedirs(out / "error_maps", exist_ok=True)
        for name, pa, pb, gt in zip(ds.names, pred_other, pred, ds.label):
            atomic_write_bytes(out / "error_maps" / f"{name}.png", png_bytes(error_map(pa, pb, gt)))
    print(f"mIoU {summary['miou']:.4f}, pixel accuracy {summary['pixel_accuracy']:.4f}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    from .ablation import ablate
    _require_data(cfg)
    suite = cfg.suite()
    out = _out_dir(cfg)
    train_set = load_source(cfg.data.train)
    eval_set = load_source(cfg.data.eval) if cfg.data.eval is not None else train_set
    report = ablate(suite, train_set, eval_set, dtype=cfg.dtype,
                    progress=lambda n, s, m: print(f"{n} seed={s} mIoU={m:.4f}", flush=True))
    os.makedirs(out, exist_ok=True)
    atomic_write_bytes(out / "ablation.tsv", report.table().encode())
    ordering_lines = [o.line() for o in report.orderings]
    atomic_write_bytes(out / "orderings.txt", ("\n".join(ordering_lines) + "\n").encode())
    atomic_write_bytes(out / "ablation.json", _json_bytes({
        "cells": {n: {"mean": s.mean, "std": s.std, "n": s.n, "mious": s.mious} for n, s in report.stats.items()},
        "orderings": [{"ordering": o.ordering.describe(), "compared_to": o.compared_to, "gap": o.gap,
                       "pooled_se": o.pooled_se, "passed": o.passed} for o in report.orderings],
        "failures": report.failures, "aliases": report.aliases}))
    print(report.summary())
    if report.failures:
        return EXIT_RUNTIME
    return EXIT_OK if report.all_passed else EXIT_CHECK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    if cfg.precision != "f64":
        raise ConfigError("gradcheck runs in f64 only")
    seeds = range(cfg.seed, cfg.seed + cfg.gradcheck.get("seeds", 20))
    reports = run_gradcheck(seeds)
    text = format_report(reports)
    print(text)
    if cfg.out is not None:
        out = Path(cfg.out)
        os.makedirs(out, exist_ok=True)
        atomic_write_bytes(out / "gradcheck.json", _json_bytes([r.as_dict() for r in reports]))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--precision", choices=("f32", "f64"), help="floating-point precision")
    common.add_argument("--out", help="output directory")
    parser = argparse.ArgumentParser(prog="rgbd-fusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="materialise a prepared dataset")
    p = sub.add_parser("train", parents=[common], help="train one stage")
    p.add_argument("--stage", choices=("unimodal", "multimodal", "finetune"))
    p.add_argument("--modality", choices=("rgb", "depth"))
    p.add_argument("--from-scratch", action="store_true", help="multimodal stage without unimodal init")
    p.add_argument("--iterations", type=int)
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--compare", help="second checkpoint; emits error maps against it")
    sub.add_parser("ablate", parents=[common], help="run an ablation suite")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    return parser


def _fail(code: int, exc: BaseException, **extra) -> int:
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code, **extra}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, {"seed": args.seed, "precision": args.precision, "out": args.out})
        if args.command == "ablate":
            cfg.suite()
        if args.command in ("prepare", "train", "eval", "ablate"):
            _out_dir(cfg)
        return COMMANDS[args.command](cfg, args)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, exc, **exc.as_dict())
    except (ConfigError, SpecError, PlanError, PreconditionError, InitError) as exc:
        return _fail(EXIT_CONFIG, exc)
    except DataError as exc:
        return _fail(EXIT_RUNTIME, exc, path=exc.path)
    except FloatingPointError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except Exception as exc:  # noqa: BLE001 - every failure gets a structured record
        return _fail(EXIT_RUNTIME, exc)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
