"""Command-line interface exposing the pipeline end to end.

Every subcommand prints a one-line JSON provenance summary (command, input
digests, output paths, seed) to stdout.  Exit codes: 0 success, 1 usage
error, 2 data/format error, 3 numeric error.  Randomized commands require an
explicit seed; there is no wall-clock default.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import scenegen, tasks, train
from .core import (
    ConfigError,
    DataError,
    MaskStack,
    NumericError,
    PhotonModel,
    ToolkitError,
    VideoCube,
    derive_stream,
    digest_path,
    tensor_read,
    tensor_write,
)
from .egcodec import EgConfig, egcr_detail
from .masks import gen_submask, tile_mask
from .nnet import ModelConfig, build_model, load_checkpoint
from .sensor import apply_noise, calibrate_alpha, integrate, measure_clean, modulate, save_measurement


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _summary(command: str, inputs: dict, outputs: dict, seed) -> None:
    line = {
        "command": command,
        "inputs": {k: digest_path(v) for k, v in inputs.items() if v is not None},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "seed": seed,
    }
    print(json.dumps(line))


def _build_parser() -> _Parser:
    parser = _Parser(prog="snapsci", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("scenegen", help="generate a synthetic scene dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("maskgen", help="generate a tiled binary modulation mask")
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="simulate one compressive measurement")
    p.add_argument("--cube")
    p.add_argument("--frames")
    p.add_argument("--mask", required=True)
    p.add_argument("--apc", type=float)
    p.add_argument("--sigma", type=float, default=0.01)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clean-out")

    p = sub.add_parser("pretrain", help="pre-train the reconstruction autoencoder")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("finetune", help="fine-tune decoder+head on a task")
    p.add_argument("--task", choices=("edge", "depth"), required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--task", choices=("recon", "edge", "depth"), required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--apc", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--report", required=True)

    p = sub.add_parser("egcr", help="parameter compactness of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--order", type=int, default=0)
    p.add_argument("--bits", type=int, default=16)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("report", help="render figures and CSV from logs/reports")
    p.add_argument("--log")
    p.add_argument("--metrics", action="append", default=[])
    p.add_argument("--out", required=True)

    return parser


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_scenegen(args) -> int:
    raw = train.read_kv_file(args.config)
    n_scenes = int(raw.pop("n_scenes", "1"))
    kv = {}
    casts = {
        "t": int, "h": int, "w": int, "seed": int, "min_objects": int,
        "max_objects": int, "min_size": int, "max_size": int,
        "min_speed": float, "max_speed": float, "background": float,
        "shapes": lambda s: tuple(x.strip() for x in s.split(",")),
        "depth_min": float, "depth_max": float,
    }
    for key, value in raw.items():
        if key not in casts:
            raise ConfigError(f"unknown scene config key {key!r} in {args.config}")
        kv[key] = casts[key](value)
    dmin = kv.pop("depth_min", 1.0)
    dmax = kv.pop("depth_max", 80.0)
    kv["depth_range"] = (dmin, dmax)
    kv["seed"] = args.seed
    cfg = scenegen.SceneConfig(**kv)
    scenes = scenegen.gen_dataset(cfg, n_scenes)
    echo = {k: getattr(cfg, k) for k in
            ("t", "h", "w", "seed", "min_objects", "max_objects", "min_size",
             "max_size", "min_speed", "max_speed", "background")}
    echo["shapes"] = ",".join(cfg.shapes)
    scenegen.save_dataset(args.out, scenes, echo)
    _summary("scenegen", {"config": args.config}, {"dataset": args.out}, args.seed)
    return 0


def _cmd_maskgen(args) -> int:
    sub = gen_submask(args.t, args.size, args.rho, derive_stream(args.seed, "mask"))
    mask = tile_mask(sub, args.height, args.width)
    tensor_write(args.out, mask.data)
    _summary("maskgen", {}, {"mask": args.out}, args.seed)
    return 0


def _load_cube(args) -> VideoCube:
    if (args.cube is None) == (args.frames is None):
        raise UsageError("simulate needs exactly one of --cube or --frames")
    if args.cube is not None:
        return VideoCube(data=tensor_read(args.cube))
    return scenegen.ingest_frames(args.frames)


def _cmd_simulate(args) -> int:
    cube = _load_cube(args)
    mask = MaskStack(data=tensor_read(args.mask))
    if cube.shape != mask.shape:
        raise DataError(
            f"cube shape {cube.shape} does not match mask shape {mask.shape}"
        )
    if args.apc is not None:
        alpha = calibrate_alpha(cube, mask, args.apc)
        photon = PhotonModel(apc=args.apc, alpha=alpha, sigma=args.sigma)
        meas = apply_noise(cube, mask, photon, derive_stream(args.seed, "noise"))
    else:
        meas = measure_clean(cube, mask, seed=args.seed)
    save_measurement(args.out, meas)
    outputs = {"measurement": args.out}
    if args.clean_out:
        tensor_write(args.clean_out, integrate(modulate(cube, mask)))
        outputs["clean"] = args.clean_out
    inputs = {"mask": args.mask}
    if args.cube:
        inputs["cube"] = args.cube
    else:
        inputs["frames"] = args.frames
    _summary("simulate", inputs, outputs, args.seed)
    return 0


def _model_config(model_kv: dict, tcfg: train.TrainConfig, data, head: str) -> ModelConfig:
    _, h, w = data[0].video.shape
    return ModelConfig(
        cr=tcfg.cr, height=h, width=w, head_kind=head, **model_kv
    )


def _cmd_pretrain(args) -> int:
    tcfg, model_kv = train.parse_run_config(args.config)
    data = scenegen.load_dataset(args.data)
    cfg = _model_config(model_kv, tcfg, data, "reconstruction")
    model = build_model(cfg, derive_stream(tcfg.seed, "init"))
    train.run_training(data, model, tcfg, out_dir=args.out)
    _summary(
        "pretrain",
        {"config": args.config, "data": args.data},
        {"out": args.out, "final": str(Path(args.out) / "final.cdp")},
        tcfg.seed,
    )
    return 0


def _cmd_finetune(args) -> int:
    tcfg, model_kv = train.parse_run_config(args.config)
    if model_kv:
        raise ConfigError(
            "fine-tuning inherits the checkpoint architecture; remove model keys "
            f"{sorted(model_kv)} from {args.config}"
        )
    data = scenegen.load_dataset(args.data)
    tasks.finetune(args.ckpt, args.task, data, tcfg, out_dir=args.out)
    _summary(
        "finetune",
        {"config": args.config, "data": args.data, "ckpt": args.ckpt},
        {"out": args.out, "final": str(Path(args.out) / "final.cdp")},
        tcfg.seed,
    )
    return 0


_EVAL_TASK_TO_HEAD = {"recon": "reconstruction", "edge": "edge", "depth": "depth"}


def _cmd_eval(args) -> int:
    model, extra, _ = load_checkpoint(args.ckpt)
    expected = _EVAL_TASK_TO_HEAD[args.task]
    if model.config.head_kind != expected:
        raise ConfigError(
            f"checkpoint head is {model.config.head_kind!r}, asked to eval {expected!r}"
        )
    scenes = scenegen.load_dataset(args.data)
    t = scenes[0].video.shape[0]
    rho = float(extra.get("train_config", {}).get("rho", 0.5))
    mask_m = int(extra.get("train_config", {}).get("mask_m", 8))
    sigma = float(extra.get("train_config", {}).get("sigma", 0.01))
    sub = gen_submask(t, mask_m, rho, derive_stream(args.seed, "eval-mask"))
    mask = tile_mask(sub, model.config.height, model.config.width)
    report = tasks.evaluate_model(
        model, scenes, mask, args.apc, sigma, args.seed,
        provenance={
            "checkpoint": digest_path(args.ckpt),
            "dataset": digest_path(args.data),
        },
    )
    Path(args.report).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    _summary(
        "eval",
        {"ckpt": args.ckpt, "data": args.data},
        {"report": args.report},
        args.seed,
    )
    return 0


def _cmd_egcr(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    detail = egcr_detail(
        model.params.tensors, EgConfig(order=args.order, baseline_bits=args.bits)
    )
    print(json.dumps(detail))
    _summary("egcr", {"ckpt": args.ckpt}, {}, None)
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    result = run_gradcheck(seed=args.seed)
    print(json.dumps(result))
    _summary("gradcheck", {}, {}, args.seed)
    if not result["passed"]:
        raise NumericError(
            f"gradient check failed: max relative error {result['max_rel_error']}"
        )
    return 0


def _cmd_report(args) -> int:
    from . import report as report_mod

    if not args.log and not args.metrics:
        raise UsageError("report needs --log and/or --metrics")
    written = []
    if args.log:
        written += report_mod.render_training_report(args.log, args.out)
    if args.metrics:
        written += report_mod.render_metrics_report(args.metrics, args.out)
    inputs = {}
    if args.log:
        inputs["log"] = args.log
    for i, m in enumerate(args.metrics):
        inputs[f"metrics{i}"] = m
    _summary("report", inputs, {f"file{i}": p for i, p in enumerate(written)}, None)
    return 0


_COMMANDS = {
    "scenegen": _cmd_scenegen,
    "maskgen": _cmd_maskgen,
    "simulate": _cmd_simulate,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "egcr": _cmd_egcr,
    "gradcheck": _cmd_gradcheck,
    "report": _cmd_report,
}


def dispatch(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        return _COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except ToolkitError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    except FileNotFoundError as err:
        print(f"error: missing file {err.filename}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())
