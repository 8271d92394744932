"""
Command-line entry point of the detection bench.

Usage: ``python -m app.cli <command> [options]``. Every command reads the
run configuration (``--config``, ``--profile``, ``--set key=value``) and
writes under ``--out`` or ``settings.output_dir`` (``LFFN_OUTPUT_DIR``).

Errors print one line ``error=<CODE> message="..."`` to stderr and exit with
2 (configuration), 3 (data) or 4 (numeric).
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch
from pydantic import ValidationError

from app.core.config import dump_run_config, load_run_config, parse_value, settings
from app.core.errors import ConfigurationError, InternalError, LffnError, NumericError
from app.core.storage import atomic_write_text
from app.kernels.tensor import load_tensor
from app.schemas.config import AblationMode, ApMethod, NmsMode, RetentionRule, RunConfig
from app.services.ablation import ablate
from app.services.annotations import read_ground_truths, read_predictions, write_predictions
from app.services.checkpoint import load_checkpoint
from app.services.dataset import gen_synthetic, load_dataset, save_dataset
from app.services.detection import DetectionService
from app.services.diagnostics import CHECKS, run_gradcheck_suite
from app.services.evalkit import evaluate, write_pr_csv
from app.services.modelspec import count_cost, resolve_spec
from app.services.nms import batched_nms
from app.services.trainer import train_toy

logger = logging.getLogger("app.cli")

CONFIG_EXIT_CODE = 2


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    values: Dict[str, object] = {}
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"--set expects key=value, got '{item}'")
        values[key.strip()] = parse_value(raw.strip())
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "mode", None):
        values["mode"] = args.mode
    return values


def _run_config(args: argparse.Namespace) -> RunConfig:
    path = args.config
    if path is None and settings.config_path.exists():
        path = settings.config_path
    return load_run_config(path, args.profile, _overrides(args))


def _output_dir(args: argparse.Namespace, default: str) -> Path:
    return Path(args.out) if args.out else settings.output_dir / default


def _write_json(path: Path, payload: str) -> Path:
    return atomic_write_text(path, payload + "\n")


def _nms_config(config: RunConfig, args: argparse.Namespace):
    update = {}
    if args.nms_mode:
        update["mode"] = NmsMode(args.nms_mode)
    if args.nms_threshold is not None:
        update["threshold"] = args.nms_threshold
    if args.nms_seed is not None:
        update["seed"] = args.nms_seed
    if args.retention_rule:
        update["retention_rule"] = RetentionRule(args.retention_rule)
    return config.nms.model_copy(update=update)


def cmd_gen(args: argparse.Namespace) -> int:
    config = _run_config(args)
    out = _output_dir(args, "data")
    for split in args.splits:
        dataset = gen_synthetic(config.dataset, config.seed, split)
        images, gts = save_dataset(dataset, out)
        print(f"{split}: {len(dataset)} images -> {images}, {len(dataset.ground_truths)} boxes -> {gts}")
    dump_run_config(config, out / "run.cfg")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _run_config(args)
    torch.set_num_threads(settings.num_threads)
    data = Path(args.data) if args.data else settings.output_dir / "data"
    dataset = load_dataset(data, "train")
    out = _output_dir(args, f"train_{config.mode.value.replace('+', '_')}")
    result = train_toy(config, dataset, out, iterations=args.iterations, resume=args.resume)
    smoothed = result.smoothed(config.training.smoothing_window)
    if smoothed:
        print(f"smoothed loss {smoothed[0]:.4f} -> {smoothed[-1]:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss log: {result.log_path}")
    return 0


def cmd_detect(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    detector = checkpoint.to_detector()
    if args.images:
        images = load_tensor(args.images)
    else:
        data = Path(args.data) if args.data else settings.output_dir / "data"
        images = load_dataset(data, args.split).images
    nms = _nms_config(checkpoint.config, args)
    dets = DetectionService.detect_in_chunks(detector, images, nms)
    out = Path(args.out) if args.out else settings.output_dir / "predictions.txt"
    write_predictions(dets, out)
    print(f"{len(dets)} detections on {images.shape[0]} images -> {out}")
    return 0


def cmd_nms(args: argparse.Namespace) -> int:
    config = _run_config(args)
    nms = _nms_config(config, args)
    dets = read_predictions(args.predictions)
    kept = batched_nms(dets, nms)
    out = Path(args.out) if args.out else settings.output_dir / "predictions_nms.txt"
    write_predictions(kept, out)
    print(f"{len(dets)} -> {len(kept)} detections ({nms.mode.value}, N_t={nms.threshold}) -> {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _run_config(args)
    update = {}
    if args.iou is not None:
        update["iou_threshold"] = args.iou
    if args.ap_method:
        update["ap_method"] = ApMethod(args.ap_method)
    eval_config = config.eval.model_copy(update=update)
    report = evaluate(read_predictions(args.predictions), read_ground_truths(args.gt), eval_config)
    out = _output_dir(args, "eval")
    _write_json(out / "eval_report.json", report.model_dump_json(indent=2))
    write_pr_csv(report, out / "pr_curve.csv")
    for class_id, ap in sorted(report.per_class_ap.items()):
        print(f"class {class_id}: AP {ap:.4f}")
    print(f"mAP {report.mean_ap:.4f}")
    return 0


def cmd_cost(args: argparse.Namespace) -> int:
    config = _run_config(args)
    spec = resolve_spec(args.spec, config.backbone)
    shape: Optional[List[int]] = None
    if args.input_shape:
        try:
            shape = [int(d) for d in args.input_shape.split(",")]
        except ValueError:
            raise ConfigurationError(
                f"--input expects S, C,H,W or N,C,H,W integers, got '{args.input_shape}'"
            ) from None
        if len(shape) == 1:
            shape = [1, spec.input_shape[0], shape[0], shape[0]]
        elif len(shape) == 3:
            shape = [1, *shape]
        if len(shape) != 4:
            raise ConfigurationError(f"--input expects 1, 3 or 4 dimensions, got {len(shape)}")
    report = count_cost(spec, shape)
    if args.out:
        _write_json(Path(args.out), report.model_dump_json(indent=2))
    for stage in report.stages:
        print(f"{stage.stage:>12}  MACs {stage.macs:>14,}  params {stage.params:>12,}")
    print(f"{report.name}: {report.gflops:.3f} GFLOPs, {report.params / 1e6:.2f}M params")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else 0
    reports = run_gradcheck_suite(seed, args.checks)
    for report in reports:
        status = "PASS" if report.passed else "FAIL"
        print(
            f"{report.op_name:<34} {status}  max_rel_err={report.max_relative_error:.3e}  "
            f"max_abs_err={report.max_absolute_error:.3e}"
        )
    if args.out:
        payload = json.dumps([r.model_dump(mode="json") for r in reports], indent=2)
        _write_json(Path(args.out), payload)
    failed = [r.op_name for r in reports if not r.passed]
    if failed:
        raise NumericError(f"gradient check failed for {failed}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _run_config(args)
    torch.set_num_threads(settings.num_threads)
    modes = [AblationMode(m) for m in args.modes] if args.modes else None
    out = _output_dir(args, "ablation")
    summary = ablate(config, out, iterations=args.iterations, modes=modes)
    for row in summary.rows:
        print(f"{row.mode:<16} mAP {row.mean_ap:.4f}  loss {row.initial_loss:.4f} -> {row.final_loss:.4f}")
    print(f"report: {out / 'ablation.csv'}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("app.main:app", host=args.host or settings.host, port=args.port or settings.port, log_level="info")
    return 0


def _add_config_args(parser: argparse.ArgumentParser, run_seed: bool = True) -> None:
    parser.add_argument("--config", type=Path, help="Run configuration file (default: settings.config_path)")
    parser.add_argument("--profile", help="Apply a [profile:<name>] section")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="Dotted-key override, e.g. training.iterations=50")
    if run_seed:
        parser.add_argument("--seed", type=int, help="Override the run seed")


def _add_nms_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mode", "--nms-mode", dest="nms_mode", choices=[m.value for m in NmsMode])
    parser.add_argument("--nt", "--nms-threshold", dest="nms_threshold", type=float, help="Overlap threshold N_t")
    parser.add_argument("--seed", "--nms-seed", dest="nms_seed", type=int, help="Seed of the stochastic retention draws")
    parser.add_argument("--retention-rule", choices=[r.value for r in RetentionRule])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lffn-bench", description=settings.app_description)
    sub = parser.add_subparsers(dest="command", required=True)
    modes = [m.value for m in AblationMode]

    p = sub.add_parser("gen", help="Generate the synthetic dataset")
    _add_config_args(p)
    p.add_argument("--splits", nargs="+", default=["train", "test"], choices=["train", "test"])
    p.add_argument("--out", help="Output directory")
    p.set_defaults(handler=cmd_gen)

    p = sub.add_parser("train", help="Train the toy detector")
    _add_config_args(p)
    p.add_argument("--mode", choices=modes)
    p.add_argument("--data", help="Dataset directory written by gen")
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume", type=Path, help="Checkpoint to continue from")
    p.add_argument("--out", help="Output directory")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("detect", help="Run a checkpoint on images")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--images", type=Path, help="LFFT image tensor (N, 3, H, W)")
    p.add_argument("--data", help="Dataset directory (used when --images is absent)")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--out", help="Prediction file")
    _add_nms_args(p)
    p.set_defaults(handler=cmd_detect)

    p = sub.add_parser("nms", help="Apply NMS to a prediction file")
    _add_config_args(p, run_seed=False)
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--out", help="Output prediction file")
    _add_nms_args(p)
    p.set_defaults(handler=cmd_nms)

    p = sub.add_parser("eval", help="Evaluate predictions against ground truth")
    _add_config_args(p)
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--iou", type=float)
    p.add_argument("--ap-method", choices=[m.value for m in ApMethod])
    p.add_argument("--out", help="Report directory")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("cost", help="Analytical MACs and parameters of a spec")
    _add_config_args(p)
    p.add_argument("--spec", default="resnet50", help="resnet50, se_resnext50, toy or a JSON spec file")
    p.add_argument(
        "--input", "--input-shape", dest="input_shape",
        help="Square side S (batch 1, spec channels), C,H,W or N,C,H,W",
    )
    p.add_argument("--out", help="Write the CostReport JSON here")
    p.set_defaults(handler=cmd_cost)

    p = sub.add_parser("gradcheck", help="Run the gradient-check suite")
    p.add_argument("--checks", nargs="+", choices=sorted(CHECKS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="Write the reports as JSON here")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("ablate", help="Compare the architecture modes")
    _add_config_args(p)
    p.add_argument("--modes", nargs="+", choices=modes)
    p.add_argument("--iterations", type=int)
    p.add_argument("--out", help="Output directory")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("serve", help="Start the HTTP API")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=settings.log_level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except LffnError as e:
        logger.error(f"{args.command} failed: {e.message}")
        print(e.one_line(), file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        error = ConfigurationError(f"invalid configuration: {e.errors()[0]['loc']} {e.errors()[0]['msg']}")
        print(error.one_line(), file=sys.stderr)
        return CONFIG_EXIT_CODE
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly")
        error = InternalError(f"{type(e).__name__}: {e}")
        print(error.one_line(), file=sys.stderr)
        return error.exit_code


if __name__ == "__main__":
    sys.exit(main())
