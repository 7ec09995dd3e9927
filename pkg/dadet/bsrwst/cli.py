"""Command-line entry point: ``dadet-bsrwst <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error,
3 numerical divergence. Failures print one JSON line on stderr.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .config import MODES, PRESETS, TrainConfig, apply_overrides, preset
from .data import PALETTES, SPLITS, DomainShiftConfig, generate_domain_pair, load_unlabeled_split, read_manifest
from .detector import images_to_tensor, load_checkpoint, predict
from .errors import ConfigError, DadetError
from .evalreport import AP_STYLES, plot_bsr_shape, plot_trends, write_results_table
from .pseudolabel import SrrsPolicy, pseudo_labels_from_prediction
from .trainloop import CONFIG_SNAPSHOT, ablation_suite, evaluate_split, sweep, train
from .version import __version__

log = logging.getLogger("dadet.cli")

OUTPUT_ROOT_ENV = "DADET_OUTPUT_ROOT"
ARGS_SNAPSHOT = "resolved_args.json"
SWEEP_DEFAULTS = {
    "gamma": (0.0, 1.0, 2.0, 4.0, 5.0),
    "t": (0.25, 0.33, 0.5, 0.67, 0.75),
    "epsilon": (0.6, 0.7, 0.8, 0.9),
}


class UsageError(ConfigError):
    kind = "usage"


def _default_out(name: str) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / name


def _write_args(out_dir: Path, args) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    values = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in ("func", "out")}
    path = out_dir / ARGS_SNAPSHOT
    path.write_text(json.dumps(values, indent=2, sort_keys=True) + "\n")
    return path


def _parse_set(items):
    overrides = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    return overrides


def resolve_config(args, mode_default=None) -> TrainConfig:
    """defaults < preset < config file < dedicated flags < ``--set``."""
    config = TrainConfig()
    if args.preset:
        config = preset(args.preset, config)
    if args.config:
        config = TrainConfig.from_file(args.config, base=config)
    flags = {}
    if getattr(args, "mode", None):
        flags["mode"] = args.mode
    elif mode_default and config.mode == "source_only":
        flags["mode"] = mode_default
    if args.seed is not None:
        flags["seed"] = args.seed
        flags["detector.seed"] = args.seed
    if args.data:
        flags["data.root"] = str(args.data)
    if args.init_checkpoint:
        flags["init_checkpoint"] = str(args.init_checkpoint)
    if args.ap_style:
        flags["eval.ap_style"] = args.ap_style
    config = apply_overrides(config, flags)
    return apply_overrides(config, _parse_set(args.set)).validate()


# subcommands -----------------------------------------------------------


def cmd_generate_data(args) -> int:
    out = Path(args.out) if args.out else _default_out("data")
    shift = DomainShiftConfig()
    if args.no_shift:
        shift = DomainShiftConfig(target=dataclasses.replace(shift.source))
    elif args.target_palette:
        shift = DomainShiftConfig(target=dataclasses.replace(shift.target, palette=args.target_palette))
    manifest = generate_domain_pair(
        out,
        seed=args.seed,
        counts=tuple(args.counts),
        shift=shift,
        shared_target_split=args.shared_target_split,
        jobs=args.jobs,
    )
    _write_args(out, args)
    log.info(f"Dataset with counts {manifest['counts']} written to {out}")
    return 0


def cmd_train(args) -> int:
    config = resolve_config(args)
    out = Path(args.out) if args.out else _default_out(config.mode)
    result = train(config, out)
    _write_args(out, args)
    final = result.final_eval
    log.info(f"Final target mAP {None if final is None else final.map}, checkpoint {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    config = resolve_config(args)
    model = load_checkpoint(args.checkpoint)
    root = Path(config.data.root)
    result = evaluate_split(model, root, args.split, config.eval)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    config.to_file(out / CONFIG_SNAPSHOT)
    _write_args(out, args)
    (out / "eval.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    class_names = {int(k): v for k, v in read_manifest(root)["class_names"].items()}
    write_results_table({Path(args.checkpoint).stem: result}, out / "eval.csv", class_names)
    print(json.dumps({"split": args.split, "map": result.map}, sort_keys=True))
    return 0


def cmd_inspect_pseudolabels(args) -> int:
    config = resolve_config(args)
    model = load_checkpoint(args.checkpoint)
    anchors = model.config.anchors()
    policy = SrrsPolicy(
        delta=config.srrs.delta if args.delta is None else args.delta,
        epsilon_mode="fixed",
        epsilon_fixed=config.srrs.epsilon_fixed if args.epsilon is None else args.epsilon,
        confidence_epsilon=config.srrs.confidence_epsilon if args.epsilon is None else args.epsilon,
    )
    use_srrs = not args.no_srrs
    epsilon = policy.epsilon(use_srrs=use_srrs)
    records = load_unlabeled_split(config.data.root, args.split)[: args.limit]
    stream = open(args.out, "w") if args.out else sys.stdout
    try:
        for start in range(0, len(records), 64):
            part = records[start : start + 64]
            images = images_to_tensor([r.image / 255.0 for r in part])
            preds = predict(model, images, anchors, config.eval.conf_thresh, config.eval.nms_iou)
            for rec, pred in zip(part, preds):
                for pl in pseudo_labels_from_prediction(pred, policy, epsilon, use_srrs):
                    stream.write(json.dumps(pl.to_record(rec.image_id, epsilon), sort_keys=True) + "\n")
    finally:
        if stream is not sys.stdout:
            stream.close()
    return 0


def _run_spec(text: str):
    label, sep, path = text.partition("=")
    return (label, Path(path)) if sep else (Path(text).name, Path(text))


def cmd_plot(args) -> int:
    out = Path(args.out) if args.out else _default_out("plots")
    if not args.runs and not args.bsr_shape:
        raise UsageError("plot needs --runs and/or --bsr-shape")
    paths = []
    if args.runs:
        paths += plot_trends(dict(_run_spec(r) for r in args.runs), out, column=args.column)
    if args.bsr_shape:
        paths += plot_bsr_shape(out, t=args.t, gammas=tuple(args.gammas))
    _write_args(out, args)
    for p in paths:
        log.info(f"Wrote {p}")
    return 0


def cmd_ablate(args) -> int:
    config = resolve_config(args, mode_default="wst")
    out = Path(args.out) if args.out else _default_out("ablation")
    summary = ablation_suite(config, out, jobs=args.jobs, confidence_epsilon=args.confidence_epsilon)
    _write_args(out, args)
    for name, s in summary.items():
        log.info(f"{name} ({s['description']}): {s['status']}, mAP {None if s['eval'] is None else s['eval'].map}")
    return 0


def cmd_sweep(args) -> int:
    config = resolve_config(args, mode_default="wst" if args.parameter == "epsilon" else "bsr")
    out = Path(args.out) if args.out else _default_out(f"sweep_{args.parameter}")
    values = args.values if args.values else SWEEP_DEFAULTS[args.parameter]
    summary = sweep(config, args.parameter, values, out, jobs=args.jobs)
    _write_args(out, args)
    for label, s in summary.items():
        log.info(f"{label}: {s['status']}")
    return 0


# parser ----------------------------------------------------------------


def _add_config_flags(p, with_mode=True):
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    p.add_argument("--config", type=Path, help="INI config file layered over the preset")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config value")
    p.add_argument("--seed", type=int, help="run seed (also seeds the detector initialisation)")
    p.add_argument("--data", type=Path, help="dataset root")
    p.add_argument("--init-checkpoint", type=Path, help="skip the source-only base phase and start from this checkpoint")
    p.add_argument("--ap-style", choices=AP_STYLES, help="AP interpolation")
    if with_mode:
        p.add_argument("--mode", choices=MODES, help="training mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dadet-bsrwst", description="Domain-adaptive one-stage detection experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render a source/target shape dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help=f"dataset root (default ${OUTPUT_ROOT_ENV}/data)")
    p.add_argument("--counts", type=int, nargs=3, default=[500, 200, 200], metavar=("SOURCE", "TRAIN", "TEST"))
    p.add_argument("--no-shift", action="store_true", help="render the target splits in the source style")
    p.add_argument("--target-palette", choices=PALETTES)
    p.add_argument("--shared-target-split", action="store_true", help="target_test holds the target_train images")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train one run")
    _add_config_flags(p)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_config_flags(p, with_mode=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=SPLITS, default="target_test")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-pseudolabels", help="dump pseudo-labels as JSON lines")
    _add_config_flags(p, with_mode=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=SPLITS, default="target_train")
    p.add_argument("--delta", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--no-srrs", action="store_true", help="threshold on detection confidence instead")
    p.add_argument("--limit", type=int)
    p.add_argument("--out", type=Path, help="output file (default stdout)")
    p.set_defaults(func=cmd_inspect_pseudolabels)

    p = sub.add_parser("plot", help="trend curves and BSR loss shapes")
    p.add_argument("--runs", nargs="+", metavar="[LABEL=]RUN_DIR")
    p.add_argument("--column", default="target_mAP")
    p.add_argument("--bsr-shape", action="store_true")
    p.add_argument("--t", type=float, default=0.5)
    p.add_argument("--gammas", type=float, nargs="+", default=[0.0, 1.0, 2.0, 4.0, 5.0])
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("ablate", help="self-training ablation A-F from a shared base")
    _add_config_flags(p, with_mode=False)
    p.add_argument("--confidence-epsilon", type=float, default=0.9)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="one run per value of gamma, t or epsilon")
    _add_config_flags(p)
    p.add_argument("--parameter", choices=sorted(SWEEP_DEFAULTS), required=True)
    p.add_argument("--values", type=float, nargs="+")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_sweep)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": message}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)-8s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DadetError as e:
        log.debug("Command failed", exc_info=True)
        return _fail(e.kind, str(e), e.exit_code)
    except (OSError, ValueError, RuntimeError) as e:
        log.debug("Command failed", exc_info=True)
        return _fail(type(e).__name__, str(e), 1)


if __name__ == "__main__":
    sys.exit(main())
