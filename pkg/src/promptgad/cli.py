"""Command-line entry point: ``promptgad <command> [options]``.

Exit codes: 0 ok, 1 usage, 2 configuration, 3 data, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, apply_overrides, dump_config, load_config, parse_config_text
from .data import DataError, SyntheticConfig, generate_synthetic, save_dataset
from .tensor_core import NumericError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
SWEEP_METRICS = ("group_map@0.5", "group_map@1", "outlier_miou", "individual_accuracy", "membership_accuracy")

log = logging.getLogger("promptgad")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _overrides(args) -> dict:
    values = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        values["seed"] = str(args.seed)
    if getattr(args, "out", None) is not None and "out_dir" not in values and args.command in ("train", "prompt-sweep"):
        values["out_dir"] = args.out
    if getattr(args, "data", None) is not None:
        values["data_dir"] = args.data
    if getattr(args, "frozen", None) is not None:
        values["frozen"] = str(args.frozen)
    if getattr(args, "prompt_mode", None) is not None:
        values["prompt_mode"] = args.prompt_mode
    if getattr(args, "epochs", None) is not None:
        values["epochs"] = str(args.epochs)
    return values


def _run_config(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _thresholds(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad --thresholds {text!r}") from None
    if not vals or any(not 0 < v <= 1 for v in vals):
        raise ConfigError("thresholds must lie in (0, 1]")
    return vals


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    """Write a synthetic dataset. Config keys may name SyntheticConfig or RunConfig fields."""
    if args.config and not Path(args.config).exists():
        raise ConfigError(f"config file not found: {args.config}")
    values = parse_config_text(Path(args.config).read_text(), args.config) if args.config else {}
    values.update({k: v for k, v in _overrides(args).items() if k != "data_dir"})
    syn_keys = {f.name for f in dataclasses.fields(SyntheticConfig)}
    run_keys = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(values) - syn_keys - run_keys)
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown}")
    run = apply_overrides(RunConfig(), {k: v for k, v in values.items() if k in run_keys})
    try:
        syn = apply_overrides(SyntheticConfig(), {k: v for k, v in values.items() if k in syn_keys})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out or run.data_dir)
    clips, frames = generate_synthetic(syn)
    save_dataset(out, clips, frames)
    dump_config(syn, out, "generate_config.txt")
    print(f"wrote {len(clips)} clips to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import plot_training_curves
    from .train import train

    cfg = _run_config(args)
    result = train(cfg, resume=args.resume)
    out = Path(cfg.out_dir)
    if result["history"]:
        plot_training_curves(result["history"], out / "training_curves.png")
        last = result["history"][-1]
        print(f"epoch {last['epoch']} total {last['total']:.6f}")
    counts = result["model"].parameter_counts()
    print(f"checkpoint {result['checkpoint']}  trainable {counts['trainable']} / total {counts['total']}")
    return EXIT_OK


def _eval_clips(clips, split: str):
    from .train import select_split

    chosen = select_split(clips, split)
    if not chosen:
        raise DataError(f"no clips in split {split!r}")
    return chosen


def cmd_eval(args) -> int:
    from .evaluate import (
        class_frequencies,
        eval_records,
        format_report,
        load_predictions,
        metric_report,
        predict,
        save_predictions,
    )
    from .plotting import plot_per_class_ap
    from .train import load_checkpoint, load_training_data

    thresholds = _thresholds(args.thresholds)
    counts = None
    if args.predictions:
        cfg = _run_config(args)
        from .data import load_annotations

        clips = load_annotations(Path(cfg.data_dir), k_max=cfg.num_groups)
        preds = load_predictions(args.predictions)
        wanted = {p["clip_id"] for p in preds}
        missing = wanted - {c.clip_id for c in clips}
        if missing:
            raise DataError(f"predictions for unknown clips {sorted(missing)[:3]}")
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --predictions")
        model, saved, _epoch, _ = load_checkpoint(args.checkpoint)
        cfg = apply_overrides(saved, {k: v for k, v in _overrides(args).items() if k in ("data_dir", "features_dir")})
        clips, pixels = load_training_data(cfg)
        clips = _eval_clips(clips, args.split)
        preds = predict(model, clips, pixels, cfg)
        counts = model.parameter_counts()
    records = eval_records(preds, clips)
    report = metric_report(records, thresholds, cfg.num_activities, counts)
    text = format_report(report, thresholds)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.tsv").write_text(text)
        save_predictions(preds, out / "predictions.jsonl")
        dump_config(cfg, out)
        freqs = class_frequencies([c for c in clips if c.clip_id in {p["clip_id"] for p in preds}], cfg.num_activities)
        plot_per_class_ap(report["metrics"]["per_class_ap"], freqs, out / "per_class_ap.png", f"{thresholds[0]:g}")
    return EXIT_OK


def cmd_dump_attn(args) -> int:
    from .attention import UnknownClipError, dump_attention
    from .train import load_checkpoint, load_training_data

    model, saved, _epoch, _ = load_checkpoint(args.checkpoint)
    cfg = apply_overrides(saved, {k: v for k, v in _overrides(args).items() if k in ("data_dir", "features_dir")})
    clips, pixels = load_training_data(cfg)
    try:
        result = dump_attention(model, clips, pixels, args.clip, args.out, cfg)
    except UnknownClipError:
        raise DataError(f"unknown clip id {args.clip!r}") from None
    dump_config(cfg, args.out)
    print(f"wrote {len(result['files'])} attention matrices to {args.out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import format_results, run_all

    results = run_all(quick=args.quick)
    sys.stdout.write(format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def prompt_sweep(cfg: RunConfig, modes=("none", "shallow", "deep"), split: str = "val", data=None) -> list[dict]:
    """Train one model per prompt mode under the same seed and data; one metrics row each."""
    from .evaluate import eval_records, predict
    from .metrics import evaluate
    from .train import load_training_data, select_split, train

    clips, pixels = data if data is not None else load_training_data(cfg)
    eval_clips = select_split(clips, split)
    rows = []
    for mode in modes:
        run = dataclasses.replace(cfg, prompt_mode=mode, out_dir=str(Path(cfg.out_dir) / mode)).validate()
        result = train(run, data=(clips, pixels))
        metrics = evaluate(eval_records(predict(result["model"], eval_clips, pixels, run), eval_clips),
                           (0.5, 1.0), run.num_activities)
        counts = result["model"].parameter_counts()
        row = {"prompt_mode": mode, "trainable": counts["trainable"], "prompts": counts["prompts"]}
        row.update({m: metrics[m] for m in SWEEP_METRICS})
        rows.append(row)
    return rows


def format_sweep(rows: list[dict]) -> str:
    cols = ["prompt_mode", "trainable", "prompts", *SWEEP_METRICS]
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    return "\n".join(lines) + "\n"


def cmd_prompt_sweep(args) -> int:
    from .plotting import plot_prompt_comparison

    cfg = _run_config(args)
    rows = prompt_sweep(cfg, split=args.split)
    text = format_sweep(rows)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.tsv").write_text(text)
    dump_config(cfg, out)
    plot_prompt_comparison(rows, SWEEP_METRICS, out / "prompt_modes.png")
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="promptgad", description="Group activity detection on synthetic desk-scale scenes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, out_help="output directory"):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=out_help)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    def model_flags(sp):
        grp = sp.add_mutually_exclusive_group()
        grp.add_argument("--frozen", dest="frozen", action="store_const", const=True, help="train prompts, decoder, heads")
        grp.add_argument("--full-ft", dest="frozen", action="store_const", const=False, help="train everything")
        sp.add_argument("--prompt-mode", choices=("none", "shallow", "deep"))
        sp.add_argument("--data", help="dataset directory")
        sp.add_argument("--epochs", type=int)

    sp = sub.add_parser("generate", help="write a synthetic dataset")
    common(sp, "dataset directory (default: data_dir)")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="train and checkpoint")
    common(sp, "run directory (overrides out_dir)")
    model_flags(sp)
    sp.add_argument("--resume", help="checkpoint directory to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="metric report for a checkpoint or a predictions file")
    common(sp, "directory for report.tsv, predictions and figures")
    sp.add_argument("--checkpoint")
    sp.add_argument("--predictions", help="JSON-lines predictions to score instead of running a model")
    sp.add_argument("--data", help="dataset directory")
    sp.add_argument("--split", default="val", choices=("train", "val", "all"))
    sp.add_argument("--thresholds", default="0.5,1.0", help="comma-separated Group IoU thresholds")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("dump-attn", help="write attention matrices and heat maps for one clip")
    common(sp, "output directory")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--clip", required=True)
    sp.add_argument("--data", help="dataset directory")
    sp.set_defaults(func=cmd_dump_attn)

    sp = sub.add_parser("selftest", help="gradient, assignment, metric and permutation checks")
    sp.add_argument("--quick", action="store_true", help="fewer seeds and matrices")
    sp.set_defaults(func=cmd_selftest)

    sp = sub.add_parser("prompt-sweep", help="train none/shallow/deep prompts and compare")
    common(sp, "sweep directory (overrides out_dir)")
    model_flags(sp)
    sp.add_argument("--split", default="val", choices=("train", "val", "all"))
    sp.set_defaults(func=cmd_prompt_sweep)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "dump-attn" and args.out is None:
        print("promptgad dump-attn: --out is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
