"""Command-line front end: train, bench, erf, flops, plan.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
Run configs are JSON objects with flat dotted keys (``train.total_steps``);
nested objects are flattened on load. ``--set key=value`` overrides any key.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import bench, counting, erf
from .checkpoint import save_checkpoint
from .config import PRESETS, ModelConfig, widen
from .data import SyntheticTask
from .errors import ConfigError, NumericError
from .model import build
from .sparsity import width_plan
from .tensor import RngStream
from .trainer import TrainConfig, train, write_run

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
HELP_WIDTH = 100
SECTIONS = {"model": ModelConfig, "train": TrainConfig, "task": SyntheticTask}


def _formatter(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, width=HELP_WIDTH)


# ------------------------------------------------------------ run configs


def flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(flat, sets):
    flat = dict(flat)
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", item)
        k, v = item.split("=", 1)
        flat[k.strip()] = parse_value(v)
    return flat


def resolve_seed(flag):
    if flag is not None:
        return int(flag)
    env = os.environ.get("SLAK_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"SLAK_SEED={env!r} is not an integer", "SLAK_SEED") from exc
    return 0


def _split(flat):
    flat = dict(flat)
    preset = flat.pop("model.preset", "slak-micro")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}", "model.preset")
    parts = {s: {} for s in SECTIONS}
    for k, v in flat.items():
        sec, _, name = k.partition(".")
        if sec not in SECTIONS or not name:
            raise ConfigError("unknown config key", k)
        known = {f.name for f in fields(SECTIONS[sec])}
        if name not in known:
            raise ConfigError(f"unknown field; expected one of {sorted(known)}", k)
        parts[sec][name] = tuple(v) if isinstance(v, list) else v
    return preset, parts


def _model_config(preset, kw):
    try:
        return PRESETS[preset](**kw)
    except TypeError as exc:
        raise ConfigError(str(exc), "model") from exc


def build_run(flat):
    """Split a flat dict into (preset, model config, train config, task)."""
    preset, parts = _split(flat)
    model_cfg = _model_config(preset, parts["model"])
    train_cfg = TrainConfig(**parts["train"])
    task_kw = {"image_size": model_cfg.input_size, "channels": model_cfg.in_channels}
    task_kw.update(parts["task"])
    try:
        task = SyntheticTask(**task_kw)
    except ValueError as exc:
        raise ConfigError(str(exc), "task") from exc
    return preset, model_cfg, train_cfg, task


def resolved_flat(preset, model_cfg, train_cfg, task):
    out = {"model.preset": preset}
    for sec, obj in (("model", model_cfg.to_dict()), ("train", train_cfg.to_dict()),
                     ("task", {f.name: getattr(task, f.name) for f in fields(task)})):
        for k, v in obj.items():
            out[f"{sec}.{k}"] = list(v) if isinstance(v, tuple) else v
    return out


def load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}", "config") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}", "config") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object", "config")
    return flatten(data)


def _write(out_dir, name, text):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", newline="") as f:
        f.write(text)
    return path


# ---------------------------------------------------------------- commands


def cmd_train(args):
    flat = apply_overrides(load_config_file(args.config), args.set)
    if "train.seed" not in flat or args.seed is not None:
        flat["train.seed"] = resolve_seed(args.seed)
    preset, model_cfg, train_cfg, task = build_run(flat)
    resolved = resolved_flat(preset, model_cfg, train_cfg, task)
    _write(args.out, "resolved_config.json", json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    model = build(model_cfg, RngStream(train_cfg.seed).derive("init"))
    result = train(model, None, train_cfg, task=task, log_every=args.log_every,
                   log=lambda s: print(s, file=sys.stderr))
    write_run(result, model_cfg, train_cfg, args.out)
    save_checkpoint(model, result.masks, os.path.join(args.out, "checkpoint.slak"))
    acc = result.running_acc(min(50, max(1, len(result.rows)))) if result.rows else [result.initial["acc"]]
    print(json.dumps({"steps": len(result.rows), "final_running_acc": float(acc[-1]),
                      "global_sparsity": result.rows[-1]["global_sparsity"] if result.rows else 0.0}))
    return EXIT_OK


def cmd_bench(args):
    variants = [v.strip() for v in args.variants.split(",")]
    recs = []
    root = RngStream(resolve_seed(args.seed))
    for R in _int_list(args.resolutions, "resolutions"):
        for v in variants:
            recs.append(bench.bench_variant(v, args.channels, R, args.M, args.N, args.sparsity, args.reps,
                                            args.warmup, root.derive(f"{v}.{R}"), args.batch))
    text = bench.speedup_json(recs) + "\n" if args.json else bench.speedup_report(recs)
    _write(args.out, "speedup.json" if args.json else "speedup.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def _int_list(text, name):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}", name) from exc
    if not vals:
        raise ConfigError("empty list", name)
    return vals


def _model_from(args, **extra):
    flat = apply_overrides({}, args.set)
    flat["model.preset"] = args.preset
    for k, v in extra.items():
        flat.setdefault(f"model.{k}", v)
    preset, parts = _split({k: v for k, v in flat.items() if k.startswith("model.")})
    return _model_config(preset, parts["model"])


def cmd_erf(args):
    extra = {"input_size": args.size}
    if args.linear:
        extra.update(activation="identity", layer_scale_init=args.layer_scale)
    model_cfg = _model_from(args, **extra)
    seed = resolve_seed(args.seed)
    model = build(model_cfg, RngStream(seed).derive("init"))
    images = RngStream(seed).derive("erf.images").generator.standard_normal(
        (args.images, model_cfg.in_channels, args.size, args.size)).astype(np.float32)
    cmap = erf.contribution_map(model, images)
    _write(args.out, "erf_map.csv", erf.map_csv(cmap))
    js = erf.summary_json(cmap)
    _write(args.out, "erf_summary.json", js + "\n")
    if args.svg:
        _write(args.out, "erf_map.svg", erf.map_svg(cmap))
    print(js)
    return EXIT_OK


def cmd_flops(args):
    model_cfg = _model_from(args)
    variants = {"full": ("full",), "decomposed": ("decomposed_parallel",),
                "both": ("full", "decomposed_parallel")}[args.variant]
    recs = counting.flops_sweep(model_cfg, _int_list(args.kernels, "kernels"), variants, args.input_size)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kernel", "variant", "macs", "params", "dw_macs", "dw_params"])
    for r in recs:
        w.writerow([r.kernel, r.variant, r.macs, r.params, r.dw_macs, r.dw_params])
    _write(args.out, "flops.csv", buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_plan(args):
    if not 0.0 <= args.sparsity < 1.0:
        raise ConfigError("must be in [0, 1)", "sparsity")
    model_cfg = _model_from(args)
    factor, dims, report = width_plan(model_cfg.stage_dims, args.sparsity, counting.sparse_param_counter(model_cfg))
    wide = widen(model_cfg, factor)
    plan = counting.uniform_plan(wide, args.sparsity) if args.sparsity > 0 else None
    report["sparse_widened_macs"] = counting.count_flops(wide, plan=plan)[0]
    report["dense_baseline_macs"] = counting.count_flops(model_cfg)[0]
    if not args.grid:
        report.pop("grid")
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    _write(args.out, "plan.json", text)
    sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="slak", description="Sparse large-kernel convolution toolkit.",
                                formatter_class=_formatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, preset="slak-micro", overrides=True):
        sp.add_argument("--out", default="runs", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="seed (falls back to $SLAK_SEED, then 0)")
        if preset is not None:
            sp.add_argument("--preset", default=preset, choices=sorted(PRESETS), help="model preset")
        if overrides:
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="override a dotted config key (repeatable)")

    t = sub.add_parser("train", help="train on the synthetic task", formatter_class=_formatter)
    t.add_argument("--config", default=None, help="JSON run config with dotted keys")
    t.add_argument("--log-every", type=int, default=0, help="progress line to stderr every N steps (0: off)")
    common(t, preset=None)
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="single-layer latency comparison", formatter_class=_formatter)
    b.add_argument("--variants", default="dense,sparse_masked,sparse_decomposed", help="comma-separated variants")
    b.add_argument("--resolutions", default="16,32,64,128", help="comma-separated input sizes R")
    b.add_argument("--M", type=int, default=51, help="large kernel size")
    b.add_argument("--N", type=int, default=5, help="short edge of decomposed kernels")
    b.add_argument("--channels", type=int, default=64, help="channels C")
    b.add_argument("--batch", type=int, default=8, help="batch size")
    b.add_argument("--sparsity", type=float, default=0.4, help="fraction of zero weights in sparse variants")
    b.add_argument("--reps", type=int, default=5, help="timed repetitions (>= 3)")
    b.add_argument("--warmup", type=int, default=1, help="untimed warmup iterations")
    b.add_argument("--json", action="store_true", help="write JSON instead of CSV")
    common(b, preset=None, overrides=False)
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("erf", help="effective receptive field map", formatter_class=_formatter)
    e.add_argument("--size", type=int, default=224, help="analysis grid G")
    e.add_argument("--images", type=int, default=4, help="number of random input images")
    e.add_argument("--linear", action="store_true", help="identity activation and unit layer scale")
    e.add_argument("--layer-scale", type=float, default=1.0, help="layer scale used with --linear")
    e.add_argument("--svg", action="store_true", help="also write a log-scaled SVG heatmap")
    common(e)
    e.set_defaults(func=cmd_erf)

    f = sub.add_parser("flops", help="MAC/parameter sweep over kernel sizes", formatter_class=_formatter)
    f.add_argument("--kernels", default="7,31,51,61", help="comma-separated kernel sizes")
    f.add_argument("--variant", default="both", choices=["full", "decomposed", "both"], help="DW variant(s)")
    f.add_argument("--input-size", type=int, default=224, help="input resolution")
    common(f, preset="slak-t")
    f.set_defaults(func=cmd_flops)

    pl = sub.add_parser("plan", help="width factor matching a sparse model to the dense baseline",
                        formatter_class=_formatter)
    pl.add_argument("--sparsity", type=float, default=0.4, help="target sparsity s")
    pl.add_argument("--grid", action="store_true", help="include every grid point in the report")
    common(pl, preset="slak-t")
    pl.set_defaults(func=cmd_plan)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
