"""``qapseg`` command line: analyze-dilation, train, evaluate, ablate, render-overlay, gen-synthetic.

Exit codes: 0 success, 1 runtime or training failure, 2 configuration or
parse error.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import data as dataio
from .dilation import (DilationSchedule, format_reports, parse_rates, rank_schedules, render_coverage,
                       render_coverage_ppm)
from .errors import ConfigurationError, DataError, DimensionError, FormatError, QapsegError
from .metrics import TABLE_COLUMNS, ConfusionMatrix, summary
from .model import FLAG_NAMES, TABLE2_COMBINATIONS, Model, ModelConfig, build, parameter_count
from .training import TrainConfig, evaluate_dice, train, write_log

logger = logging.getLogger("qapseg")

DEFAULT_RUN = {
    "seed": 0,
    "data": {"synthetic": 200, "size": 64, "manifest": None},
    "model": {"base_channels": 8},
    "train": {"max_epochs": 30, "lr_init": 1e-3, "batch_size": 4, "focal_alpha": [1.0, 1.0, 5.0, 5.0]},
}

FLAG_TOKENS = {"139": "atrous_139", "124": "atrous_124", "max": "pool_max", "avg": "pool_avg"}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def parse_flags(text: str) -> dict:
    """``"124,139,max,avg"`` or ``"none"`` -> model flag dict."""
    tokens = [t.strip() for t in text.split(",") if t.strip()]
    if tokens == ["none"]:
        tokens = []
    unknown = [t for t in tokens if t not in FLAG_TOKENS]
    if unknown:
        raise ConfigurationError(f"unknown augmentation flags {unknown}; use 124, 139, max, avg or none")
    return {name: name in {FLAG_TOKENS[t] for t in tokens} for name in FLAG_NAMES}


def resolve_run(args) -> dict:
    """Defaults <- config file <- command-line flags."""
    run = copy.deepcopy(DEFAULT_RUN)
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            run = _merge(run, json.loads(path.read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}") from None
    overrides = {
        ("seed",): args.seed,
        ("data", "synthetic"): getattr(args, "synthetic", None),
        ("data", "size"): getattr(args, "size", None),
        ("data", "manifest"): getattr(args, "manifest", None),
        ("model", "base_channels"): getattr(args, "base_channels", None),
        ("train", "max_epochs"): getattr(args, "epochs", None),
        ("train", "lr_init"): getattr(args, "lr", None),
        ("train", "batch_size"): getattr(args, "batch_size", None),
    }
    for path, value in overrides.items():
        if value is None:
            continue
        node = run
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value
    if getattr(args, "manifest", None):
        run["data"]["synthetic"] = None
    if getattr(args, "no_augment", False):
        run["train"]["augment"] = False
    if getattr(args, "flags", None):
        run["model"].update(parse_flags(args.flags))
    run["train"]["seed"] = run["seed"]
    run["train"]["lr_min"] = min(run["train"].get("lr_min", 1e-5), run["train"].get("lr_init", 1e-4))
    return run


def model_config(run: dict) -> ModelConfig:
    size = int(run["data"]["size"])
    return ModelConfig(**{"input_size": (size, size), **run["model"]})


def train_config(run: dict) -> TrainConfig:
    return TrainConfig(**run["train"])


def load_data(run: dict):
    """(train, val, test) sample lists at the configured size."""
    d = run["data"]
    size = int(d["size"])
    if d.get("manifest"):
        path = Path(d["manifest"])
        if not path.exists():
            raise ConfigurationError(f"dataset manifest {path} not found")
        manifest = dataio.DatasetManifest.load(path)
        if any(e.split is None for e in manifest.samples):
            manifest = dataio.split(manifest, run["seed"])
        parts = [[dataio.normalize_resize(s, size) for s in manifest.load_split(name)] for name in dataio.SPLITS]
    elif d.get("synthetic"):
        samples = dataio.synth_phantoms(int(d["synthetic"]), size, run["seed"])
        sp = dataio.split_samples(samples, run["seed"])
        parts = [sp[name] for name in dataio.SPLITS]
    else:
        raise ConfigurationError("no dataset: pass --synthetic N or --manifest PATH")
    return tuple(parts)


def prepare_out(path) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise ConfigurationError(f"output directory {out} already exists and is not empty")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _table(header: Sequence[str], rows: List[Sequence[str]], fmt: str) -> str:
    if fmt == "csv":
        return "\n".join(",".join(r) for r in [list(header)] + rows)
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    return "\n".join("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + rows)


def confusion_for(model: Model, samples) -> ConfusionMatrix:
    _, cm = evaluate_dice(model, samples)
    return cm


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_analyze_dilation(args) -> int:
    reports = rank_schedules(args.f, args.layers, args.max_rate)
    if args.top:
        reports = reports[:args.top]
    print(format_reports(reports, args.format))
    for text in args.render or []:
        schedule = DilationSchedule(args.f, parse_rates(text))
        print()
        print(f"coverage of {schedule} (f={args.f}):")
        print(render_coverage(schedule))
        out_dir = Path(args.out or ".")
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"coverage_{'-'.join(map(str, schedule.rates))}.ppm"
        path.write_bytes(render_coverage_ppm(schedule))
        print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    run = resolve_run(args)
    mcfg, tcfg = model_config(run), train_config(run)
    train_set, val_set, _ = load_data(run)
    out = prepare_out(args.out)
    run["model"] = {k: v for k, v in mcfg.to_json().items() if k != "input_size"}
    (out / "config.json").write_text(json.dumps(run, indent=2, sort_keys=True), encoding="utf-8")
    model = build(mcfg, run["seed"])
    model, records = train(model, train_set, val_set, tcfg, log_path=out / "train_log.csv",
                           checkpoint_path=out / "best.ckpt")
    best = max(r.val_dice for r in records)
    print(f"trained {len(records)} epochs; best val dice {best:.4f}; parameters {parameter_count(model)}")
    print(f"wrote {out / 'train_log.csv'}, {out / 'best.ckpt'}, {out / 'config.json'}")
    return 0


def cmd_evaluate(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise ConfigurationError(f"checkpoint {ckpt} not found")
    model = Model.load(ckpt)
    run = resolve_run(args)
    run["data"]["size"] = model.config.input_size[0]
    parts = dict(zip(dataio.SPLITS, load_data(run)))
    samples = parts[args.split] if args.split != "all" else sum(parts.values(), [])
    cm = confusion_for(model, samples)
    scores = summary(cm, args.exclude_background)
    row = [args.name or ckpt.stem] + [f"{scores[c]:.4f}" for c in TABLE_COLUMNS]
    print(_table(["name"] + list(TABLE_COLUMNS), [row], args.format))
    if args.confusion:
        print("confusion (rows = truth, cols = prediction):")
        for r in cm.counts:
            print(" ".join(str(int(v)) for v in r))
    return 0


def flag_marks(cfg: ModelConfig, fmt: str) -> List[str]:
    mark = "x" if fmt == "csv" else "✓"
    return [mark if getattr(cfg, name) else "" for name in FLAG_NAMES]


def cmd_ablate(args) -> int:
    run = resolve_run(args)
    base_cfg = model_config(run)
    tcfg = train_config(run)
    train_set, val_set, test_set = load_data(run)
    out = prepare_out(args.out) if args.out else None
    if out is not None:
        (out / "config.json").write_text(json.dumps(run, indent=2, sort_keys=True), encoding="utf-8")
    rows = []
    for combo in TABLE2_COMBINATIONS:
        cfg = base_cfg.with_flags(*combo)
        model = build(cfg, run["seed"])
        model, records = train(model, train_set, val_set, tcfg)
        scores = summary(confusion_for(model, test_set or val_set))
        rows.append(flag_marks(cfg, args.format) + [str(parameter_count(model)), f"{scores['miou']:.4f}",
                                                     f"{scores['dice']:.4f}", str(len(records))])
        logger.info("ablation %s miou %.4f", combo, scores["miou"])
    header = ["139", "124", "max", "avg", "params", "miou", "dice", "epochs"]
    text = _table(header, rows, args.format)
    print(text)
    if out is not None:
        (out / "ablation.csv").write_text(_table(header, [[c if c != "✓" else "x" for c in r] for r in rows],
                                                 "csv") + "\n", encoding="utf-8")
    return 0


def cmd_render_overlay(args) -> int:
    true = dataio.load_pgm(args.true)
    image = dataio.load_pgm_image(args.image) if args.image else None
    if args.pred:
        pred = dataio.load_pgm(args.pred)
    elif args.checkpoint:
        if image is None:
            raise ConfigurationError("--checkpoint needs --image to predict from")
        model = Model.load(args.checkpoint)
        pred = model.predict(dataio.normalize_image(image)[None])[0]
    else:
        raise ConfigurationError("pass --pred PGM or --checkpoint CKPT")
    classes = [int(c) for c in args.classes.split(",")]
    rgb = dataio.render_overlay(pred, true, args.out, image, classes)
    counts = dataio.color_counts(rgb, true.shape[1])
    print("class,tp,fp,fn")
    for c, n in zip(classes, counts):
        print(f"{c},{n['tp']},{n['fp']},{n['fn']}")
    return 0


def cmd_gen_synthetic(args) -> int:
    out = prepare_out(args.out)
    samples = dataio.synth_phantoms(args.n, args.size, args.seed)
    manifest = dataio.write_dataset(samples, out, args.seed)
    counts = {k: len(manifest.ids(k)) for k in dataio.SPLITS}
    print(f"wrote {len(samples)} samples to {out} ({counts})")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qapseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze-dilation", help="rank dilation schedules and render coverage")
    a.add_argument("--f", type=int, default=3)
    a.add_argument("--layers", type=int, default=3)
    a.add_argument("--max-rate", type=int, default=9)
    a.add_argument("--render", action="append", metavar="SCHEDULE", help="e.g. 1,2,9; repeatable")
    a.add_argument("--top", type=int, default=0)
    a.add_argument("--out", help="directory for PPM renders (default: cwd)")
    a.add_argument("--format", choices=("table", "csv"), default="table")
    a.set_defaults(func=cmd_analyze_dilation)

    def data_args(q):
        q.add_argument("--config", help="JSON run config; flags override it")
        q.add_argument("--synthetic", type=int, help="number of generated phantoms")
        q.add_argument("--manifest", help="dataset manifest.json")
        q.add_argument("--size", type=int)
        q.add_argument("--seed", type=int)

    def train_args(q):
        q.add_argument("--epochs", type=int)
        q.add_argument("--lr", type=float)
        q.add_argument("--batch-size", type=int)
        q.add_argument("--base-channels", type=int)
        q.add_argument("--no-augment", action="store_true")

    t = sub.add_parser("train", help="train one model")
    data_args(t)
    train_args(t)
    t.add_argument("--flags", help="augmentations: any of 124,139,max,avg or none (default all)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint")
    e.add_argument("--checkpoint", required=True)
    data_args(e)
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--name")
    e.add_argument("--exclude-background", action="store_true")
    e.add_argument("--confusion", action="store_true", help="also print the confusion matrix")
    e.add_argument("--format", choices=("table", "csv"), default="csv")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("ablate", help="train and score all ten augmentation combinations")
    data_args(b)
    train_args(b)
    b.add_argument("--out")
    b.add_argument("--format", choices=("table", "csv"), default="table")
    b.set_defaults(func=cmd_ablate)

    r = sub.add_parser("render-overlay", help="TP/FP/FN overlay as PPM")
    r.add_argument("--true", required=True)
    r.add_argument("--pred")
    r.add_argument("--checkpoint")
    r.add_argument("--image")
    r.add_argument("--classes", default="1,2,3")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render_overlay)

    g = sub.add_parser("gen-synthetic", help="write phantom PGM pairs and a manifest")
    g.add_argument("--n", type=int, default=50)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synthetic)
    return p


def _thread_limit():
    value = os.environ.get("QAPSEG_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise ConfigurationError(f"QAPSEG_THREADS must be an integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, n))


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigurationError, FormatError, DataError, DimensionError, FileNotFoundError) as exc:
        print(f"qapseg {args.command}: {exc}", file=sys.stderr)
        return 2
    except (QapsegError, FloatingPointError) as exc:
        print(f"qapseg {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
