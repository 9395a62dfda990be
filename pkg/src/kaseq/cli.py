"""Command-line entry point.

Configuration is layered: built-in defaults, then an optional JSON config
file (--config), then explicit command-line flags, later layers winning.
The effective merged configuration is dumped alongside every artifact so
any run can be reconstructed from its outputs.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
failure (non-finite loss; the last good checkpoint is dumped next to the
requested output).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from dataclasses import asdict
from typing import Optional, Sequence

import numpy as np

from . import data as D
from . import traineval as tv
from .amalgamation import KAWeights
from .detector import DetectorConfig
from .errors import (ConfigError, ContractError, DataFormatError, NumericError,
                     ShapeError, UsageError)

TABLE4_MODES = ("raw", "sag", "sa", "ta", "ta_lf", "sa+ta", "sa+ta_lf")
COMPRESSION_SUITE = ("redundancy", "isometric", "random")


def default_config() -> dict:
    return {
        "detector": asdict(DetectorConfig()),
        "weights": asdict(KAWeights()),
        "optim": asdict(tv.OptimSettings()),
        "train": {"epochs": 40, "teacher_epochs": 60, "batch_size": 16,
                  "use_cache": True, "eval_batch_size": 32},
        "seed": 0,
    }


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"config file {path} does not exist")
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: invalid JSON at byte {e.pos}") from None
    if not isinstance(doc, dict):
        raise DataFormatError(f"{path}: config root must be an object")
    return doc


def _parse_set(assignments: Sequence[str]) -> dict:
    out: dict = {}
    for item in assignments:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def build_config(args, flag_overrides: Optional[dict] = None) -> dict:
    cfg = default_config()
    if getattr(args, "config", None):
        cfg = deep_merge(cfg, load_config_file(args.config))
    if getattr(args, "set", None):
        cfg = deep_merge(cfg, _parse_set(args.set))
    if flag_overrides:
        cfg = deep_merge(cfg, flag_overrides)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def dump_effective_config(cfg: dict, command: str, target: str) -> None:
    """Write the merged configuration next to the artifact it produced."""
    if os.path.isdir(target):
        path = os.path.join(target, "config.json")
    else:
        path = target + ".config.json"
    with open(path, "w") as fh:
        json.dump({"command": command, "config": cfg}, fh, indent=1)


def parse_task_spec(spec: str) -> list[int]:
    """Category set syntax: '1-4', '1,3,5', or mixtures like '1-3,7'."""
    cats: set[int] = set()
    for chunk in spec.split(","):
        chunk = chunk.strip()
        if not chunk:
            raise UsageError(f"empty chunk in task spec {spec!r}")
        if "-" in chunk:
            lo, _, hi = chunk.partition("-")
            try:
                lo_i, hi_i = int(lo), int(hi)
            except ValueError:
                raise UsageError(f"bad range {chunk!r} in task spec") from None
            if hi_i < lo_i:
                raise UsageError(f"descending range {chunk!r} in task spec")
            cats.update(range(lo_i, hi_i + 1))
        else:
            try:
                cats.add(int(chunk))
            except ValueError:
                raise UsageError(f"bad category {chunk!r} in task spec") from None
    if not cats:
        raise UsageError(f"task spec {spec!r} selects no categories")
    return sorted(cats)


def _guard_output(path: str, force: bool, is_dir: bool = False) -> None:
    exists = os.path.isdir(path) if is_dir else os.path.exists(path)
    marker = os.path.join(path, "annotations.json") if is_dir else path
    if is_dir:
        exists = os.path.exists(marker)
    if exists and not force:
        raise UsageError(f"refusing to overwrite {marker}; pass --force")


def _detector_config(cfg: dict, **overrides) -> DetectorConfig:
    merged = dict(cfg["detector"])
    merged.update(overrides)
    return DetectorConfig.from_dict(merged)


def _require_file(path: str, what: str) -> None:
    if not os.path.exists(path):
        raise UsageError(f"{what} {path} does not exist")


def _full_partition_for_subset(subset: list[int], num_categories: int) -> D.TaskPartition:
    complement = tuple(c for c in range(1, num_categories + 1) if c not in set(subset))
    subsets = (tuple(subset),) + ((complement,) if complement else ())
    return D.TaskPartition(subsets, num_categories)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.images < 1:
        raise UsageError("--images must be at least 1")
    cfg = build_config(args)
    _guard_output(args.out, args.force, is_dir=True)
    dataset = D.generate_dataset(count=args.images, num_categories=args.categories,
                                 image_size=args.size, seed=cfg["seed"])
    os.makedirs(args.out, exist_ok=True)
    D.persist_dataset(dataset, args.out)
    dump_effective_config(deep_merge(cfg, {"gen": {
        "images": args.images, "categories": args.categories, "size": args.size}}),
        "gen-data", args.out)
    print(f"wrote {args.images} images to {args.out}")
    return 0


def _load_train_eval(args):
    _require_file(os.path.join(args.data, "annotations.json"), "dataset")
    train = D.load_dataset(args.data)
    eval_ds = None
    if getattr(args, "eval_data", None):
        _require_file(os.path.join(args.eval_data, "annotations.json"), "dataset")
        eval_ds = D.load_dataset(args.eval_data)
    return train, eval_ds


def cmd_train_teacher(args) -> int:
    cfg = build_config(args)
    _guard_output(args.out, args.force)
    train, eval_ds = _load_train_eval(args)
    subset = parse_task_spec(args.task)
    if max(subset) > train.num_categories:
        raise UsageError(f"task categories exceed the dataset universe 1..{train.num_categories}")
    partition = _full_partition_for_subset(subset, train.num_categories)
    epochs = args.epochs or cfg["train"]["teacher_epochs"]
    det_cfg = _detector_config(cfg)
    ckpt, _ = tv.train_teacher(
        train, partition, 0, det_cfg, epochs=epochs, seed=cfg["seed"],
        eval_ds=eval_ds, opt_settings=tv.OptimSettings.from_dict(cfg["optim"]),
        weights=KAWeights.from_dict(cfg["weights"]),
        batch_size=cfg["train"]["batch_size"], csv_path=args.out + ".metrics.csv",
        crash_dump=args.out + ".crash.ckpt")
    tv.save_checkpoint(ckpt, args.out)
    dump_effective_config(cfg, "train-teacher", args.out)
    print(f"teacher checkpoint written to {args.out}")
    return 0


def cmd_train_baseline(args) -> int:
    cfg = build_config(args)
    _guard_output(args.out, args.force)
    train, eval_ds = _load_train_eval(args)
    parts = 1 if args.variant == "raw" else args.parts
    det_cfg = _detector_config(cfg, num_parts=parts,
                               num_categories=train.num_categories,
                               compression="none")
    epochs = args.epochs or cfg["train"]["epochs"]
    ckpt, _ = tv.train_detector_gt(
        train, det_cfg, epochs=epochs, seed=cfg["seed"],
        category_ids=list(range(1, train.num_categories + 1)),
        eval_ds=eval_ds, opt_settings=tv.OptimSettings.from_dict(cfg["optim"]),
        weights=KAWeights.from_dict(cfg["weights"]),
        batch_size=cfg["train"]["batch_size"], csv_path=args.out + ".metrics.csv",
        mode_label=args.variant, crash_dump=args.out + ".crash.ckpt")
    tv.save_checkpoint(ckpt, args.out)
    dump_effective_config(cfg, "train-baseline", args.out)
    print(f"{args.variant} checkpoint written to {args.out}")
    return 0


def cmd_amalgamate(args) -> int:
    cfg = build_config(args)
    _guard_output(args.out, args.force)
    if len(args.teachers) < 2 and args.mode != "sag":
        raise UsageError("amalgamation expects at least two teacher checkpoints")
    if args.mode == "sag" and args.compress != "none":
        raise UsageError("the aggregation baseline operates on unextended sequences; "
                         "--compress must be none")
    if args.label_free:
        cfg = deep_merge(cfg, {"weights": {"lambda_direct": 0.0}})
    train, eval_ds = _load_train_eval(args)
    teacher_ckpts = []
    for path in args.teachers:
        _require_file(path, "teacher checkpoint")
        teacher_ckpts.append(tv.load_checkpoint(path))
    parts = 1 if args.mode == "sag" else len(teacher_ckpts)
    det_cfg = _detector_config(cfg, num_parts=parts,
                               num_categories=train.num_categories,
                               compression=args.compress)
    epochs = args.epochs or cfg["train"]["epochs"]
    ckpt = tv.amalgamate(
        teacher_ckpts, train, det_cfg, args.mode, epochs=epochs, seed=cfg["seed"],
        eval_ds=eval_ds, label_free=args.label_free,
        weights=KAWeights.from_dict(cfg["weights"]),
        opt_settings=tv.OptimSettings.from_dict(cfg["optim"]),
        batch_size=cfg["train"]["batch_size"], csv_path=args.out + ".metrics.csv",
        use_cache=cfg["train"]["use_cache"], crash_dump=args.out + ".crash.ckpt")
    tv.save_checkpoint(ckpt, args.out)
    dump_effective_config(cfg, "amalgamate", args.out)
    print(f"student checkpoint written to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = build_config(args)
    _require_file(args.model, "checkpoint")
    _require_file(os.path.join(args.data, "annotations.json"), "dataset")
    ckpt = tv.load_checkpoint(args.model)
    dataset = D.load_dataset(args.data)
    partition = None
    if "partition" in ckpt.metadata:
        partition = D.TaskPartition.from_jsonable(
            ckpt.metadata["partition"], ckpt.config.num_categories)
    category_ids = ckpt.metadata.get(
        "category_ids", list(range(1, ckpt.config.num_categories + 1)))
    report = tv.evaluate(ckpt, dataset, category_ids=category_ids,
                         partition=partition,
                         batch_size=cfg["train"]["eval_batch_size"])
    print(f"AP={report.ap:.4f} AP50={report.ap50:.4f} AP75={report.ap75:.4f}")
    for name, value in sorted(report.per_subset.items()):
        print(f"  {name}: AP={value:.4f}")
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report.to_dict(), fh, indent=1)
        dump_effective_config(cfg, "evaluate", args.report)
    return 0


def cmd_analyze_redundancy(args) -> int:
    cfg = build_config(args)
    _require_file(args.model, "checkpoint")
    _require_file(os.path.join(args.data, "annotations.json"), "dataset")
    _guard_output(args.out, args.force)
    ckpt = tv.load_checkpoint(args.model)
    dataset = D.load_dataset(args.data)
    report = tv.analyze_redundancy(ckpt, dataset)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "count"])
        for low, count in report.rows():
            writer.writerow([f"{low:.2f}", count])
    dump_effective_config(cfg, "analyze-redundancy", args.out)
    print(f"tokens={report.token_count} fraction_R_above_0.5="
          f"{report.fraction_above_half:.4f}")
    return 0


# ---------------------------------------------------------------------------
# ablation suites


def _suite_settings(suite: str) -> list[dict]:
    if suite == "table4":
        settings = []
        for mode in TABLE4_MODES:
            label_free = mode.endswith("_lf")
            base = mode[:-3] if label_free else mode
            settings.append({"label": mode, "mode": base, "label_free": label_free,
                             "compress": "none"})
        return settings
    if suite == "compression":
        return [{"label": f"sa+ta_{strategy}", "mode": "sa+ta", "label_free": False,
                 "compress": strategy} for strategy in COMPRESSION_SUITE]
    raise UsageError(f"unknown suite {suite!r}")


def run_single_ablation(setting: dict, seed: int, cfg: dict,
                        train: D.Dataset, eval_ds: D.Dataset,
                        teacher_ckpts: list, out_dir: str,
                        teachers_by_id=None) -> dict:
    """Train (or resume) one ablation cell and return its consolidated row."""
    label = f"{setting['label']}_s{seed}"
    run_dir = os.path.join(out_dir, "runs")
    os.makedirs(run_dir, exist_ok=True)
    ckpt_path = os.path.join(run_dir, f"{label}.ckpt")
    report_path = os.path.join(run_dir, f"{label}.report.json")
    if os.path.exists(report_path):
        with open(report_path) as fh:
            return json.load(fh)

    det_overrides: dict = {"num_categories": train.num_categories,
                           "compression": setting["compress"]}
    epochs = cfg["train"]["epochs"]
    opt = tv.OptimSettings.from_dict(cfg["optim"])
    weights = KAWeights.from_dict(cfg["weights"])
    batch = cfg["train"]["batch_size"]
    csv_path = os.path.join(run_dir, f"{label}.metrics.csv")

    if not os.path.exists(ckpt_path):
        if setting["mode"] == "raw":
            det_cfg = _detector_config(cfg, num_parts=1, compression="none",
                                       num_categories=train.num_categories)
            ckpt, _ = tv.train_detector_gt(
                train, det_cfg, epochs=epochs, seed=seed,
                category_ids=list(range(1, train.num_categories + 1)),
                eval_ds=eval_ds, opt_settings=opt, weights=weights,
                batch_size=batch, csv_path=csv_path, mode_label="raw",
                crash_dump=ckpt_path + ".crash")
        else:
            parts = 1 if setting["mode"] == "sag" else len(teacher_ckpts)
            det_overrides["num_parts"] = parts
            if setting["mode"] == "sag":
                det_overrides["compression"] = "none"
            det_cfg = _detector_config(cfg, **det_overrides)
            ckpt = tv.amalgamate(
                teacher_ckpts, train, det_cfg, setting["mode"], epochs=epochs,
                seed=seed, eval_ds=eval_ds, label_free=setting["label_free"],
                weights=weights, opt_settings=opt, batch_size=batch,
                csv_path=csv_path, use_cache=cfg["train"]["use_cache"],
                crash_dump=ckpt_path + ".crash", teachers_by_id=teachers_by_id)
        tv.save_checkpoint(ckpt, ckpt_path)
    else:
        ckpt = tv.load_checkpoint(ckpt_path)

    partition = None
    if "partition" in ckpt.metadata:
        partition = D.TaskPartition.from_jsonable(ckpt.metadata["partition"],
                                                  train.num_categories)
    report = tv.evaluate(ckpt, eval_ds,
                         category_ids=list(range(1, train.num_categories + 1)),
                         partition=partition,
                         batch_size=cfg["train"]["eval_batch_size"])
    row = {"mode": setting["label"], "seed": seed, "AP": report.ap,
           "AP50": report.ap50, "AP75": report.ap75}
    with open(report_path, "w") as fh:
        json.dump(row, fh)
    return row


def _prepare_teachers(args, cfg, train, eval_ds, out_dir) -> list:
    if args.teachers:
        ckpts = []
        for path in args.teachers:
            _require_file(path, "teacher checkpoint")
            ckpts.append(tv.load_checkpoint(path))
        return ckpts
    teacher_dir = os.path.join(out_dir, "teachers")
    os.makedirs(teacher_dir, exist_ok=True)
    partition = D.TaskPartition.equal_split(train.num_categories, args.teacher_count)
    epochs = cfg["train"]["teacher_epochs"]
    ckpts = []
    for t in range(args.teacher_count):
        path = os.path.join(teacher_dir, f"teacher{t + 1}.ckpt")
        if os.path.exists(path):
            ckpts.append(tv.load_checkpoint(path))
            continue
        det_cfg = _detector_config(cfg)
        ckpt, _ = tv.train_teacher(
            train, partition, t, det_cfg, epochs=epochs, seed=cfg["seed"] + 1000 + t,
            eval_ds=eval_ds, opt_settings=tv.OptimSettings.from_dict(cfg["optim"]),
            weights=KAWeights.from_dict(cfg["weights"]),
            batch_size=cfg["train"]["batch_size"],
            csv_path=path + ".metrics.csv", crash_dump=path + ".crash")
        tv.save_checkpoint(ckpt, path)
        ckpts.append(ckpt)
    return ckpts


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    if args.epochs:
        cfg = deep_merge(cfg, {"train": {"epochs": args.epochs}})
    settings = _suite_settings(args.suite)
    os.makedirs(args.out, exist_ok=True)
    train = D.load_dataset(args.train_data)
    eval_ds = D.load_dataset(args.eval_data)
    teacher_ckpts = _prepare_teachers(args, cfg, train, eval_ds, args.out)

    seeds = list(range(args.seeds))
    jobs = [(setting, seed) for setting in settings for seed in seeds]
    workers = int(os.environ.get("KASEQ_THREADS", args.workers))
    rows = []
    if workers > 1:
        import multiprocessing as mp
        ctx = mp.get_context("spawn")
        payload = [(setting, seed, cfg, args.train_data, args.eval_data,
                    [os.path.join(args.out, "teachers", f"teacher{t + 1}.ckpt")
                     if not args.teachers else args.teachers[t]
                     for t in range(len(teacher_ckpts))], args.out)
                   for setting, seed in jobs]
        with ctx.Pool(processes=workers) as pool:
            rows = pool.map(_ablation_worker, payload)
    else:
        shared_teachers: dict = {}
        for setting, seed in jobs:
            row = run_single_ablation(setting, seed, cfg, train, eval_ds,
                                      teacher_ckpts, args.out,
                                      teachers_by_id=shared_teachers)
            print(f"{row['mode']} seed {row['seed']}: AP50={row['AP50']:.4f}")
            rows.append(row)

    table = os.path.join(args.out, "ablation.csv" if args.suite == "table4"
                         else "compression.csv")
    with open(table, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["mode", "seed", "AP", "AP50", "AP75"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    dump_effective_config(cfg, f"ablate:{args.suite}", args.out)
    print(f"wrote {table} with {len(rows)} rows")
    return 0


def _ablation_worker(payload) -> dict:
    setting, seed, cfg, train_dir, eval_dir, teacher_paths, out_dir = payload
    train = D.load_dataset(train_dir)
    eval_ds = D.load_dataset(eval_dir)
    teacher_ckpts = [tv.load_checkpoint(p) for p in teacher_paths]
    return run_single_ablation(setting, seed, cfg, train, eval_ds,
                               teacher_ckpts, out_dir)


# ---------------------------------------------------------------------------
# argument wiring


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: _Parser) -> None:
    p.add_argument("--config", help="JSON config file merged over defaults")
    p.add_argument("--set", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config entry (dotted path)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true",
                   help="overwrite existing outputs")


def build_parser() -> _Parser:
    parser = _Parser(prog="kaseq", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and persist a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=2000)
    p.add_argument("--categories", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train one task-specialized teacher")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--task", required=True, help="category subset, e.g. 1-4 or 1,3,5")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-baseline", help="train the raw or raw_ext baseline")
    p.add_argument("--variant", choices=("raw", "raw_ext"), default="raw")
    p.add_argument("--parts", type=int, default=2,
                   help="extension width for raw_ext")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("amalgamate", help="train the student from frozen teachers")
    p.add_argument("--teachers", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--mode", choices=tv.AMALGAMATION_MODES, default="sa+ta")
    p.add_argument("--compress", choices=("none", "isometric", "random", "redundancy"),
                   default="none")
    p.add_argument("--label-free", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_amalgamate)

    p = sub.add_parser("evaluate", help="COCO-style AP report for a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", help="write the full report JSON here")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze-redundancy",
                       help="histogram of extended-sequence token redundancy")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="destination CSV")
    _add_common(p)
    p.set_defaults(func=cmd_analyze_redundancy)

    p = sub.add_parser("ablate", help="run an ablation suite end to end")
    p.add_argument("--suite", choices=("table4", "compression"), default="table4")
    p.add_argument("--train-data", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--epochs", type=int)
    p.add_argument("--teachers", nargs="*", default=None,
                   help="pretrained teacher checkpoints (default: train them)")
    p.add_argument("--teacher-count", type=int, default=2)
    p.add_argument("--workers", type=int, default=1,
                   help="parallel run replicas (KASEQ_THREADS overrides)")
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, ContractError, ShapeError) as e:
        print(f"invalid request: {e}", file=sys.stderr)
        return 1
    except DataFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
