"""
Command-line entry point.

    python code/setmix.py gen-data --out runs/data
    python code/setmix.py config --preset desk --out runs/desk.json
    python code/setmix.py train --data runs/data --config runs/desk.json --out runs/desk.ckpt
    python code/setmix.py corrupt --in runs/data --out runs/corrupt
    python code/setmix.py eval --ckpt runs/desk.ckpt --data runs/data \
        --corrupt-manifest runs/corrupt/corruption_manifest.json --out runs/report.json
"""

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from typing import List

import config
from corrupt import KINDS, CorruptionKind, corruption_suite
from data_synth import FAMILIES, make_dataset
from errors import ChecksumMismatchError, DataFormatError, SetMixError
from evaluation import (MetricsReport, benchmark, compare_reports, feature_diff,
                        load_corruption_cells, render_table, replay_table)
from geom import PointCloud, normalize
from report_utils import render_dict_as_bullets, render_frame
from setmixer_model import (AggregatorKind, ModelConfig, SetMixerClassifier,
                            build_config, gradcheck_model)
from storage import (RunManifest, atomic_write_bytes, dataset_hash, load_checkpoint,
                     load_json, load_split, read_pcf, restore_model, save_checkpoint,
                     save_json, write_pcf, write_run_manifest)
from tensor_nn import make_rng
from training import TrainingParams, train

logger = logging.getLogger("setmix")


class UsageError(Exception):
    """Bad command-line input detected after parsing."""


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _load_config(path) -> ModelConfig:
    if not os.path.exists(path):
        raise UsageError(f"config file {path} does not exist")
    data = load_json(path)
    try:
        return ModelConfig.from_dict(data)
    except (KeyError, TypeError, ValueError) as e:
        raise DataFormatError(f"{path}: not a model config ({e})") from e


# ---------------------------
# Commands
# ---------------------------

def cmd_gen_data(args):
    families = _csv_list(args.families)
    unknown = [f for f in families if f not in {x.value for x in FAMILIES}]
    if unknown:
        raise UsageError(f"unknown families: {', '.join(unknown)}")
    make_dataset(families, args.train_per_class, args.test_per_class,
                 base_seed=args.seed, points=args.points, jitter=args.jitter,
                 out_dir=args.out)
    print(os.path.join(args.out, config.DATASET_MANIFEST))
    return config.EXIT_OK


def _corrupt_one(job):
    index, row_path, cloud, kinds, severities, seed, out_dir = job
    entries = []
    stem = os.path.splitext(os.path.basename(row_path))[0]
    for spec, corrupted in corruption_suite(cloud, seed, index, kinds, severities):
        relative = os.path.join(spec.kind.value, str(spec.severity), f"{stem}.pcf")
        write_pcf(corrupted, os.path.join(out_dir, relative))
        entries.append({"cloud_id": row_path, "kind": spec.kind.value,
                        "severity": spec.severity, "seed": spec.seed,
                        "output_path": relative})
    return entries


def cmd_corrupt(args):
    if not os.path.isdir(args.input):
        raise UsageError(f"dataset directory {args.input} does not exist")
    kinds = [CorruptionKind(k) for k in args.kinds]
    clouds, frame = load_split(args.input, args.split)
    jobs = [(i, path, cloud, kinds, args.severities, args.seed, args.out)
            for i, (path, cloud) in enumerate(zip(frame["path"], clouds))]
    with ThreadPoolExecutor(max_workers=config.THREADS) as pool:
        entries = [e for batch in pool.map(_corrupt_one, jobs) for e in batch]
    manifest_path = os.path.join(args.out, config.CORRUPTION_MANIFEST)
    manifest = {"base_seed": args.seed, "source": os.path.abspath(args.input),
                "kinds": [k.value for k in kinds], "severities": args.severities,
                "entries": entries}
    if not save_json(manifest, manifest_path):
        return config.EXIT_DATA
    logger.info(f"Wrote {len(entries)} corrupted clouds")
    print(manifest_path)
    return config.EXIT_OK


def cmd_config(args):
    cfg = build_config(preset=args.preset, aggregator=args.aggregator, plan=args.plan,
                       center_mode=args.center_mode, dropout=args.dropout,
                       layer_norm=not args.no_layer_norm,
                       legacy_centering=args.legacy_centering,
                       num_classes=args.num_classes, mixer_d=args.mixer_d)
    model = SetMixerClassifier(cfg)
    if not save_json(cfg.to_dict(), args.out):
        return config.EXIT_DATA
    print(render_dict_as_bullets({
        "config": args.out,
        "config_hash": cfg.config_hash,
        "parameters": model.num_parameters,
        "levels": [f"SA({l.m_sets}, {l.k}, {list(l.t_channels)}, "
                   f"{l.aggregator.kind.value}) -> {l.out_channels}"
                   for l in cfg.sa_layers],
    }), end="")
    return config.EXIT_OK


def cmd_train(args):
    if not os.path.isdir(args.data):
        raise UsageError(f"dataset directory {args.data} does not exist")
    cfg = _load_config(args.config)
    clouds, _ = load_split(args.data, "train")
    labels = [c.label for c in clouds]
    params = TrainingParams(epochs=args.epochs, batch_size=args.batch_size,
                            learning_rate=args.lr, seed=args.seed)

    model = SetMixerClassifier(cfg, seed=args.seed)
    out_base = os.path.splitext(args.out)[0]
    manifest_path = f"{out_base}.{config.RUN_MANIFEST}"
    log_path = f"{out_base}.log.csv"
    result = train(model, clouds, labels, params, log_path=log_path)

    save_checkpoint(args.out, model, result.optimizer, epoch=args.epochs,
                    extra={"run_manifest": manifest_path})
    manifest = RunManifest(
        command="train",
        config_hash=cfg.config_hash,
        dataset_hash=dataset_hash(args.data),
        seeds={"init": args.seed, "shuffle": args.seed},
        hyperparameters=params.to_dict(),
        wall_clock_seconds=result.wall_clock_seconds,
        metrics_paths=[log_path] if args.epochs > 0 else [],
    )
    write_run_manifest(manifest, manifest_path)
    if result.final_accuracy is not None:
        logger.info(f"Final train accuracy {result.final_accuracy:.3f}")
    print(args.out)
    return config.EXIT_OK


def cmd_eval(args):
    if args.replay:
        frame = replay_table()
        print(render_frame(
            frame[["model", "er_clean", "er_noise", "rmce", "rmce_replayed", "rmce_delta"]],
            {"rmce_replayed": 3, "rmce_delta": 3}))
        worst = float(frame["rmce_delta"].max())
        return config.EXIT_OK if worst <= 0.01 + 1e-9 else config.EXIT_VERIFICATION

    for flag in ("ckpt", "data", "corrupt_manifest", "out"):
        if getattr(args, flag) is None:
            raise UsageError(f"--{flag.replace('_', '-')} is required unless --replay")
    if not os.path.isdir(args.data):
        raise UsageError(f"dataset directory {args.data} does not exist")
    expected = _load_config(args.config).config_hash if args.config else None
    checkpoint = load_checkpoint(args.ckpt)
    model = restore_model(checkpoint, expected)
    clean, _ = load_split(args.data, args.split)
    cells = load_corruption_cells(args.corrupt_manifest)

    report = benchmark(model, clean, cells, args.bm_noise, args.bm_clean)
    report.run_manifest = checkpoint.meta.get("run_manifest", "")
    if not report.audit():
        return config.EXIT_VERIFICATION
    if not save_json(report.to_dict(), args.out):
        return config.EXIT_DATA
    table = render_table({args.name: report})
    atomic_write_bytes(os.path.splitext(args.out)[0] + ".txt", (table + "\n").encode("utf-8"))
    print(table)
    return config.EXIT_OK


def cmd_gradcheck(args):
    cfg = _load_config(args.config)
    worst = 0.0
    for trial in range(args.trials):
        rng = make_rng(args.seed, trial)
        model = SetMixerClassifier(cfg, seed=args.seed + trial)
        clouds = [normalize(PointCloud(rng.normal(size=(args.points, 3))))
                  for _ in range(args.batch)]
        labels = rng.integers(0, cfg.head.num_classes, size=args.batch)
        report = gradcheck_model(model, clouds, labels, tolerance=args.tolerance,
                                 max_entries=args.max_entries or None,
                                 seed=args.seed + trial)
        worst = max(worst, report.max_rel_error)
        print(f"trial {trial + 1}: max rel. error {report.max_rel_error:.3e} "
              f"({report.worst_parameter}, {report.checked} entries)")
    passed = worst < args.tolerance
    print(f"{'PASS' if passed else 'FAIL'}: max rel. error {worst:.3e} "
          f"(tolerance {args.tolerance:g})")
    return config.EXIT_OK if passed else config.EXIT_VERIFICATION


def cmd_feature_diff(args):
    model = restore_model(load_checkpoint(args.ckpt))
    diff = feature_diff(model, read_pcf(args.clean), read_pcf(args.corrupted), args.level)
    frame = diff.to_frame()
    atomic_write_bytes(args.out, frame.to_csv(index=False).encode("utf-8"))
    logger.info(f"Level {args.level}: mean magnitude {frame['magnitude'].mean():.6f} "
                f"over {len(frame)} sets")
    print(args.out)
    return config.EXIT_OK


def cmd_compare(args):
    groups = {}
    for item in args.group:
        name, _, paths = item.partition("=")
        if not paths:
            raise UsageError(f"--group expects NAME=report.json[,report.json...], got {item}")
        groups[name] = [MetricsReport.from_dict(load_json(p)) for p in _csv_list(paths)]
    comparison = compare_reports(groups, reference=args.reference, baseline=args.baseline,
                                 no_sort=args.no_sort, query=args.query)
    print(render_frame(comparison.table, {"er_clean": 4, "er_noise": 4, "rmce": 3}))
    for check in comparison.checks:
        print(f"{check['status']:>12}  {check['check']}: {check['detail']}")
    if args.out:
        save_json({"table": comparison.table.to_dict(orient="records"),
                   "checks": comparison.checks}, args.out)
    return config.EXIT_VERIFICATION if comparison.failed else config.EXIT_OK


# ---------------------------
# Parser
# ---------------------------

def parse_args(sys_args: List[str]) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="setmix",
        description="Noise-robust point-set aggregation: data, training and robustness evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Generate the synthetic shape dataset")
    p.add_argument("--families", default=",".join(f.value for f in FAMILIES),
                   help="Comma-separated family names; labels follow this order")
    p.add_argument("--train-per-class", type=int, default=200)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--points", type=int, default=512)
    p.add_argument("--jitter", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    p.add_argument("--out", required=True, help="Output dataset directory")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("corrupt", help="Write corrupted copies of a dataset split")
    p.add_argument("--in", dest="input", required=True, help="Dataset directory")
    p.add_argument("--split", default="test")
    p.add_argument("--kinds", nargs="+", default=[k.value for k in KINDS],
                   choices=[k.value for k in KINDS])
    p.add_argument("--severities", nargs="+", type=int, default=list(config.SEVERITIES),
                   choices=list(config.SEVERITIES))
    p.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_corrupt)

    p = sub.add_parser("config", help="Write a model configuration")
    p.add_argument("--preset", choices=["desk", "canonical"], default="desk")
    p.add_argument("--aggregator", choices=[k.value for k in AggregatorKind],
                   default=AggregatorKind.SET_MIXER.value)
    p.add_argument("--plan", default="aps", help='Sort plan, e.g. "aps", "pcs", "aps+eds"')
    p.add_argument("--center-mode", choices=["spatial_center", "query_point"],
                   default="spatial_center")
    p.add_argument("--dropout", type=float, default=config.MIXER_DROPOUT)
    p.add_argument("--no-layer-norm", action="store_true")
    p.add_argument("--legacy-centering", action="store_true")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--mixer-d", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_config)

    p = sub.add_parser("train", help="Train a classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=config.BATCH_SIZE)
    p.add_argument("--lr", type=float, default=config.LEARNING_RATE)
    p.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    p.add_argument("--out", required=True, help="Checkpoint path")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="Benchmark a checkpoint on clean and corrupted data")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--corrupt-manifest")
    p.add_argument("--config", help="Require the checkpoint to match this config")
    p.add_argument("--bm-noise", type=float, default=config.BASELINE_NOISE)
    p.add_argument("--bm-clean", type=float, default=config.BASELINE_CLEAN)
    p.add_argument("--name", default="model", help="Row label in the text table")
    p.add_argument("--replay", action="store_true",
                   help="Recompute RmCE from the published error rates")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gradcheck", help="Finite-difference check of a configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--points", type=int, default=128)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--tolerance", type=float, default=config.GRADCHECK_TOLERANCE)
    p.add_argument("--max-entries", type=int, default=0,
                   help="Sampled coordinates per parameter tensor; 0 checks every coordinate")
    p.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("feature-diff", help="Per-set feature change under frozen grouping")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clean", required=True)
    p.add_argument("--corrupted", required=True)
    p.add_argument("--level", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_feature_diff)

    p = sub.add_parser("compare", help="Seed-averaged robustness ordering checks")
    p.add_argument("--group", action="append", required=True,
                   help="NAME=report.json[,report.json...]; repeatable")
    p.add_argument("--reference", default="set_mixer")
    p.add_argument("--baseline", default="max_pool")
    p.add_argument("--no-sort", default="mixer_no_sort")
    p.add_argument("--query", default="query_point")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_compare)

    return parser.parse_args(sys_args)


def main(sys_args: List[str]) -> int:
    args = parse_args(sys_args)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    start = time.perf_counter()
    try:
        code = args.handler(args)
    except UsageError as e:
        logger.error(str(e))
        return config.EXIT_USAGE
    except ChecksumMismatchError as e:
        logger.error(f"Verification failed: {e}")
        return config.EXIT_VERIFICATION
    except (SetMixError, KeyError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return config.EXIT_DATA
    logger.debug(f"{args.command} finished in {time.perf_counter() - start:.1f}s")
    return code


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
