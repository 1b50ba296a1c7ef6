"""Command-line front end.

    ucddp cluster   --config cfg.json --out-dir run/
    ucddp train-uc  --config cfg.json --out-dir run/ [--clusters run/clusters.json] [--trace]
    ucddp poison    --config cfg.json --clusters run/clusters.json --generator run/generator.ckpt
    ucddp eval      --config cfg.json [--train-images ... --train-labels ...] [--variant poisoned]
    ucddp sweep     --config cfg.json --out-dir sweep/ [--resume] [--plot-data]
    ucddp report    --input sweep/results.csv

The config document may hold ``dataset``, ``uc``, ``victim`` and ``sweep``
sections; absent keys take library defaults. Exit status is 0 on success,
1 on validation errors and 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .clustering import ClusterAssignment
from .data import ImageDataset, load_dataset, load_idx, write_idx
from .errors import NonFiniteLossError, ValidationError
from .evaluation import EvalResult, TrainConfig, append_results, evaluate, train_victim
from .models import load_checkpoint
from .pipeline import UCConfig, build_clusters, poison_dataset, train_uc
from .sweep import SweepConfig, external_summary_json, ingest_external_results, read_results, run_sweep, summarize_sweep

log = logging.getLogger("ucddp")


def _load_config(args) -> dict:
    if not args.config:
        return {}
    try:
        doc = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{args.config}: {exc}") from None
    if not isinstance(doc, dict):
        raise ValidationError(f"{args.config}: top level must be an object")
    return doc


def _with_world(section: dict, args) -> dict:
    section = dict(section)
    if args.seed is not None:
        section["seed"] = args.seed
    if args.world_size is not None:
        section["world"] = {**section.get("world", {}), "world_size": args.world_size}
    return section


def _train_split(doc: dict, args) -> tuple:
    images = getattr(args, "images", None) or getattr(args, "train_images", None)
    if images:
        labels = getattr(args, "labels", None) or getattr(args, "train_labels", None)
        train = load_idx(images, labels)
        test = None
        if getattr(args, "test_images", None):
            test = load_idx(args.test_images, args.test_labels)
        return train, test
    return load_dataset(doc.get("dataset", {"kind": "synth"}))


class _TraceWriter:
    def __init__(self, path):
        self.fh = open(path, "w")

    def __call__(self, trace):
        self.fh.write(trace.to_json() + "\n")

    def close(self):
        self.fh.close()


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_cluster(args) -> int:
    doc = _load_config(args)
    cfg = UCConfig.from_dict(_with_world(doc.get("uc", {}), args))
    train, _ = _train_split(doc, args)
    clusters = build_clusters(train, cfg)
    path = _out(args) / "clusters.json"
    clusters.save(path)
    print(json.dumps({"clusters": str(path), "k": clusters.k, "inertia": clusters.inertia, "pi": clusters.pi.tolist()}))
    return 0


def cmd_train_uc(args) -> int:
    doc = _load_config(args)
    cfg = UCConfig.from_dict(_with_world(doc.get("uc", {}), args))
    train, _ = _train_split(doc, args)
    clusters = ClusterAssignment.load(args.clusters) if args.clusters else build_clusters(train, cfg)
    out = _out(args)
    sink = _TraceWriter(out / "trace.ndjson") if args.trace else None
    try:
        art = train_uc(train, clusters, cfg, trace_sink=sink)
    except NonFiniteLossError as exc:
        if sink:
            for trace in exc.trace:
                sink(trace)  # the aborted step, which never reached the sink
        raise
    finally:
        if sink:
            sink.close()
    paths = art.save(out)
    print(json.dumps({"surrogate_accuracy": art.surrogate_accuracy, **{k: str(v) for k, v in paths.items()}}))
    return 0


def cmd_poison(args) -> int:
    doc = _load_config(args)
    train, _ = _train_split(doc, args)
    clusters = ClusterAssignment.load(args.clusters)
    generator = load_checkpoint(args.generator)
    poisoned = poison_dataset(train, clusters, generator)
    out = _out(args)
    images_path = out / "poisoned-images-idx3-ubyte"
    labels_path = out / "poisoned-labels-idx1-ubyte" if poisoned.labels is not None else None
    write_idx(poisoned, images_path, labels_path)
    print(json.dumps({"images": str(images_path), "labels": str(labels_path) if labels_path else None}))
    return 0


def cmd_eval(args) -> int:
    doc = _load_config(args)
    victim = _with_world(doc.get("victim", {}), args)
    if args.batch is not None:
        victim["world"] = {**victim.get("world", {}), "per_worker_batch": args.batch}
    cfg = TrainConfig.from_dict(victim)
    train, test = _train_split(doc, args)
    if test is None:
        raise ValidationError("eval needs a test split (--test-images/--test-labels or a config dataset)")
    model = train_victim(train, cfg)
    acc = evaluate(model, test)
    result = EvalResult(train.name, args.variant, cfg.world.per_worker_batch, cfg.world.global_batch, cfg.seed, acc, cfg.steps)
    append_results(_out(args) / "results.csv", [result])
    print(json.dumps({"accuracy": acc, "variant": args.variant, "global_batch": cfg.world.global_batch}))
    return 0


def cmd_sweep(args) -> int:
    doc = _load_config(args)
    sweep = dict(doc.get("sweep", {}))
    sweep.setdefault("dataset", doc.get("dataset", {"kind": "synth"}))
    sweep.setdefault("uc", doc.get("uc", {}))
    sweep.setdefault("victim", doc.get("victim", {}))
    sweep["out_dir"] = args.out_dir
    if args.world_size is not None:
        sweep["world_size"] = args.world_size
    if args.seed is not None:
        sweep["seeds"] = [args.seed]
    cfg = SweepConfig.from_dict(sweep)
    paths = run_sweep(cfg, resume=args.resume, plot_data=args.plot_data)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return 0


def cmd_report(args) -> int:
    path = Path(args.input)
    with open(path) as fh:
        header = fh.readline().strip()
    if header.startswith("dataset,variant"):
        doc = summarize_sweep(read_results(path))
    else:
        doc = external_summary_json(ingest_external_results(path))
    text = json.dumps(doc, indent=2, sort_keys=True, default=str)
    (_out(args) / "report.json").write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config document")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--world-size", type=int, default=None)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--trace", action="store_true", help="write per-step NDJSON trace")
    common.add_argument("--resume", action="store_true", help="skip sweep cells already in results.csv")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ucddp", description="Unlearnable-cluster poisoning under simulated data-parallel training.")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p, prefix=""):
        p.add_argument(f"--{prefix}images", help="IDX3 image file (overrides config dataset)")
        p.add_argument(f"--{prefix}labels", help="IDX1 label file")

    p = sub.add_parser("cluster", parents=[common], help="k-means + label derangement")
    data_args(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train-uc", parents=[common], help="co-train surrogate and generator")
    data_args(p)
    p.add_argument("--clusters", help="clusters.json from `cluster` (recomputed if absent)")
    p.set_defaults(func=cmd_train_uc)

    p = sub.add_parser("poison", parents=[common], help="write the poisoned dataset as IDX")
    data_args(p)
    p.add_argument("--clusters", required=True)
    p.add_argument("--generator", required=True)
    p.set_defaults(func=cmd_poison)

    p = sub.add_parser("eval", parents=[common], help="train a victim and measure clean-test accuracy")
    data_args(p, "train-")
    data_args(p, "test-")
    p.add_argument("--variant", choices=["clean", "poisoned"], default="clean")
    p.add_argument("--batch", type=int, default=None, help="per-worker batch size")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="run the batch-size sweep")
    p.add_argument("--plot-data", action="store_true", help="also emit plot_data.json")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", parents=[common], help="summarize a results CSV")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; usage errors are validation errors here
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
