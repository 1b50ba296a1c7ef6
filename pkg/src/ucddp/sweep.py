"""Batch-size sweep orchestration and report arithmetic."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Optional

from .data import load_dataset
from .ddp import WorldConfig, global_batch
from .errors import ParseError, ValidationError
from .evaluation import RESULT_COLUMNS, EvalResult, TrainConfig, append_results, evaluate, train_victim
from .pipeline import UCConfig, build_clusters, poison_dataset, train_uc

log = logging.getLogger(__name__)

DEFAULT_BATCH_GRID = [32, 64, 128, 256, 512, 1024]
EXTERNAL_COLUMNS = ["dataset", "batch", "accuracy", "clean"]


@dataclass
class BoxStats:
    batch: Optional[int]
    min: object
    q1: object
    median: object
    q3: object
    max: object
    n: int = 0

    def to_dict(self) -> dict:
        doc = asdict(self)
        for key in ("min", "q1", "median", "q3", "max"):
            if isinstance(doc[key], Decimal):
                doc[key] = str(doc[key])
        return doc


def _quantile(ordered: list, num: int, den: int):
    # linear interpolation at rank (n-1)·num/den, kept exact for Decimal input
    whole, rem = divmod((len(ordered) - 1) * num, den)
    if rem == 0:
        return ordered[whole]
    lo, hi = ordered[whole], ordered[whole + 1]
    if isinstance(lo, Decimal):
        # weighted sum over one division keeps the natural exponent: (60.71+62.49)/2 -> 61.60
        return (lo * (den - rem) + hi * rem) / Decimal(den)
    return lo + (hi - lo) * (rem / den)


def box_stats(values, batch: Optional[int] = None) -> BoxStats:
    """Five-number summary; quartiles by linear interpolation on the sorted sample."""
    ordered = sorted(values)
    if not ordered:
        raise ValidationError("box_stats needs at least one value")
    return BoxStats(
        batch,
        ordered[0],
        _quantile(ordered, 1, 4),
        _quantile(ordered, 1, 2),
        _quantile(ordered, 3, 4),
        ordered[-1],
        len(ordered),
    )


# ------------------------------------------------------------------ sweep


@dataclass
class SweepConfig:
    dataset: dict = field(default_factory=lambda: {"kind": "synth"})
    batch_grid: list = field(default_factory=lambda: list(DEFAULT_BATCH_GRID))
    world_size: int = 4
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    uc: dict = field(default_factory=dict)
    victim: dict = field(default_factory=dict)
    out_dir: str = "sweep-out"
    reduce_order: str = "rank-sequential"
    lanes: str = "threads"

    def __post_init__(self):
        if not self.batch_grid or min(self.batch_grid) < 1:
            raise ValidationError("batch_grid must be nonempty with entries >= 1")
        if not self.seeds:
            raise ValidationError("seeds must be nonempty")
        if self.world_size < 1:
            raise ValidationError("world_size must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "SweepConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown sweep keys: {sorted(unknown)}")
        return cls(**doc)

    def world(self, batch: int) -> WorldConfig:
        return WorldConfig(self.world_size, batch, self.reduce_order, self.lanes)


def read_results(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if header != RESULT_COLUMNS:
            raise ParseError(f"{path}: header {header} is not {RESULT_COLUMNS}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(RESULT_COLUMNS):
                raise ParseError(f"{path}:{lineno}: expected {len(RESULT_COLUMNS)} fields, got {len(row)}")
            try:
                rows.append(EvalResult(row[0], row[1], int(row[2]), int(row[3]), int(row[4]), float(row[5]), int(row[6])))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return rows


def run_cell(train, test, cfg: SweepConfig, batch: int, seed: int, clusters_cache: dict) -> list:
    world = cfg.world(batch)
    ucfg = UCConfig.from_dict({**cfg.uc, "seed": seed})
    ucfg.world = world
    if seed not in clusters_cache:
        clusters_cache[seed] = build_clusters(train, ucfg)
    clusters = clusters_cache[seed]
    art = train_uc(train, clusters, ucfg)
    poisoned = poison_dataset(train, clusters, art.generator)

    vcfg = TrainConfig.from_dict({**cfg.victim, "seed": seed})
    vcfg.world = world
    out = []
    for variant, data in (("clean", train), ("poisoned", poisoned)):
        acc = evaluate(train_victim(data, vcfg), test)
        out.append(EvalResult(train.name, variant, batch, world.global_batch, seed, acc, vcfg.steps))
    return out


def run_sweep(cfg: SweepConfig, resume: bool = False, plot_data: bool = False) -> dict:
    """Run every (batch, seed) cell; write results, stats, curve (and plot) files.

    A failing cell is logged to ``failures.csv`` and the sweep moves on.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results_path = out / "results.csv"
    failures_path = out / "failures.csv"
    if not resume:
        for p in (results_path, failures_path):
            if p.exists():
                p.unlink()
    done = {(r.per_worker_batch, r.seed, r.variant) for r in read_results(results_path)}

    train, test = load_dataset(cfg.dataset)
    if test is None:
        raise ValidationError("sweep needs a test split")
    cache: dict = {}
    for batch in cfg.batch_grid:
        for seed in cfg.seeds:
            if (batch, seed, "clean") in done and (batch, seed, "poisoned") in done:
                continue
            try:
                rows = run_cell(train, test, cfg, batch, seed, cache)
            except Exception as exc:  # per-cell isolation
                log.exception("cell batch=%s seed=%s failed", batch, seed)
                new = not failures_path.exists()
                with open(failures_path, "a", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    if new:
                        w.writerow(["dataset", "per_worker_batch", "seed", "error"])
                    w.writerow([train.name, batch, seed, f"{type(exc).__name__}: {exc}"])
                continue
            append_results(results_path, rows)
            log.info("cell batch=%s seed=%s: clean=%.4f poisoned=%.4f", batch, seed, rows[0].accuracy, rows[1].accuracy)

    if not results_path.exists():
        append_results(results_path, [])
    return write_reports(results_path, out, plot_data)


def sweep_stats(rows: list) -> dict:
    """BoxStats per variant and per-worker batch, in ascending batch order."""
    stats = {}
    for variant in ("clean", "poisoned"):
        batches = sorted({r.per_worker_batch for r in rows if r.variant == variant})
        stats[variant] = [box_stats([r.accuracy for r in rows if r.variant == variant and r.per_worker_batch == b], b) for b in batches]
    return stats


def curve_rows(rows: list) -> list:
    out = []
    for variant in ("clean", "poisoned"):
        for b in sorted({r.per_worker_batch for r in rows if r.variant == variant}):
            cell = [r for r in rows if r.variant == variant and r.per_worker_batch == b]
            accs = [r.accuracy for r in cell]
            out.append([variant, b, cell[0].global_batch, repr(sum(accs) / len(accs)), repr(min(accs)), repr(max(accs)), len(accs)])
    return out


def write_reports(results_path, out_dir, plot_data: bool = False) -> dict:
    rows = read_results(results_path)
    out = Path(out_dir)
    stats = sweep_stats(rows)
    stats_doc = {variant: [s.to_dict() for s in lst] for variant, lst in stats.items()}
    (out / "stats.json").write_text(json.dumps(stats_doc, indent=2, sort_keys=True) + "\n")
    curve = curve_rows(rows)
    with open(out / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "per_worker_batch", "global_batch", "mean", "min", "max", "n"])
        w.writerows(curve)
    paths = {"results": out / "results.csv", "stats": out / "stats.json", "curve": out / "curve.csv"}
    if plot_data:
        doc = {
            "box": stats_doc,
            "curve": [dict(zip(["variant", "per_worker_batch", "global_batch", "mean", "min", "max", "n"], c)) for c in curve],
        }
        (out / "plot_data.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        paths["plot_data"] = out / "plot_data.json"
    return paths


def summarize_sweep(rows: list) -> dict:
    """Per dataset: mean accuracy per batch and variant, gap, and strongest-protection batch."""
    summary = {}
    for name in sorted({r.dataset for r in rows}):
        mine = [r for r in rows if r.dataset == name]
        per_batch = {}
        for b in sorted({r.per_worker_batch for r in mine}):
            means = {}
            for variant in ("clean", "poisoned"):
                accs = [r.accuracy for r in mine if r.per_worker_batch == b and r.variant == variant]
                if accs:
                    means[variant] = sum(accs) / len(accs)
            if len(means) == 2:
                means["gap"] = means["clean"] - means["poisoned"]
            per_batch[b] = means
        poisoned = {b: m["poisoned"] for b, m in per_batch.items() if "poisoned" in m}
        best = min(poisoned, key=lambda b: (poisoned[b], b)) if poisoned else None
        summary[name] = {"per_batch": per_batch, "best_batch": best, "best_accuracy": poisoned.get(best)}
    return summary


# ---------------------------------------------------------- external table


def ingest_external_results(path) -> dict:
    """Summarize a ``dataset,batch,accuracy,clean`` CSV with exact decimal arithmetic.

    For each dataset: the batch with minimum accuracy (first such row on
    ties), that accuracy, gap = clean − min, and box stats over its rows.
    """
    path = Path(path)
    grouped: dict = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != EXTERNAL_COLUMNS:
            raise ParseError(f"{path}:1: header must be {','.join(EXTERNAL_COLUMNS)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            name, batch, acc, clean = (c.strip() for c in row)
            try:
                rec = (int(batch), Decimal(acc), Decimal(clean))
            except (ValueError, InvalidOperation):
                raise ParseError(f"{path}:{lineno}: cannot parse batch/accuracy/clean from {row}") from None
            if not rec[1].is_finite() or not rec[2].is_finite():
                raise ParseError(f"{path}:{lineno}: accuracy and clean must be finite numbers")
            grouped.setdefault(name, []).append(rec)

    summary = {}
    for name, recs in grouped.items():
        best_batch, best_acc, clean = recs[0]
        for batch, acc, c in recs[1:]:
            if acc < best_acc:
                best_batch, best_acc, clean = batch, acc, c
        summary[name] = {
            "best_batch": best_batch,
            "min_accuracy": best_acc,
            "clean": clean,
            "gap": clean - best_acc,
            "box": box_stats([acc for _, acc, _ in recs]),
        }
    return summary


def external_summary_json(summary: dict) -> dict:
    return {
        name: {
            "best_batch": s["best_batch"],
            "min_accuracy": str(s["min_accuracy"]),
            "clean": str(s["clean"]),
            "gap": str(s["gap"]),
            "box": s["box"].to_dict(),
        }
        for name, s in summary.items()
    }


def reference_global_batches(world_size: int = 48) -> list:
    return [global_batch(b, world_size) for b in DEFAULT_BATCH_GRID]
