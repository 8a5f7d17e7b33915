"""Command line: ``fusefl partition | run | probe | report``.

Exit codes: 0 ok, 1 runtime failure, 2 configuration error. Diagnostics are a
single line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from .checkpoint import checkpoint_load, checkpoint_save
from .data import Dataset, Partition, concat, dirichlet_partition, load_idx, load_idx_labels, synth_sem
from .errors import ConfigError, FuseFLError
from .federation import run, run_lr_grid
from .probes import run_probes

METRIC_COLUMNS = ("phase", "stage_or_round", "client", "epoch", "train_loss", "train_acc")
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


# ----------------------------------------------------------------------------
# partition files

def write_partition(part: Partition, labels: np.ndarray, num_classes: int, out: Path) -> None:
    """One ``client_NNN.txt`` index list per client plus ``histogram.csv`` and ``partition.json``."""
    out.mkdir(parents=True, exist_ok=True)
    for m, idx in enumerate(part.client_indices):
        (out / f"client_{m:03d}.txt").write_text("".join(f"{i}\n" for i in idx))
    hist = part.histograms(labels, num_classes)
    with open(out / "histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client", *(f"class_{c}" for c in range(num_classes)), "total"])
        for m, row in enumerate(hist):
            w.writerow([m, *row.tolist(), int(row.sum())])
    _dump_json({"alpha": part.alpha, "seed": part.seed, "attempts": part.attempts, "scheme": part.scheme,
                "num_clients": part.num_clients, "num_samples": int(len(labels))}, out / "partition.json")


def read_partition(directory) -> list[np.ndarray]:
    files = sorted(Path(directory).glob("client_*.txt"))
    if not files:
        raise ConfigError(f"no client_*.txt files in {directory}")
    return [np.loadtxt(f, dtype=np.int64, ndmin=1) for f in files]


# ----------------------------------------------------------------------------
# data for a run

def load_data(rc_table: dict) -> tuple[list[Dataset], Dataset | None, config_mod.RunConfig]:
    """Client datasets, optional test set and the resolved config."""
    t = rc_table
    if t["data.source"] == "sem":
        rc = config_mod.resolve(t)
        clients, test = synth_sem(rc.sem, rc.seed)
        return clients, test, rc
    if not t["data.train_images"] or not t["data.train_labels"]:
        raise ConfigError("data.source = idx needs data.train_images and data.train_labels")
    train = load_idx(t["data.train_images"], t["data.train_labels"])
    test = None
    if t["data.test_images"] and t["data.test_labels"]:
        test = load_idx(t["data.test_images"], t["data.test_labels"], train.num_classes)
    rc = config_mod.resolve(t, train.inputs.shape[1:], train.num_classes)
    if t["data.partition_dir"]:
        indices = read_partition(t["data.partition_dir"])
        if len(indices) != rc.fed.num_clients:
            raise ConfigError(f"partition has {len(indices)} clients, fed.num_clients is {rc.fed.num_clients}")
    else:
        indices = dirichlet_partition(train, rc.fed.num_clients, t["data.alpha"], rc.seed,
                                      t["data.min_per_client"]).client_indices
    return [train.subset(i) for i in indices], test, rc


# ----------------------------------------------------------------------------
# subcommands

def cmd_partition(args) -> int:
    if not args.alpha > 0:
        raise ConfigError("alpha must be positive")
    labels = load_idx_labels(args.dataset)
    c = int(labels.max()) + 1
    part = dirichlet_partition(labels, args.clients, args.alpha, args.seed, args.min_per_client)
    write_partition(part, labels, c, Path(args.out))
    print(f"wrote {part.num_clients} client index files to {args.out}")
    return EXIT_OK


def write_metrics(records, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])


def cmd_run(args) -> int:
    table = config_mod.load(args.config, args.set)
    out = Path(args.out) if args.out else Path(table["run.output_dir"]) / table["run.name"]
    clients, test, rc = load_data(table)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    summary: dict = {"name": rc.name, "seed": rc.seed, "config": config_mod.as_dict(rc.table), "partial": True}
    grid = rc.learning_rates
    try:
        if grid:
            if test is None:
                raise ConfigError("a learning-rate grid needs a test set")
            lr, metrics, model, table_lr = run_lr_grid(rc.fed, clients, test, grid)
            summary["lr_grid"] = {repr(k): v for k, v in table_lr.items()}
            summary["selected_learning_rate"] = lr
        else:
            metrics, model = run(rc.fed, clients, test)
    except ConfigError:
        raise
    except (FuseFLError, ArithmeticError, ValueError) as exc:
        summary["error"] = f"{type(exc).__name__}: {exc}"
        summary["timing"] = {"wall_seconds": time.time() - started}
        _dump_json(summary, out / "summary.json")
        raise
    write_metrics(metrics.records, out / "metrics.csv")
    ckpt_bytes = checkpoint_save(model, out / "model.ckpt", extra={"algorithm": metrics.algorithm})
    summary.update({
        "algorithm": metrics.algorithm,
        "test_accuracy": None if test is None else metrics.test_accuracy,
        "comm_bytes": metrics.comm_bytes,
        "storage_bytes": metrics.storage_bytes,
        "param_counts": metrics.param_counts,
        "checkpoint_bytes": ckpt_bytes,
        "client_accuracy": metrics.client_accuracy,
        "freeze_audit": [list(a) for a in metrics.freeze_audit],
        "notes": metrics.notes,
        "metadata": metrics.metadata,
        "partial": False,
        "timing": {"wall_seconds": time.time() - started},
    })
    _dump_json(summary, out / "summary.json")
    acc = "n/a" if test is None else f"{metrics.test_accuracy:.4f}"
    print(f"{metrics.algorithm}: test accuracy {acc}, comm {metrics.comm_bytes:.0f} B -> {out}")
    return EXIT_OK


def cmd_probe(args) -> int:
    table = config_mod.load(args.config, args.set)
    clients, test, rc = load_data(table)
    if test is None:
        raise ConfigError("probing needs a test set")
    model = checkpoint_load(args.checkpoint)
    stages = [int(s) for s in args.stages.split(",")] if args.stages else None
    res = run_probes(model, concat(clients), test, rc.probe, stages)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "metric", "value"])
        for row in res.rows():
            w.writerow([row[0], row[1], _fmt(float(row[2]))])
    print(f"wrote {len(res.rows())} probe rows to {out} (label entropy {res.label_entropy:.4f} nats)")
    return EXIT_OK


def collect(run_dirs) -> list[dict]:
    rows = []
    for d in run_dirs:
        d = Path(d)
        s = json.loads((d / "summary.json").read_text())
        row = {
            "run": s.get("name", d.name),
            "algorithm": s.get("algorithm", s["config"]["fed.algorithm"]),
            "seed": s.get("seed"),
            "test_accuracy": s.get("test_accuracy"),
            "comm_mb": None if "comm_bytes" not in s else s["comm_bytes"] / 1e6,
            "storage_mb": None if "storage_bytes" not in s else s["storage_bytes"] / 1e6,
            "partial": s.get("partial", False),
        }
        probes = d / "probes.csv"
        if probes.exists():
            with open(probes) as fh:
                recs = list(csv.DictReader(fh))
            deepest = max(int(r["stage"]) for r in recs)
            for r in recs:
                if int(r["stage"]) == deepest:
                    row[f"{r['metric']}@{deepest}"] = float(r["value"])
        rows.append(row)
    return rows


def cmd_report(args) -> int:
    rows = collect(args.runs)
    cols = list(dict.fromkeys(k for r in rows for k in r))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, cols, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)

    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return "" if v is None else str(v)

    widths = [max(len(c), *(len(cell(r.get(c))) for r in rows)) for c in cols]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for r in rows:
        print("  ".join(cell(r.get(c)).ljust(w) for c, w in zip(cols, widths)))
    return EXIT_OK


# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusefl", description="One-shot federated learning experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("partition", help="Dirichlet label-skew split of an IDX label file")
    s.add_argument("--dataset", required=True, help="IDX labels file (optionally .gz)")
    s.add_argument("--clients", type=int, required=True)
    s.add_argument("--alpha", type=float, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-per-client", type=int, default=256)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_partition)

    s = sub.add_parser("run", help="train one configuration")
    s.add_argument("config", nargs="?", help="config file of key = value lines")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    s.add_argument("--out", help="output directory (default run.output_dir/run.name)")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("probe", help="representation probes on a saved checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--config", help="config describing the data the model was trained on")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--stages", help="comma-separated stages (default all)")
    s.add_argument("--out", default="probes.csv")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("report", help="tabulate finished runs")
    s.add_argument("runs", nargs="+", help="run directories holding summary.json")
    s.add_argument("--csv", help="also write the table as CSV")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"fusefl {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FuseFLError, OSError, ArithmeticError, ValueError, KeyError) as exc:
        print(f"fusefl {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
