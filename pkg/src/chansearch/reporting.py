"""Run outputs: metrics table, selector trajectories, resize log and the exported spec."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

from .dynalloc import ResizeEvent
from .search import EpochReport
from .supernet import ArchitectureSpec

METRIC_COLUMNS = ["epoch", "train_loss", "search_loss", "expected_flops", "param_count", "tau",
                  "dropout", "lr", "arch_active", "resize_count", "resize_events"]
ALPHA_COLUMNS = ["epoch", "stage", "kind", "channels", "alpha", "weight", "mu"]
EVENT_COLUMNS = ["epoch", "stage", "old_F", "new_F", "direction"]


def _out(out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not out.is_dir():
        raise NotADirectoryError(out)
    return out


def metric_columns(num_stages: int) -> list[str]:
    per_stage = [f"stage{i}_{k}" for i in range(num_stages) for k in ("state", "fmax")]
    return METRIC_COLUMNS + per_stage


def emit_metrics(reports: Sequence[EpochReport], out_dir: str | Path, name: str = "metrics.csv") -> Path:
    """One row per epoch.  Wall-clock time is left out so reruns compare byte for byte."""
    if not reports:
        raise ValueError("no epoch reports to write")
    n = len(reports[0].stage_state)
    path = _out(out_dir) / name
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(metric_columns(n))
        for r in reports:
            detail = ";".join(f"{e['stage']}:{e['old_F']}->{e['new_F']}" for e in r.events)
            row = [r.epoch, repr(r.train_loss), repr(r.search_loss), repr(r.expected_flops), r.param_count,
                   repr(r.tau), repr(r.dropout), repr(r.lr), int(r.arch_active), len(r.events), detail]
            for s, f in zip(r.stage_state, r.stage_fmax):
                row += [repr(float(s)), f]
            w.writerow(row)
    return path


def emit_plotdata(reports: Sequence[EpochReport], out_dir: str | Path, name: str = "alphas.csv") -> Path:
    """Per epoch, stage and option: raw selector score and normalised weight."""
    if not reports:
        raise ValueError("no epoch reports to write")
    path = _out(out_dir) / name
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ALPHA_COLUMNS)
        w.writeheader()
        for r in reports:
            for row in r.alphas:
                w.writerow({**row, "mu": "" if row["mu"] is None else repr(row["mu"]),
                            "alpha": repr(row["alpha"]), "weight": repr(row["weight"])})
    return path


def emit_events(events: Sequence[ResizeEvent | dict], out_dir: str | Path, name: str = "events.csv") -> Path:
    path = _out(out_dir) / name
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, EVENT_COLUMNS)
        w.writeheader()
        for e in events:
            w.writerow(e.row() if isinstance(e, ResizeEvent) else e)
    return path


def emit_spec(spec: ArchitectureSpec, out_dir: str | Path, name: str = "arch.json") -> Path:
    path = _out(out_dir) / name
    path.write_text(spec.to_json())
    return path


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
