"""Run outputs on disk and the cross-run comparison report.

Each run directory holds:

``metrics.csv``
    One row per round. Columns, in order: ``round``, ``accuracy``,
    ``clean_accuracy``, ``mean_noise_rate``, ``relabel_changed``,
    ``relabel_precision``, then ``noise_k<i>`` (label noise rate of client i)
    and ``alpha_k<i>`` (its aggregation weight) for every client. Values that
    do not exist for a round or method are written as ``—``; every other cell
    is a finite number.
``summary.json``
    Run identity (method, seed, noise rate, Dirichlet concentration) and the
    summary statistics; undefined statistics are ``null``.
``config.ini``
    The effective configuration, re-parseable by :func:`fedsir.config.parse_config`.
``identification.csv``
    Stage-I descriptors and the resulting partition (methods with Stage I only).

All files are written to a temporary name first and renamed into place.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from fedsir import spectral
from fedsir.config import emit_config
from fedsir.orchestrator import ExperimentResult, RoundMetrics

MISSING = "—"
BASE_COLUMNS = (
    "round",
    "accuracy",
    "clean_accuracy",
    "mean_noise_rate",
    "relabel_changed",
    "relabel_precision",
)


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def fmt(value) -> str:
    """CSV cell: exact float repr, integers as-is, ``—`` for missing or non-finite."""
    if value is None:
        return MISSING
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    return repr(value) if math.isfinite(value) else MISSING


def _csv_text(rows: Iterable[Sequence[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def metrics_columns(num_clients: int) -> list[str]:
    return (
        list(BASE_COLUMNS)
        + [f"noise_k{i}" for i in range(num_clients)]
        + [f"alpha_k{i}" for i in range(num_clients)]
    )


def metrics_row(m: RoundMetrics, num_clients: int) -> list[str]:
    changed = sum(r.changed for r in m.relabel) if m.relabel else None
    correct = sum(r.changed_correctly for r in m.relabel)
    precision = correct / changed if changed else None
    weights = m.weights if m.weights is not None else [None] * num_clients
    return (
        [fmt(m.round), fmt(m.accuracy), fmt(m.clean_accuracy), fmt(float(np.mean(m.noise_rates))), fmt(changed), fmt(precision)]
        + [fmt(x) for x in m.noise_rates]
        + [fmt(x) for x in weights]
    )


def metrics_csv(rounds: Sequence[RoundMetrics], num_clients: int) -> str:
    return _csv_text([metrics_columns(num_clients)] + [metrics_row(m, num_clients) for m in rounds])


def _json_safe(value):
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


def summary_record(result: ExperimentResult) -> dict:
    cfg = result.config
    record = {
        "method": cfg.method,
        "seed": cfg.seed,
        "noise_rate": cfg.data.noise_rate,
        "dirichlet_concentration": cfg.data.dirichlet_concentration,
        "rounds": len(result.rounds),
    }
    record.update(result.summary)
    return _json_safe(record)


def identification_csv(result: ExperimentResult) -> str:
    s1 = result.stage1
    header = ["client", "mu", "energy", "valid", "identified_clean", "noisy_ground_truth", "initial_noise_rate"]
    rows = [header]
    for ds, st in zip(result.initial_clients, s1.stats):
        rows.append(
            [
                fmt(ds.client_id),
                fmt(st.mu),
                fmt(st.energy),
                fmt(st.valid),
                fmt(ds.client_id in s1.partition.clean),
                fmt(ds.is_noisy_ground_truth),
                fmt(ds.noise_rate),
            ]
        )
    return _csv_text(rows)


def write_run(result: ExperimentResult, out_dir: str | Path, similarity: bool = False) -> Path:
    """Write every artifact of one run into ``out_dir`` and return the directory."""
    out = Path(out_dir)
    num_clients = len(result.initial_clients)
    atomic_write_text(out / "metrics.csv", metrics_csv(result.rounds, num_clients))
    atomic_write_text(out / "summary.json", json.dumps(summary_record(result), indent=2, sort_keys=True) + "\n")
    atomic_write_text(out / "config.ini", emit_config(result.config))
    if result.stage1 is not None:
        atomic_write_text(out / "identification.csv", identification_csv(result))
        if similarity:
            for k, sim in enumerate(result.stage1.similarities):
                if sim is not None:
                    target = out / f"similarity_k{k}.csv"
                    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=out)
                    os.close(fd)
                    spectral.write_similarity_csv(sim, tmp)
                    os.replace(tmp, target)
    return out


# ---------------------------------------------------------------- report


@dataclass(frozen=True)
class Cell:
    mean: float
    std: float
    count: int

    def text(self) -> str:
        flag = " (n=1)" if self.count == 1 else ""
        return f"{self.mean:.4f} ± {self.std:.4f}{flag}"


@dataclass
class ReportTable:
    """Rows keyed ``(dirichlet_concentration, method)``, columns by noise rate."""

    rows: list[tuple[float, str]]
    noise_rates: list[float]
    cells: dict[tuple[float, str, float], Cell]
    metric: str

    def render_text(self) -> str:
        head = ["alpha", "method"] + [f"rho={r:g}" for r in self.noise_rates]
        body = []
        for alpha, method in self.rows:
            line = [f"{alpha:g}", method]
            for rho in self.noise_rates:
                cell = self.cells.get((alpha, method, rho))
                line.append(cell.text() if cell else MISSING)
            body.append(line)
        widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
        out = [f"{self.metric} (mean ± population std over seeds)"]
        for line in [head] + body:
            out.append("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip())
        return "\n".join(out) + "\n"

    def render_csv(self) -> str:
        head = ["alpha", "method"]
        for rho in self.noise_rates:
            head += [f"rho={rho:g}_mean", f"rho={rho:g}_std", f"rho={rho:g}_n"]
        rows = [head]
        for alpha, method in self.rows:
            line = [fmt(alpha), method]
            for rho in self.noise_rates:
                cell = self.cells.get((alpha, method, rho))
                line += [fmt(cell.mean), fmt(cell.std), fmt(cell.count)] if cell else [MISSING] * 3
            rows.append(line)
        return _csv_text(rows)


def load_summaries(root: str | Path) -> list[dict]:
    root = Path(root)
    return [json.loads(p.read_text(encoding="utf-8")) for p in sorted(root.rglob("summary.json"))]


def build_report(summaries: Sequence[dict], metric: str = "final_accuracy") -> ReportTable:
    if not summaries:
        raise ValueError("no summaries to report")
    groups: dict[tuple[float, str, float], list[float]] = {}
    for s in summaries:
        value = s.get(metric)
        if value is None:
            continue
        key = (float(s["dirichlet_concentration"]), str(s["method"]), float(s["noise_rate"]))
        groups.setdefault(key, []).append(float(value))
    cells = {k: Cell(float(np.mean(v)), float(np.std(v)), len(v)) for k, v in groups.items()}
    rows = sorted({(a, m) for a, m, _ in groups} | {(float(s["dirichlet_concentration"]), str(s["method"])) for s in summaries})
    rates = sorted({float(s["noise_rate"]) for s in summaries})
    return ReportTable(rows, rates, cells, metric)
