"""Result and sweep-report writers: JSON, CSV tables, and rendered figures.

Figures are rendered headlessly (Agg) next to the delimited output, one PNG
per artifact: a step-time ECDF for simulation results, slowdown CDF curves
for sweeps that carry them, and delta-vs-CV lines for the kernel sensitivity
study.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from stepsim.engine import SimulationResult
from stepsim.experiments import SweepReport

__all__ = ["write_simulation_result", "write_sweep_report"]


def _write_json(obj, path: Path) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _write_csv(rows: list[dict], path: Path) -> Path:
    if not rows:
        path.write_text("")
        return path
    seen: dict[str, None] = {}
    for row in rows:
        seen.update(dict.fromkeys(row))
    fields = ["label"] if "label" in seen else []
    fields += sorted(k for k in seen if k not in fields)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, restval="")
        writer.writeheader()
        writer.writerows(rows)
    return path


def write_simulation_result(
    result: SimulationResult,
    out_dir,
    name: str = "result",
    formats: tuple[str, ...] = ("json", "csv"),
    figures: bool = True,
) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if "json" in formats:
        written.append(_write_json(result.to_json_obj(), out_dir / f"{name}.json"))
    if "csv" in formats:
        xs, fs = result.ecdf()
        rows = [{"t_seconds": float(t), "cum_prob": float(f)} for t, f in zip(xs, fs)]
        written.append(_write_csv(rows, out_dir / f"{name}_ecdf.csv"))
    if figures:
        xs, fs = result.ecdf()
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.step(xs, fs, where="post")
        ax.set_xlabel("step time [s]")
        ax.set_ylabel("cumulative probability")
        ax.set_title(f"step time ECDF (R={result.replicates}, seed={result.seed})")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = out_dir / f"{name}_ecdf.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def _sweep_figure(report: SweepReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    if report.experiment == "kernel-sensitivity":
        by_kernel: dict[str, list[tuple[float, float]]] = {}
        for point in report.points:
            by_kernel.setdefault(point.params["kernel"], []).append(
                (point.params["cv"], point.summary["delta"])
            )
        ranked = report.notes.get("ranking", sorted(by_kernel))
        for kernel in ranked[:8]:
            pairs = sorted(by_kernel[kernel])
            ax.plot([c for c, _ in pairs], [d * 1e3 for _, d in pairs],
                    marker="o", label=kernel)
        ax.set_xlabel("injected coefficient of variation")
        ax.set_ylabel("step-time delta [ms]")
        ax.legend(fontsize=7)
    else:
        for point in report.points:
            if not point.slowdown_cdf:
                continue
            xs = [x for x, _ in point.slowdown_cdf]
            ys = [y for _, y in point.slowdown_cdf]
            ax.plot(xs, ys, label=point.label)
        ax.set_xlabel("slowdown vs baseline")
        ax.set_ylabel("cumulative probability")
        ax.legend(fontsize=8)
    ax.set_title(report.experiment)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_sweep_report(
    report: SweepReport,
    out_dir,
    formats: tuple[str, ...] = ("json", "csv"),
    figures: bool = True,
) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"sweep_{report.experiment}"
    written: list[Path] = []
    if "json" in formats:
        written.append(_write_json(report.to_json_obj(), out_dir / f"{stem}.json"))
    if "csv" in formats:
        written.append(_write_csv(report.point_rows(), out_dir / f"{stem}_points.csv"))
        cdf_rows = report.cdf_rows()
        if cdf_rows:
            written.append(_write_csv(cdf_rows, out_dir / f"{stem}_cdf.csv"))
    if figures:
        written.append(_sweep_figure(report, out_dir / f"{stem}.png"))
    return written
