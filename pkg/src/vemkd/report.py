"""Cross-run comparison tables and training-curve figures.

Reads each run directory's metrics.csv and final evaluation JSON, prints a
plain-text comparison table, writes it as CSV, and renders one PNG per
plotted metric under <out>/<run name>/<metric>.png.
"""

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import DataIntegrityError

TABLE_COLUMNS = ["run", "params", "macs", "toy_fid", "delta_toy_fid", "ssim_to_target",
                 "l1_to_target", "psnr"]
CURVE_METRICS = ["loss_student_total", "loss_algo", "mi_surrogate", "loss_var",
                 "energy_pos", "energy_neg", "loss_teacher_g", "toy_fid", "l1_to_target"]


def load_run(run_dir) -> dict:
    run_dir = Path(run_dir)
    csv_path = run_dir / "metrics.csv"
    if not run_dir.is_dir() or not csv_path.exists():
        raise DataIntegrityError(f"not a run directory (no metrics.csv): {run_dir}")
    with open(csv_path) as f:
        rows = list(csv.DictReader(f))
    final_eval = None
    eval_dir = run_dir / "eval"
    if eval_dir.is_dir():
        reports = sorted(eval_dir.glob("iter_*.json"))
        if reports:
            final_eval = json.loads(reports[-1].read_text())
    return {"name": run_dir.name, "path": run_dir, "rows": rows, "final_eval": final_eval}


def _series(rows, metric):
    xs, ys = [], []
    for row in rows:
        value = row.get(metric, "")
        if value:
            xs.append(int(row["iteration"]))
            ys.append(float(value))
    return xs, ys


def comparison_table(runs: list) -> list:
    """One dict per run; delta_toy_fid is relative to the first run."""
    base_fid = None
    table = []
    for run in runs:
        ev = run["final_eval"] or {}
        fid = ev.get("toy_fid")
        if base_fid is None and fid is not None:
            base_fid = fid
        table.append(
            {
                "run": run["name"],
                "params": ev.get("params"),
                "macs": ev.get("macs"),
                "toy_fid": fid,
                "delta_toy_fid": None if (fid is None or base_fid is None) else fid - base_fid,
                "ssim_to_target": ev.get("ssim_to_target"),
                "l1_to_target": ev.get("l1_to_target"),
                "psnr": ev.get("psnr"),
            }
        )
    return table


def format_table(table: list) -> str:
    def cell(value):
        if value is None:
            return "-"
        if isinstance(value, float):
            return f"{value:.4g}"
        return str(value)

    rows = [[cell(entry[col]) for col in TABLE_COLUMNS] for entry in table]
    widths = [max(len(TABLE_COLUMNS[i]), *(len(r[i]) for r in rows)) for i in range(len(TABLE_COLUMNS))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(TABLE_COLUMNS, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


def write_report(run_dirs: list, out_dir) -> dict:
    runs = [load_run(d) for d in run_dirs]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    table = comparison_table(runs)
    with open(out / "comparison.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TABLE_COLUMNS)
        writer.writeheader()
        writer.writerows(table)

    plot_paths = []
    for run in runs:
        run_out = out / run["name"]
        run_out.mkdir(exist_ok=True)
        for metric in CURVE_METRICS:
            xs, ys = _series(run["rows"], metric)
            if not xs:
                continue
            fig, ax = plt.subplots(figsize=(6, 4))
            ax.plot(xs, ys, lw=1.2)
            ax.set_xlabel("iteration")
            ax.set_ylabel(metric)
            ax.set_title(f"{run['name']}: {metric}")
            ax.grid(True, alpha=0.3)
            fig.tight_layout()
            path = run_out / f"{metric}.png"
            fig.savefig(path, dpi=110)
            plt.close(fig)
            plot_paths.append(path)
    return {
        "table": table,
        "text": format_table(table),
        "csv": out / "comparison.csv",
        "plots": plot_paths,
    }
