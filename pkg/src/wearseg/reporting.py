"""Artifact I/O and reporting: CSVs, score tables, boxplots, overlays.

Everything here is a pure function of persisted run artifacts, so tables and
figures regenerate identically from disk.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .corpus import CLASS_WEAR_A, CLASS_WEAR_M
from .metrics import METRIC_NAMES, MetricReport

TABLE_HEADERS = {"iou": "IoU", "dice": "Dice", "tpr": "TPR", "tnr": "TNR",
                 "fnbgr_m": "FNBGR M", "fnbgr_a": "FNBGR A"}
LOSS_LABELS = {"ce": "CE", "fce": "FCE", "iou": "L_IoU"}
AUG_ORDER = ("full", "moderate", "none")
# Overlay colors: wear A blue, transferred material M yellow, binary wear red.
OVERLAY_COLORS = {"A": (0.1, 0.3, 0.9), "M": (0.95, 0.85, 0.1),
                  "binary": (0.9, 0.15, 0.15)}

PNG_METADATA = {"Software": "wearseg"}


def write_history_csv(path: str | Path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "learning_rate"])
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_loss),
                             repr(rec.learning_rate)])


def read_history_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
                 "val_loss": float(r["val_loss"]),
                 "learning_rate": float(r["learning_rate"])}
                for r in csv.DictReader(fh)]


def write_report_csv(path: str | Path, report: MetricReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([TABLE_HEADERS[m] for m in METRIC_NAMES])
        writer.writerow([repr(getattr(report, m)) for m in METRIC_NAMES])


def read_report_csv(path: str | Path) -> MetricReport:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return MetricReport(**{m: float(v) for m, v in zip(METRIC_NAMES, rows[1])})


GRID_CSV_COLUMNS = (["mode", "loss", "aug", "bn", "tile_edge", "status",
                     "failed_folds"]
                    + [f"{m}_{s}" for m in METRIC_NAMES for s in ("median", "iqr")])


def _row_sort_key(row: dict):
    return (row["mode"], -row["tile_edge"], AUG_ORDER.index(row["aug"]),
            row["loss"], row["bn"])


def write_grid_summary_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GRID_CSV_COLUMNS)
        for row in sorted(rows, key=_row_sort_key):
            out = []
            for col in GRID_CSV_COLUMNS:
                v = row.get(col, "")
                out.append(repr(v) if isinstance(v, float) else v)
            writer.writerow(out)


def format_scores_table(rows: list[dict], tile_edge: int) -> str:
    """Median (IQR) score table for one tile size, in the results-table layout."""
    lines = [f"Test scores, tiles with edge length {tile_edge} px "
             "(median and interquartile range over folds)"]
    header = f"{'mode':<16} {'loss':<6} {'aug':<9} " + " ".join(
        f"{TABLE_HEADERS[m]:>14}" for m in METRIC_NAMES)
    lines.append(header)
    lines.append("-" * len(header))
    for mode in ("binary", "multiclass"):
        for bn in (False, True):
            mode_label = mode + (" + BN" if bn else "")
            for loss in ("ce", "fce", "iou"):
                for aug in AUG_ORDER:
                    row = next((r for r in rows
                                if r["mode"] == mode and r["bn"] == bn
                                and r["loss"] == loss and r["aug"] == aug
                                and r["tile_edge"] == tile_edge), None)
                    if row is None:
                        continue
                    cells = []
                    for m in METRIC_NAMES:
                        med = row.get(f"{m}_median")
                        iqr = row.get(f"{m}_iqr")
                        if med is None or (isinstance(med, float) and math.isnan(med)):
                            cells.append(f"{'-':>14}")
                        else:
                            cells.append(f"{med:>6.3f} ({iqr:.3f})")
                    lines.append(f"{mode_label:<16} {LOSS_LABELS[loss]:<6} "
                                 f"{aug:<9} " + " ".join(cells))
    return "\n".join(lines) + "\n"


def best_config_rows(rows: list[dict]) -> list[dict]:
    """Best cell per (mode, tile_edge): highest median IoU, ties by Dice."""
    best = {}
    for row in rows:
        if row.get("iou_median") is None:
            continue
        key = (row["mode"], row["tile_edge"])
        cur = best.get(key)
        cand = (row["iou_median"], row.get("dice_median", 0.0))
        if cur is None or cand > (cur["iou_median"], cur.get("dice_median", 0.0)):
            best[key] = row
    return [best[k] for k in sorted(best)]


def boxplot_panels(rows: list[dict], out_path: str | Path) -> Path:
    """Fold-IoU boxplots: one panel per mode x tile size, boxes grouped by
    loss x batch-norm on the x axis and colored by augmentation level."""
    panels = sorted({(r["mode"], r["tile_edge"]) for r in rows},
                    key=lambda k: (k[0], -k[1]))
    if not panels:
        raise ValueError("no completed grid cells to plot")
    ncols = min(2, len(panels))
    nrows = (len(panels) + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(7.5 * ncols, 4.5 * nrows),
                             squeeze=False)
    colors = {"full": "tab:red", "moderate": "tab:green", "none": "tab:blue"}
    group_labels = [f"{LOSS_LABELS[lk]}{'+BN' if bn else ''}"
                    for lk in ("ce", "fce", "iou") for bn in (False, True)]
    for ax_idx, (mode, edge) in enumerate(panels):
        ax = axes[ax_idx // ncols][ax_idx % ncols]
        for g, (lk, bn) in enumerate((lk, bn) for lk in ("ce", "fce", "iou")
                                     for bn in (False, True)):
            for a, aug in enumerate(AUG_ORDER):
                row = next((r for r in rows
                            if r["mode"] == mode and r["tile_edge"] == edge
                            and r["loss"] == lk and r["bn"] == bn
                            and r["aug"] == aug and r.get("fold_iou")), None)
                if row is None:
                    continue
                pos = g + (a - 1) * 0.25
                bp = ax.boxplot([row["fold_iou"]], positions=[pos], widths=0.2,
                                patch_artist=True)
                bp["boxes"][0].set_facecolor(colors[aug])
        ax.set_xticks(range(len(group_labels)))
        ax.set_xticklabels(group_labels, fontsize=8)
        ax.set_ylabel("IoU")
        ax.set_title(f"{mode} model, tiles {edge} px")
        handles = [plt.Line2D([0], [0], color=colors[a], lw=6) for a in AUG_ORDER]
        ax.legend(handles, AUG_ORDER, fontsize=7, loc="lower right")
    for ax_idx in range(len(panels), nrows * ncols):
        axes[ax_idx // ncols][ax_idx % ncols].axis("off")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=110, metadata=PNG_METADATA)
    plt.close(fig)
    return out_path


def overlay_figure(pixels: np.ndarray, pred_classes: np.ndarray, mode: str,
                   out_path: str | Path, truth_mask: np.ndarray | None = None,
                   ) -> Path:
    """Color overlay of a predicted class raster on the source image.

    Multiclass renders wear A and M in distinct colors; binary uses one
    color. An optional panel shows the ground truth the same way.
    """
    n_panels = 2 if truth_mask is not None else 1
    fig, axes = plt.subplots(n_panels, 1, figsize=(10, 3.2 * n_panels),
                             squeeze=False)

    def paint(ax, raster, title):
        base = pixels if pixels.shape[2] == 3 else np.repeat(pixels, 3, axis=2)
        ax.imshow(base)
        overlay = np.zeros(raster.shape + (4,), dtype=np.float32)
        if mode == "binary":
            overlay[raster > 0] = (*OVERLAY_COLORS["binary"], 0.55)
        else:
            overlay[raster == CLASS_WEAR_A] = (*OVERLAY_COLORS["A"], 0.55)
            overlay[raster == CLASS_WEAR_M] = (*OVERLAY_COLORS["M"], 0.55)
        ax.imshow(overlay)
        ax.set_title(title, fontsize=9)
        ax.axis("off")

    paint(axes[0][0], pred_classes, "prediction")
    if truth_mask is not None:
        paint(axes[1][0], truth_mask, "ground truth")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=110, metadata=PNG_METADATA)
    plt.close(fig)
    return out_path
