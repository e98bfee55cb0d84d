"""Per-tile and aggregated evaluation on binary-collapsed predictions.

IoU, Dice, TPR and TNR are computed per tile from hard pixel counts and then
averaged over the test set; multiclass predictions are collapsed to the
joint wear class first so binary and multiclass models score comparably.
FNBGR states, per wear type, which fraction of that type's ground-truth
pixels were predicted as background (either predicted wear type counts as
wear). Any 0/0 score is defined as 1 (vacuously perfect); tiles lacking a
wear type are excluded from that FNBGR average.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Optional

import numpy as np

from .corpus import CLASS_WEAR_A, CLASS_WEAR_M, collapse_to_binary
from .tiling import Tile
from .unet import predict_classes

WEAR_TYPE_CLASS = {"A": CLASS_WEAR_A, "M": CLASS_WEAR_M}


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricReport:
    """One row of test scores; FNBGR entries are NaN when undefined throughout."""

    iou: float
    dice: float
    tpr: float
    tnr: float
    fnbgr_m: float
    fnbgr_a: float

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


METRIC_NAMES = [f.name for f in fields(MetricReport)]


def confusion(true_binary: np.ndarray, pred_binary: np.ndarray) -> ConfusionCounts:
    """Exact pixel counts for a pair of same-shape {0,1} rasters."""
    true_binary = np.asarray(true_binary)
    pred_binary = np.asarray(pred_binary)
    if true_binary.shape != pred_binary.shape:
        raise ValueError(
            f"shape mismatch: truth {true_binary.shape} vs prediction {pred_binary.shape}"
        )
    for name, arr in (("truth", true_binary), ("prediction", pred_binary)):
        vals = np.unique(arr)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError(f"{name} raster contains non-binary values {vals}")
    t = true_binary.astype(bool)
    p = pred_binary.astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(t & p)),
        fp=int(np.count_nonzero(~t & p)),
        fn=int(np.count_nonzero(t & ~p)),
        tn=int(np.count_nonzero(~t & ~p)),
    )


def _ratio(num: int, den: int) -> float:
    # 0/0 is vacuously perfect, mirroring the nan -> 1 loss convention.
    return 1.0 if den == 0 else num / den


def scores(counts: ConfusionCounts) -> tuple[float, float, float, float]:
    """(iou, dice, tpr, tnr) from hard confusion counts."""
    iou = _ratio(counts.tp, counts.tp + counts.fp + counts.fn)
    dice = _ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn)
    tpr = _ratio(counts.tp, counts.tp + counts.fn)
    tnr = _ratio(counts.tn, counts.tn + counts.fp)
    return iou, dice, tpr, tnr


def fnbgr(true_multiclass: np.ndarray, pred_binary: np.ndarray,
          wear_type: str) -> Optional[float]:
    """Fraction of a wear type's truth pixels predicted as background.

    Either predicted wear type counts as wear. Returns None when the wear
    type is absent from the truth (the tile is then excluded from averages).
    """
    if wear_type not in WEAR_TYPE_CLASS:
        raise ValueError(f"wear_type must be 'A' or 'M', got {wear_type!r}")
    cls = WEAR_TYPE_CLASS[wear_type]
    true_multiclass = np.asarray(true_multiclass)
    pred_binary = np.asarray(pred_binary)
    if true_multiclass.shape != pred_binary.shape:
        raise ValueError(
            f"shape mismatch: truth {true_multiclass.shape} vs "
            f"prediction {pred_binary.shape}"
        )
    type_pixels = true_multiclass == cls
    n_type = int(np.count_nonzero(type_pixels))
    if n_type == 0:
        return None
    missed = int(np.count_nonzero(type_pixels & (pred_binary == 0)))
    return missed / n_type


def evaluate_tile(probs: np.ndarray, truth_mask: np.ndarray, mode: str) -> dict:
    """Per-tile scores for one probability map against a 3-class truth mask."""
    pred = predict_classes(probs, mode)
    pred_bin = (pred > 0).astype(np.uint8)
    true_bin = collapse_to_binary(truth_mask)
    iou, dice, tpr, tnr = scores(confusion(true_bin, pred_bin))
    return {
        "iou": iou, "dice": dice, "tpr": tpr, "tnr": tnr,
        "fnbgr_m": fnbgr(truth_mask, pred_bin, "M"),
        "fnbgr_a": fnbgr(truth_mask, pred_bin, "A"),
    }


def evaluate_testset(predictor: Callable[[np.ndarray], np.ndarray],
                     test_tiles: list[Tile], mode: str) -> MetricReport:
    """Mean of per-tile scores over a test set.

    `predictor` maps tile pixels (d, d, C) to a probability map. Multiclass
    predictions are collapsed to binary before scoring. FNBGR averages skip
    tiles where the wear type is absent.
    """
    if not test_tiles:
        raise ValueError("empty test set")
    rows = [evaluate_tile(predictor(t.pixels), t.mask, mode) for t in test_tiles]
    out = {}
    for name in METRIC_NAMES:
        vals = [r[name] for r in rows if r[name] is not None]
        out[name] = float(np.mean(vals)) if vals else float("nan")
    return MetricReport(**out)


def summarize_folds(reports: list[MetricReport]) -> dict[str, tuple[float, float]]:
    """Per-metric (median, IQR) across fold reports, linear-interp quantiles."""
    if len(reports) < 2:
        raise ValueError(f"need at least 2 fold reports, got {len(reports)}")
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        median = float(np.median(vals))
        q1, q3 = np.percentile(vals, [25.0, 75.0], method="linear")
        out[name] = (median, float(q3 - q1))
    return out
