"""Image-level AUROC, average precision and region-aware AUPRO."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

MAX_THRESHOLDS = 5000
EIGHT_CONNECTED = np.ones((3, 3), dtype=int)
_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def _as_vectors(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    return scores, labels


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counted half."""
    scores, labels = _as_vectors(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-wise area under the precision-recall curve.

    Tied scores form a single threshold; AP = sum over thresholds of
    (recall increment) * precision.
    """
    scores, labels = _as_vectors(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average_precision needs at least one positive label")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    tp = np.cumsum(labels[order])
    # last index of each run of tied scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = tp[ends]
    precision = tp / (ends + 1)
    recall_gain = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(recall_gain * precision))


def _thresholds(values: np.ndarray, max_thresholds: int) -> np.ndarray:
    distinct = np.unique(values)
    if distinct.size <= max_thresholds:
        return distinct
    return np.unique(np.quantile(values, np.linspace(0.0, 1.0, max_thresholds)))


def pro_curve(maps, gt_masks, max_thresholds: int = MAX_THRESHOLDS):
    """Per-region-overlap curve as ``(fpr, pro)`` arrays for a descending threshold sweep.

    Regions are 8-connected ground-truth components over the whole set; the PRO
    value at a threshold is the mean over regions of the fraction of region
    pixels scoring at or above it. The curve starts at ``(0, 0)``.
    """
    maps = np.asarray(maps, dtype=np.float64)
    gt = np.asarray(gt_masks).astype(bool)
    if maps.shape != gt.shape:
        raise ValueError(f"maps {maps.shape} and masks {gt.shape} differ")
    if maps.ndim == 2:
        maps, gt = maps[None], gt[None]

    region_weight = np.zeros(maps.shape, dtype=np.float64)
    n_regions = 0
    labelled = []
    for mask in gt:
        lab, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
        labelled.append((lab, n))
        n_regions += n
    if n_regions == 0:
        raise ValueError("aupro needs at least one ground-truth region")
    for i, (lab, n) in enumerate(labelled):
        if n:
            areas = np.bincount(lab.ravel())
            w = np.where(lab > 0, 1.0 / areas[lab], 0.0)
            region_weight[i] = w / n_regions
    negatives = ~gt
    n_neg = int(negatives.sum())
    if n_neg == 0:
        raise ValueError("aupro needs at least one normal pixel")

    values = maps.ravel()
    thr = _thresholds(values, max_thresholds)
    # bin k holds pixels whose value v satisfies thr[k] <= v < thr[k+1]
    bins = np.searchsorted(thr, values, side="right") - 1
    bins = np.clip(bins, 0, thr.size - 1)
    fp_hist = np.bincount(bins, weights=negatives.ravel().astype(np.float64), minlength=thr.size)
    pro_hist = np.bincount(bins, weights=region_weight.ravel(), minlength=thr.size)
    # pixels >= thr[k] are those in bins k..end; sweep from the highest threshold down
    fpr = np.cumsum(fp_hist[::-1]) / n_neg
    pro = np.cumsum(pro_hist[::-1])
    return np.r_[0.0, fpr], np.r_[0.0, np.minimum(pro, 1.0)]


def integrate_curve(x: np.ndarray, y: np.ndarray, limit: float) -> float:
    """Trapezoidal area under ``y(x)`` for ``x`` in [0, limit]; x must be non-decreasing."""
    keep = x <= limit
    xs, ys = x[keep], y[keep]
    if xs[-1] < limit and keep.sum() < x.size:
        j = int(np.argmax(~keep))
        x0, x1, y0, y1 = x[j - 1], x[j], y[j - 1], y[j]
        y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        xs, ys = np.r_[xs, limit], np.r_[ys, y_lim]
    return float(_trapezoid(ys, xs))


def aupro(maps, gt_masks, fpr_limit: float = 0.3, max_thresholds: int = MAX_THRESHOLDS) -> float:
    """Area under the PRO curve up to ``fpr_limit``, normalised by ``fpr_limit``."""
    if not 0 < fpr_limit <= 1:
        raise ValueError("fpr_limit must lie in (0, 1]")
    fpr, pro = pro_curve(maps, gt_masks, max_thresholds)
    return integrate_curve(fpr, pro, fpr_limit) / fpr_limit


@dataclass
class EvalBundle:
    scores: np.ndarray
    labels: np.ndarray
    maps: Optional[np.ndarray] = None
    gt_masks: Optional[np.ndarray] = None
    category: str = ""

    def validate(self):
        n = len(self.scores)
        if len(self.labels) != n:
            raise ValueError("scores and labels differ in length")
        if (self.maps is None) != (self.gt_masks is None):
            raise ValueError("maps and gt_masks must be given together")
        if self.maps is not None and (len(self.maps) != n or np.shape(self.maps) != np.shape(self.gt_masks)):
            raise ValueError("maps / gt_masks do not match the score vector")


METRIC_KEYS = ("auroc_det", "ap_det", "ap_loc", "aupro")


@dataclass
class MetricsReport:
    auroc_det: float
    ap_det: float
    ap_loc: Optional[float] = None
    aupro: Optional[float] = None
    category: str = ""
    seed: Optional[int] = None
    per_category: Dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def report(bundle: EvalBundle, fpr_limit: float = 0.3) -> MetricsReport:
    bundle.validate()
    out = MetricsReport(
        auroc_det=auroc(bundle.scores, bundle.labels),
        ap_det=average_precision(bundle.scores, bundle.labels),
        category=bundle.category,
    )
    if bundle.maps is not None:
        gt = np.asarray(bundle.gt_masks).astype(bool)
        if gt.any():
            out.ap_loc = average_precision(np.asarray(bundle.maps).ravel(), gt.ravel())
            out.aupro = aupro(bundle.maps, gt, fpr_limit)
    return out


def aggregate(reports: List[MetricsReport]) -> List[dict]:
    """Per-category mean/std over runs, then a final ``mean`` row across categories.

    Categories keep the order in which they first appear.
    """
    by_cat: Dict[str, List[MetricsReport]] = {}
    for r in reports:
        by_cat.setdefault(r.category, []).append(r)
    rows = []
    for cat, runs in by_cat.items():
        row = {"category": cat, "n_runs": len(runs)}
        for key in METRIC_KEYS:
            vals = [getattr(r, key) for r in runs if getattr(r, key) is not None]
            row[key] = float(np.mean(vals)) if vals else None
            row[f"{key}_std"] = float(np.std(vals)) if vals else None
        rows.append(row)
    # std of the mean row: average categories within each seed, then spread across seeds
    by_seed: Dict[Optional[int], List[MetricsReport]] = {}
    for r in reports:
        by_seed.setdefault(r.seed, []).append(r)
    mean_row = {"category": "mean", "n_runs": len(by_seed)}
    for key in METRIC_KEYS:
        vals = [row[key] for row in rows if row[key] is not None]
        mean_row[key] = float(np.mean(vals)) if vals else None
        per_seed = [np.mean([getattr(r, key) for r in runs]) for runs in by_seed.values()
                    if all(getattr(r, key) is not None for r in runs)]
        mean_row[f"{key}_std"] = float(np.std(per_seed)) if per_seed else None
    rows.append(mean_row)
    return rows


CSV_COLUMNS = ["category", "n_runs"] + [c for k in METRIC_KEYS for c in (k, f"{k}_std")]


def rows_to_csv(rows: List[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else repr(row[k]) if isinstance(row[k], float) else row[k])
                         for k in CSV_COLUMNS})
    return buf.getvalue()
