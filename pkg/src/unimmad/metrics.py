"""Detection and localization metrics."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import UndefinedMetricError


def _prepare(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney form of the ROC area; ties count one half."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_counts(s: np.ndarray, y: np.ndarray):
    """(thresholds descending, tp, fp) where predictions are ``s >= t``."""
    order = np.argsort(-s, kind="stable")
    ss, yy = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(ss))[0], ss.size - 1]
    tp = np.cumsum(yy)[last]
    fp = last + 1 - tp
    return ss[last], tp, fp


def average_precision(scores, labels) -> float:
    """Step-wise area under precision-recall: sum (R_i - R_{i-1}) * P_i."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    _, tp, fp = _threshold_counts(s, y)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    terms = (recall - np.r_[0.0, recall[:-1]]) * precision
    return float(np.cumsum(terms)[-1])


def max_f1(scores, labels) -> tuple[float, float]:
    """Best F1 over thresholds at the distinct scores, with its threshold.
    Equal F1 values resolve to the lower threshold."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("max-F1 needs at least one positive")
    thr, tp, fp = _threshold_counts(s, y)
    fn = n_pos - tp
    f1 = 2 * tp / (2 * tp + fp + fn)
    best = f1.max()
    j = np.nonzero(f1 == best)[0][-1]
    return float(best), float(thr[j])


def label_regions(masks: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected components of each mask; ids are globally unique, 0 = normal."""
    out = np.zeros(masks.shape, dtype=np.int64)
    offset = 0
    for i, m in enumerate(masks):
        lab, n = ndimage.label(m > 0)
        out[i] = np.where(lab > 0, lab + offset, 0)
        offset += n
    return out, offset


def pro_curve(scores: np.ndarray, masks: np.ndarray, thresholds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, pro) at each given threshold, predictions ``score >= t``."""
    regions, n_regions = label_regions(masks)
    s = scores.reshape(-1)
    r = regions.reshape(-1)
    normal = np.sort(s[r == 0])
    anom_s, anom_r = s[r > 0], r[r > 0] - 1
    sizes = np.bincount(anom_r, minlength=n_regions).astype(np.float64)
    fpr = np.empty(len(thresholds))
    pro = np.empty(len(thresholds))
    for i, t in enumerate(thresholds):
        fpr[i] = (normal.size - np.searchsorted(normal, t, side="left")) / normal.size
        hit = np.bincount(anom_r[anom_s >= t], minlength=n_regions)
        pro[i] = np.mean(hit / sizes)
    return fpr, pro


def pro_curve_exact(scores: np.ndarray, masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, pro) at every distinct score, descending.

    Each anomalous pixel carries weight 1 / (|its region| * n_regions), so
    PRO at threshold t is the weight sum of pixels scoring >= t.
    """
    regions, n_regions = label_regions(masks)
    s = scores.reshape(-1)
    r = regions.reshape(-1)
    sizes = np.bincount(r, minlength=n_regions + 1).astype(np.float64)
    weight = np.zeros(s.size)
    anom = r > 0
    weight[anom] = 1.0 / (sizes[r[anom]] * n_regions)
    order = np.argsort(-s, kind="stable")
    ss = s[order]
    last = np.r_[np.nonzero(np.diff(ss))[0], ss.size - 1]
    fpr = np.cumsum(~anom[order])[last] / np.count_nonzero(~anom)
    pro = np.cumsum(weight[order])[last]
    return fpr, pro


def integrate_pro(fpr: np.ndarray, pro: np.ndarray, fpr_limit: float) -> float:
    """Trapezoid area of the PRO curve on [0, fpr_limit] divided by the limit.

    The curve starts at (0, 0); points must be ordered by non-decreasing FPR.
    """
    x = np.r_[0.0, fpr]
    y = np.r_[0.0, pro]
    keep = x <= fpr_limit
    cut = np.argmin(keep) if not keep.all() else None
    xs, ys = list(x[keep]), list(y[keep])
    if cut is not None:
        x0, x1, y0, y1 = x[cut - 1], x[cut], y[cut - 1], y[cut]
        ys.append(y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0))
        xs.append(fpr_limit)
    area = 0.0
    for k in range(1, len(xs)):
        area += (xs[k] - xs[k - 1]) * (ys[k] + ys[k - 1]) / 2
    return area / fpr_limit


def aupro(score_maps: Sequence, gt_masks: Sequence, fpr_limit: float = 0.3, n_thresholds: int | None = None) -> float:
    """Normalized area under the per-region-overlap curve up to ``fpr_limit``.

    By default the curve is evaluated at every distinct score. With
    ``n_thresholds`` it is sampled at that many score quantiles instead.
    """
    if not 0 < fpr_limit <= 1:
        raise ValueError(f"fpr_limit must lie in (0, 1], got {fpr_limit}")
    scores = np.stack([np.asarray(m, dtype=np.float64).reshape(np.shape(g)[-2:]) for m, g in zip(score_maps, gt_masks)])
    masks = np.stack([np.asarray(g).reshape(np.shape(g)[-2:]) > 0 for g in gt_masks])
    if not masks.any():
        raise UndefinedMetricError("AUPRO needs at least one anomalous pixel")
    if masks.all():
        raise UndefinedMetricError("AUPRO needs at least one normal pixel")
    if n_thresholds is None:
        fpr, pro = pro_curve_exact(scores, masks)
    else:
        q = np.quantile(scores, np.linspace(0.0, 1.0, n_thresholds), method="inverted_cdf")
        fpr, pro = pro_curve(scores, masks, np.unique(q)[::-1])
    return integrate_pro(fpr, pro, fpr_limit)


def image_metrics(scores, labels) -> dict:
    f1, _ = max_f1(scores, labels)
    return {"AUC_I": auroc(scores, labels), "AP_I": average_precision(scores, labels), "MF1_I": f1}


def pixel_metrics(score_maps, gt_masks, fpr_limit: float = 0.3) -> dict:
    s = np.concatenate([np.asarray(m).reshape(-1) for m in score_maps])
    y = np.concatenate([np.asarray(g).reshape(-1) > 0 for g in gt_masks])
    f1, _ = max_f1(s, y)
    return {"AUC_P": auroc(s, y), "MF1_P": f1, "AUPRO": aupro(score_maps, gt_masks, fpr_limit)}
