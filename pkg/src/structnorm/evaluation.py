"""Classification metrics, the Dice atlas baseline, two-group ANOVA and PCA projection."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special, stats

logger = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    class_names: list[str]
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tpr: np.ndarray
    ppv: np.ndarray
    f1: np.ndarray
    auc: np.ndarray  # NaN where not applicable
    confusion: np.ndarray  # rows: truth, columns: prediction
    zero_division: dict = field(default_factory=dict)

    @property
    def macro_tpr(self) -> float:
        return float(self.tpr.mean())

    @property
    def macro_ppv(self) -> float:
        return float(self.ppv.mean())

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean())

    @property
    def macro_auc(self) -> float:
        valid = self.auc[~np.isnan(self.auc)]
        return float(valid.mean()) if len(valid) else float("nan")

    @property
    def accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0

    def summary(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_tpr": self.macro_tpr,
            "macro_ppv": self.macro_ppv,
            "macro_f1": self.macro_f1,
            "macro_auc": None if math.isnan(self.macro_auc) else self.macro_auc,
            "zero_division": self.zero_division,
            "confusion": self.confusion.tolist(),
            "classes": self.class_names,
        }

    def write(self, csv_path, json_path=None) -> None:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "tp", "fp", "fn", "tpr", "ppv", "f1", "auc"])
            for i, name in enumerate(self.class_names):
                auc = "" if np.isnan(self.auc[i]) else f"{self.auc[i]:.6f}"
                w.writerow([name, int(self.tp[i]), int(self.fp[i]), int(self.fn[i]),
                            f"{self.tpr[i]:.6f}", f"{self.ppv[i]:.6f}", f"{self.f1[i]:.6f}", auc])
        if json_path is not None:
            Path(json_path).write_text(json.dumps(self.summary(), indent=2))


def _safe_div(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    zero = den == 0
    out = np.where(zero, 0.0, num / np.where(zero, 1, den))
    return out, zero


def classification_metrics(true_labels, scores, class_names: Sequence[str], predictions=None) -> MetricsReport:
    """One-vs-rest TP/FP/FN, TPR/PPV/F1 and AUC from per-class score vectors.

    Predictions are argmax of ``scores`` (lowest index on ties) unless given
    explicitly; an explicit prediction of -1 abstains and counts only as a
    false negative. Ratios with a zero denominator are reported as 0 and
    listed in ``zero_division``.
    """
    y = np.asarray(true_labels, dtype=int)
    s = np.asarray(scores, dtype=float)
    if y.size == 0:
        raise ValueError("no predictions to evaluate")
    k = len(class_names)
    if s.shape != (len(y), k):
        raise ValueError(f"scores shape {s.shape} does not match ({len(y)}, {k})")
    pred = np.argmax(s, axis=1) if predictions is None else np.asarray(predictions, dtype=int)
    if pred.shape != y.shape or pred.max(initial=-1) >= k:
        raise ValueError("predictions must be class indices or -1, one per label")
    kept = pred >= 0
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (y[kept], pred[kept]), 1)
    tp = np.diag(confusion).copy()
    fp = confusion.sum(axis=0) - tp
    fn = np.bincount(y, minlength=k) - tp
    tpr, z_tpr = _safe_div(tp, tp + fn)
    ppv, z_ppv = _safe_div(tp, tp + fp)
    f1, z_f1 = _safe_div(2 * ppv * tpr, ppv + tpr)
    auc = np.full(k, np.nan)
    for c in range(k):
        binary = y == c
        if binary.any() and (~binary).any():
            auc[c] = auc_one_vs_rest(binary, s[:, c])
    zero = {
        name: [m for m, z in (("tpr", z_tpr[i]), ("ppv", z_ppv[i]), ("f1", z_f1[i])) if z]
        for i, name in enumerate(class_names)
    }
    zero = {n: v for n, v in zero.items() if v}
    return MetricsReport(list(class_names), tp, fp, fn, tpr, ppv, f1, auc, confusion, zero)


def auc_one_vs_rest(binary_labels, scores) -> float:
    """Rank-sum AUC: (sum of positive ranks - M(M+1)/2) / (M N); ties take average ranks.

    Returns NaN when only one class is present.
    """
    labels = np.asarray(binary_labels, dtype=bool)
    s = np.asarray(scores, dtype=float)
    m = int(labels.sum())
    n = len(labels) - m
    if m == 0 or n == 0:
        return float("nan")
    ranks = stats.rankdata(s, method="average")
    return float((ranks[labels].sum() - m * (m + 1) / 2.0) / (m * n))


# ---------------------------------------------------------------------------
# Dice atlas baseline
# ---------------------------------------------------------------------------

def dsc(mask_x, mask_y) -> float:
    x = np.asarray(mask_x, dtype=bool)
    y = np.asarray(mask_y, dtype=bool)
    if x.shape != y.shape:
        raise ValueError(f"mask shapes differ: {x.shape} vs {y.shape}")
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(x, y).sum()) / total


def identity_transform(moving_mask: np.ndarray, fixed_mask: Optional[np.ndarray] = None) -> np.ndarray:
    return moving_mask


def atlas_relabel(
    fixed_mask: np.ndarray,
    atlas_entries: Sequence[tuple[str, np.ndarray]],
    transform: Callable = identity_transform,
) -> tuple[str, list[float]]:
    """Name the fixed structure after the atlas entry with the largest overlap."""
    if not atlas_entries:
        raise ValueError("atlas is empty")
    scores = [dsc(fixed_mask, transform(moving, fixed_mask)) for _, moving in atlas_entries]
    best = int(np.argmax(scores))
    if scores[best] == 0.0:
        logger.warning("no atlas entry overlaps the fixed mask; returning %s", atlas_entries[best][0])
    return atlas_entries[best][0], scores


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnovaResult:
    mean_difference: float
    f: float
    p: float


def f_survival(f: float, d1: float, d2: float) -> float:
    """P(F > f) for F(d1, d2) via the regularized incomplete beta function."""
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return float(special.betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)))


def one_way_anova(group_a, group_b) -> AnovaResult:
    """Two-group one-way ANOVA; ``mean_difference`` is mean(b) - mean(a)."""
    a = np.asarray(group_a, dtype=float)
    b = np.asarray(group_b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each group needs at least two observations")
    ma, mb = a.mean(), b.mean()
    grand = np.concatenate([a, b]).mean()
    ss_between = len(a) * (ma - grand) ** 2 + len(b) * (mb - grand) ** 2
    ss_within = ((a - ma) ** 2).sum() + ((b - mb) ** 2).sum()
    df_within = len(a) + len(b) - 2
    diff = float(mb - ma)
    if ss_within == 0.0:
        # identical zero-variance groups are treated as indistinguishable
        if ss_between == 0.0:
            return AnovaResult(diff, 0.0, 1.0)
        return AnovaResult(diff, float("inf"), 0.0)
    f = float(ss_between / (ss_within / df_within))
    return AnovaResult(diff, f, f_survival(f, 1.0, df_within))


def project_features_2d(features) -> np.ndarray:
    """Mean-centred projection onto the top two principal directions.

    Each direction's sign is fixed so its largest-magnitude component is positive.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("need at least two feature vectors")
    centered = x - x.mean(axis=0)
    if not np.any(centered):
        return np.zeros((len(x), 2))
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    dirs = vt[:2]
    if len(dirs) < 2:
        dirs = np.vstack([dirs, np.zeros((2 - len(dirs), x.shape[1]))])
    for i, d in enumerate(dirs):
        if i < len(sv) and sv[i] <= sv[0] * 1e-12:
            dirs[i] = 0.0
            continue
        if d[np.argmax(np.abs(d))] < 0:
            dirs[i] = -d
    return centered @ dirs.T
