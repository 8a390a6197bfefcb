"""Accuracy, macro one-vs-rest AUC and macro F1, all reported as percentages."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _pair(pred, y) -> tuple[np.ndarray, np.ndarray]:
    pred, y = np.asarray(pred).reshape(-1), np.asarray(y).reshape(-1)
    if pred.size == 0:
        raise MetricError("empty input")
    if pred.shape != y.shape:
        raise MetricError(f"length mismatch: {pred.size} predictions vs {y.size} labels")
    return pred.astype(np.int64), y.astype(np.int64)


def accuracy(pred, y) -> float:
    pred, y = _pair(pred, y)
    return 100.0 * float((pred == y).sum()) / pred.size


def confusion(pred, y, k: int | None = None) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    pred, y = _pair(pred, y)
    k = k or int(max(pred.max(), y.max())) + 1
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (y, pred), 1)
    return m


def binary_auc(scores, positive) -> float:
    """Mann-Whitney rank statistic with average ranks for ties; fraction in [0, 1]."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auc_macro_ovr(scores, y) -> float:
    scores = np.asarray(scores, dtype=float)
    y = np.asarray(y).reshape(-1)
    if scores.ndim != 2 or scores.shape[0] != y.size:
        raise MetricError(f"scores must be [N, K] with N={y.size}, got {scores.shape}")
    if not np.isfinite(scores).all():
        raise MetricError("scores must be finite")
    vals = []
    for c in range(scores.shape[1]):
        pos = y == c
        if pos.all() or not pos.any():
            warnings.warn(f"class {c} has no positive or no negative samples; skipped in AUC")
            continue
        vals.append(binary_auc(scores[:, c], pos))
    if not vals:
        raise MetricError("no evaluable class for AUC")
    return 100.0 * float(np.mean(vals))


def precision_recall_f1(pred, y, k: int | None = None):
    m = confusion(pred, y, k)
    tp = np.diag(m).astype(float)
    predicted, support = m.sum(axis=0), m.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(predicted > 0, tp / predicted, 0.0)
        r = np.where(support > 0, tp / support, 0.0)
        f1 = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    return p, r, f1


def f1_macro(pred, y, k: int | None = None) -> float:
    """Mean per-class F1 over all k classes; a class with P + R = 0 contributes 0."""
    return 100.0 * float(precision_recall_f1(pred, y, k)[2].mean())


@dataclass
class EvalResult:
    acc: float
    auc: float
    f1: float
    confusion: np.ndarray
    precision: np.ndarray = field(default_factory=lambda: np.zeros(0))
    recall: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def row(self) -> dict:
        return {"acc": self.acc, "auc": self.auc, "f1": self.f1}


def evaluate(scores, y) -> EvalResult:
    """Scores are [N, K] class scores (logits or probabilities)."""
    scores = np.asarray(scores, dtype=float)
    k = scores.shape[1]
    pred = scores.argmax(axis=1)
    p, r, _ = precision_recall_f1(pred, y, k)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            auc = auc_macro_ovr(scores, y)
        except MetricError:
            auc = float("nan")
    return EvalResult(accuracy(pred, y), auc, f1_macro(pred, y, k), confusion(pred, y, k), p, r)


def to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    if not isinstance(v, float):
        return str(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return f"{v:.2f}" if 0.01 <= abs(v) < 1e6 else f"{v:.3g}"


def to_table(rows: list[dict]) -> str:
    """Aligned plain-text table."""
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[_fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"
