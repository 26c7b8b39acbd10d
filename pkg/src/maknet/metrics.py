"""Multi-label evaluation: macro-averaged AUC, precision, recall, F1.

Per-label metrics with undefined denominators are skipped and counted,
never imputed as zero; macro averages run over the defined labels only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["LabelMetrics", "EvalResult", "roc_auc", "prf1", "score_matrix_metrics"]


def roc_auc(scores, truths) -> float | None:
    """Rank-based (Mann-Whitney) AUC; tied scores credit 0.5 per pair.

    Returns None when the labels are single-class (undefined).
    """
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths)
    pos = int((truths == 1).sum())
    neg = int((truths == 0).sum())
    if pos == 0 or neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[truths == 1].sum()
    return float((rank_sum - pos * (pos + 1) / 2.0) / (pos * neg))


def prf1(
    scores, truths, threshold: float = 0.5
) -> tuple[float | None, float | None, float | None]:
    """Precision, recall, F1 on predictions thresholded at `threshold`.

    Zero-denominator metrics come back as None (skipped upstream).
    """
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths)
    pred = scores > threshold
    tp = int(np.sum(pred & (truths == 1)))
    fp = int(np.sum(pred & (truths == 0)))
    fn = int(np.sum(~pred & (truths == 1)))
    precision = tp / (tp + fp) if (tp + fp) > 0 else None
    recall = tp / (tp + fn) if (tp + fn) > 0 else None
    if precision is None or recall is None or (precision + recall) == 0:
        f1 = None
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return precision, recall, f1


@dataclass
class LabelMetrics:
    auc: float | None
    precision: float | None
    recall: float | None
    f1: float | None


@dataclass
class EvalResult:
    per_label: dict[int, LabelMetrics]
    threshold: float
    macro_auc: float | None = None
    macro_precision: float | None = None
    macro_recall: float | None = None
    macro_f1: float | None = None
    skipped: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for key in ("auc", "precision", "recall", "f1"):
            values = [
                getattr(m, key) for m in self.per_label.values()
                if getattr(m, key) is not None
            ]
            skipped = len(self.per_label) - len(values)
            self.skipped[key] = skipped
            macro = float(np.mean(values)) if values else None
            setattr(self, f"macro_{key}", macro)

    def table(self, title: str = "") -> str:
        """Aligned text table in the AUC / F1 / precision / recall layout."""
        def fmt(v):
            return f"{v:.4f}" if v is not None else "-"

        lines = []
        if title:
            lines.append(title)
        lines.append(f"{'label':>6}  {'auc':>7}  {'f1':>7}  {'prec':>7}  {'recall':>7}")
        for label in sorted(self.per_label):
            m = self.per_label[label]
            lines.append(
                f"{label:>6}  {fmt(m.auc):>7}  {fmt(m.f1):>7}  "
                f"{fmt(m.precision):>7}  {fmt(m.recall):>7}"
            )
        lines.append(
            f"{'macro':>6}  {fmt(self.macro_auc):>7}  {fmt(self.macro_f1):>7}  "
            f"{fmt(self.macro_precision):>7}  {fmt(self.macro_recall):>7}"
        )
        lines.append(
            "skipped: "
            + ", ".join(f"{k}={v}" for k, v in sorted(self.skipped.items()))
        )
        return "\n".join(lines) + "\n"

    def csv_lines(self, split: str) -> str:
        """Line-delimited `split,label,auc,p,r,f1` (empty field = skipped)."""
        def fmt(v):
            return f"{v:.6f}" if v is not None else ""

        lines = []
        for label in sorted(self.per_label):
            m = self.per_label[label]
            lines.append(
                f"{split},{label},{fmt(m.auc)},{fmt(m.precision)},"
                f"{fmt(m.recall)},{fmt(m.f1)}"
            )
        return "\n".join(lines) + "\n"


def score_matrix_metrics(
    scores: np.ndarray, truths: np.ndarray, threshold: float = 0.5
) -> EvalResult:
    """Per-label metrics over an (N, L) score matrix and multi-hot truths."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths)
    if scores.shape != truths.shape:
        raise ValueError(
            f"scores shape {scores.shape} != truths shape {truths.shape}"
        )
    per_label: dict[int, LabelMetrics] = {}
    for label in range(scores.shape[1]):
        auc = roc_auc(scores[:, label], truths[:, label])
        p, r, f1 = prf1(scores[:, label], truths[:, label], threshold)
        per_label[label] = LabelMetrics(auc, p, r, f1)
    return EvalResult(per_label=per_label, threshold=threshold)
