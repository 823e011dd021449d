"""Classification metrics, bootstrap intervals and the Wilcoxon signed-rank test.

Conventions: a 0/0 precision, recall or F1 is 0; macro averages run over the
classes that occur in ``y_true``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .dataio import CLASS_NAMES, N_CLASSES

COLLAPSE_GAP = 0.3


class InsufficientPairs(ValueError):
    pass


@dataclass
class EvalReport:
    confusion_matrix: list
    precision: list
    recall: list
    f1: list
    support: list
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    n_test: int
    auroc: float | None = None
    ci_macro_f1: tuple | None = None
    protocol: dict = field(default_factory=dict)
    stress: str | None = None
    majority_collapse: bool = False
    class_names: tuple = CLASS_NAMES

    def to_json(self) -> dict:
        d = asdict(self)
        d["class_names"] = list(self.class_names)
        if self.ci_macro_f1 is not None:
            d["ci_macro_f1"] = list(self.ci_macro_f1)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        d = dict(d)
        if d.get("ci_macro_f1") is not None:
            d["ci_macro_f1"] = tuple(d["ci_macro_f1"])
        d["class_names"] = tuple(d.get("class_names", CLASS_NAMES))
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


def confusion_matrix(y_true, y_pred, n_classes: int = N_CLASSES) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch ({y_true.size} vs {y_pred.size})")
    if y_true.size and (y_true.min() < 0 or y_true.max() >= n_classes or y_pred.min() < 0 or y_pred.max() >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    return np.bincount(y_true * n_classes + y_pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def per_class_scores(cm: np.ndarray):
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_div(tp, cm.sum(axis=0))
    recall = _safe_div(tp, cm.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return precision, recall, f1


def macro_f1(y_true, y_pred, n_classes: int = N_CLASSES) -> float:
    cm = confusion_matrix(y_true, y_pred, n_classes)
    present = cm.sum(axis=1) > 0
    if not present.any():
        return 0.0
    return float(per_class_scores(cm)[2][present].mean())


def confusion_and_metrics(y_true, y_pred, n_classes: int = N_CLASSES) -> EvalReport:
    cm = confusion_matrix(y_true, y_pred, n_classes)
    precision, recall, f1 = per_class_scores(cm)
    support = cm.sum(axis=1)
    present = support > 0
    n = int(cm.sum())
    accuracy = float(np.trace(cm) / n) if n else 0.0

    def macro(v):
        return float(v[present].mean()) if present.any() else 0.0

    report = EvalReport(
        confusion_matrix=cm.tolist(),
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        support=support.tolist(),
        accuracy=accuracy,
        macro_precision=macro(precision),
        macro_recall=macro(recall),
        macro_f1=macro(f1),
        n_test=n,
    )
    report.majority_collapse = accuracy - report.macro_f1 > COLLAPSE_GAP
    return report


def binary_auroc(labels, scores) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counting one half."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positives and negatives")
    ranks = stats.rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auroc_macro(y_true, scores) -> float | None:
    """One-vs-rest AUROC averaged over classes that have both positives and negatives."""
    y_true = np.asarray(y_true, dtype=int)
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    values = []
    for k in range(scores.shape[1]):
        pos = y_true == k
        if pos.any() and not pos.all():
            values.append(binary_auroc(pos, scores[:, k]))
    return float(np.mean(values)) if values else None


def bootstrap_ci(
    y_true,
    y_pred,
    metric=macro_f1,
    n_resamples: int = 1000,
    level: float = 0.95,
    seed: int = 42,
) -> tuple[float, float]:
    """Percentile interval of ``metric`` over index resamples with replacement."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    n = y_true.size
    if n < 1:
        raise ValueError("bootstrap needs at least one sample")
    rng = np.random.default_rng(seed)
    values = np.empty(n_resamples)
    for i in range(n_resamples):
        idx = rng.integers(0, n, n)
        values[i] = metric(y_true[idx], y_pred[idx])
    tail = 100 * (1 - level) / 2
    lo, hi = np.percentile(values, [tail, 100 - tail])
    return float(lo), float(hi)


# ------------------------------------------------------------- wilcoxon


def _exact_lower_tail(doubled_ranks: np.ndarray, observed: int) -> float:
    """P(sum of randomly signed ranks <= observed) under the sign-flip null."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return float(counts[: observed + 1].sum() / 2.0 ** len(doubled_ranks))


def wilcoxon_signed_rank(a, b, exact_max: int = 20) -> dict:
    """Two-sided paired test; zero differences dropped, tied ranks averaged.

    Exact null distribution for up to ``exact_max`` non-zero pairs, normal
    approximation with continuity and tie correction above.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0]
    m = d.size
    if m < 5:
        raise InsufficientPairs(f"insufficient pairs ({m} non-zero differences, need 5)")
    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if m <= exact_max:
        doubled = np.rint(2 * ranks).astype(int)
        p = 2.0 * _exact_lower_tail(doubled, int(round(2 * w)))
        method = "exact"
    else:
        mean = m * (m + 1) / 4.0
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var = m * (m + 1) * (2 * m + 1) / 24.0 - (tie_counts**3 - tie_counts).sum() / 48.0
        z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
        p = 2.0 * stats.norm.sf(max(z, 0.0))
        method = "normal"
    return {"statistic": w, "w_plus": w_plus, "w_minus": w_minus, "p_value": min(1.0, p), "n": m, "method": method}
