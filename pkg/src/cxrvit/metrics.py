"""One-vs-rest ROC AUC and sensitivity-anchored operating points."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .transformer import CLASSES


class UndefinedAUCError(ValueError):
    """AUC needs at least one positive and one negative sample."""


def _binary(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary 0/1")
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    return s, y.astype(bool)


def roc_auc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve.

    Tied scores form a single ROC step, so the result equals
    P(s+ > s-) + 0.5 P(s+ = s-). The area is accumulated in integer units of
    half a (positive, negative) pair to keep it exact.
    """
    s, y = _binary(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError(f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    order = np.argsort(s, kind="stable")
    s, y = s[order], y[order]
    # walk thresholds from low to high score: each tie group is one trapezoid
    bounds = np.flatnonzero(np.diff(s)) + 1
    pos_g = np.add.reduceat(y.astype(np.int64), np.r_[0, bounds])
    neg_g = np.add.reduceat((~y).astype(np.int64), np.r_[0, bounds])
    pos_below = np.cumsum(pos_g) - pos_g
    twice_area = int(np.sum(neg_g * (2 * (n_pos - pos_below - pos_g) + pos_g)))
    return twice_area / (2 * n_pos * n_neg)


def roc_curve(scores, labels) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) with thresholds descending over observed scores, starting at +inf."""
    s, y = _binary(scores, labels)
    thresholds = np.r_[np.inf, np.unique(s)[::-1]]
    tpr = np.array([(s[y] >= t).mean() if y.any() else np.nan for t in thresholds])
    fpr = np.array([(s[~y] >= t).mean() if (~y).any() else np.nan for t in thresholds])
    return fpr, tpr, thresholds


def threshold_for_sensitivity(scores, labels, target: float = 0.80) -> Tuple[float, bool]:
    """Largest observed score t with sensitivity(score >= t) >= target.

    Returns ``(threshold, attained)``. When no candidate qualifies the minimal
    observed score is returned with ``attained=False``.
    """
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"target sensitivity {target} outside [0, 1]")
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("threshold_for_sensitivity needs at least one positive sample")
    candidates = np.unique(s)[::-1]
    pos_sorted = np.sort(s[y])
    # positives at or above each candidate
    caught = n_pos - np.searchsorted(pos_sorted, candidates, side="left")
    ok = caught >= target * n_pos - 1e-12 * n_pos
    if not ok.any():
        return float(candidates[-1]), False
    return float(candidates[np.argmax(ok)]), True


@dataclass(frozen=True)
class Rates:
    sensitivity: Optional[float]
    specificity: Optional[float]
    accuracy: Optional[float]

    def __iter__(self):
        return iter((self.sensitivity, self.specificity, self.accuracy))


def confusion_metrics(scores, labels, threshold: float) -> Rates:
    """Percent sensitivity, specificity and accuracy of ``score >= threshold``.

    A rate whose denominator is empty is ``None``.
    """
    s, y = _binary(scores, labels)
    pred = s >= threshold
    tp, fn = int(np.sum(pred & y)), int(np.sum(~pred & y))
    tn, fp = int(np.sum(~pred & ~y)), int(np.sum(pred & ~y))

    def pct(num, den):
        return None if den == 0 else 100.0 * num / den

    return Rates(pct(tp, tp + fn), pct(tn, tn + fp), pct(tp + tn, s.size))


@dataclass
class ClassReport:
    name: str
    auc: float
    sensitivity: Optional[float]
    specificity: Optional[float]
    accuracy: Optional[float]
    threshold: float
    attained: bool = True


@dataclass
class EvalReport:
    split: str
    classes: List[ClassReport]
    num_samples: int
    extra: Dict[str, float] = field(default_factory=dict)

    def _macro(self, attr: str) -> Optional[float]:
        vals = [getattr(c, attr) for c in self.classes]
        if any(v is None for v in vals):
            return None
        return float(np.mean(vals))

    @property
    def macro_auc(self) -> float:
        return self._macro("auc")

    @property
    def macro(self) -> Dict[str, Optional[float]]:
        return {k: self._macro(k) for k in ("auc", "sensitivity", "specificity", "accuracy")}

    def rows(self) -> List[dict]:
        out = [
            {"split": self.split, "class": c.name, "auc": c.auc, "sensitivity": c.sensitivity,
             "specificity": c.specificity, "accuracy": c.accuracy, "threshold": c.threshold,
             "attained": c.attained}
            for c in self.classes
        ]
        out.append({"split": self.split, "class": "macro", **self.macro, "threshold": None, "attained": None})
        return out

    def to_text(self) -> str:
        def fmt(v, spec):
            return "n/a" if v is None else format(v, spec)

        lines = [
            f"split {self.split} ({self.num_samples} images)",
            f"{'class':<16} {'AUC':>6} {'sens%':>7} {'spec%':>7} {'acc%':>7} {'thresh':>8}",
        ]
        for r in self.rows():
            lines.append(
                f"{r['class']:<16} {fmt(r['auc'], '.3f'):>6} {fmt(r['sensitivity'], '.1f'):>7} "
                f"{fmt(r['specificity'], '.1f'):>7} {fmt(r['accuracy'], '.1f'):>7} {fmt(r['threshold'], '.4f'):>8}"
            )
        return "\n".join(lines)


def _check_probs(probs: np.ndarray, labels: np.ndarray, k: int) -> None:
    if probs.ndim != 2 or probs.shape[1] != k:
        raise ValueError(f"expected (N, {k}) probabilities, got {probs.shape}")
    if probs.shape[0] != labels.shape[0]:
        raise ValueError(f"{probs.shape[0]} probability rows but {labels.shape[0]} labels")
    if not np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-9):
        raise ValueError("probability rows must sum to 1")


def evaluate_scores(
    probs, labels, split: str = "", class_names: Sequence[str] = CLASSES, target: float = 0.80
) -> EvalReport:
    """Per-class one-vs-rest report from softmax probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_probs(probs, labels, len(class_names))
    present = set(labels.tolist())
    missing = [class_names[k] for k in range(len(class_names)) if k not in present]
    if missing:
        raise ValueError(f"split {split!r} has no samples of class(es) {missing}")
    classes = []
    for k, name in enumerate(class_names):
        y = (labels == k).astype(np.int64)
        thr, attained = threshold_for_sensitivity(probs[:, k], y, target)
        rates = confusion_metrics(probs[:, k], y, thr)
        classes.append(ClassReport(name, roc_auc(probs[:, k], y), *rates, thr, attained))
    return EvalReport(split, classes, len(labels))


def evaluate(model, split, target: float = 0.80) -> EvalReport:
    """Score a split with ``model`` (a callable images -> probabilities) and report.

    ``split`` is an object with ``images``, ``labels`` and ``name`` attributes.
    """
    probs = model(split.images)
    return evaluate_scores(probs, split.labels, split.name, target=target)


def write_report_csv(path, reports: Sequence[EvalReport]) -> None:
    fields = ["split", "class", "auc", "sensitivity", "specificity", "accuracy", "threshold", "attained"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for rep in reports:
            for row in rep.rows():
                w.writerow({k: "" if row[k] is None else row[k] for k in fields})


def write_scores_csv(path, probs: np.ndarray, labels: np.ndarray, split: str, ids=None,
                     class_names: Sequence[str] = CLASSES) -> None:
    ids = list(ids) if ids is not None else [str(i) for i in range(len(labels))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "split", "label", *class_names])
        for i, y, p in zip(ids, labels, probs):
            w.writerow([i, split, int(y), *(repr(float(v)) for v in p)])


def read_scores_csv(path, class_names: Sequence[str] = CLASSES) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Score file -> {split: (probs, labels)}."""
    by_split: Dict[str, Tuple[list, list]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            probs, labels = by_split.setdefault(row["split"], ([], []))
            probs.append([float(row[c]) for c in class_names])
            labels.append(int(row["label"]))
    return {s: (np.array(p), np.array(l)) for s, (p, l) in by_split.items()}
