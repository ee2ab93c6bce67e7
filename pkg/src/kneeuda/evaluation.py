"""Classification metrics, bootstrap AUROC, the McNemar test, dataset
splitting and leave-one-out cross-validation.

Rates are computed in exact rational arithmetic and only rounded (two
decimals, half-up) for display. AUROC is the Mann-Whitney statistic
with half credit for ties.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP
from fractions import Fraction
from math import comb
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import chi2

from .errors import MetricError

EXACT_MCNEMAR_CUTOFF = 25


@dataclass
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, preds: Sequence[int], labels: Sequence[int]) -> "ConfusionMatrix":
        if len(preds) != len(labels):
            raise ValueError(f"length mismatch: {len(preds)} preds vs {len(labels)} labels")
        tp = fp = tn = fn = 0
        for p, y in zip(preds, labels):
            if y:
                tp, fn = (tp + 1, fn) if p else (tp, fn + 1)
            else:
                fp, tn = (fp + 1, tn) if p else (fp, tn + 1)
        return cls(tp=tp, fp=fp, tn=tn, fn=fn)


def percent_display(num: int, den: int) -> Optional[str]:
    """Percentage at two decimals half-up, trailing zeros trimmed the way
    the tables print them (50, 97.83, 66.67)."""
    if den == 0:
        return None
    value = (Decimal(100) * Decimal(num) / Decimal(den)).quantize(
        Decimal("0.01"), rounding=ROUND_HALF_UP)
    text = str(value)
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    return text


@dataclass
class MetricsReport:
    confusion: ConfusionMatrix
    sensitivity: Optional[Fraction]
    specificity: Optional[Fraction]
    accuracy: Fraction
    threshold: float = 0.5

    def to_json(self) -> dict:
        cm = self.confusion
        out = {
            "confusion": {"tp": cm.tp, "fp": cm.fp, "tn": cm.tn, "fn": cm.fn},
            "threshold": self.threshold,
            "accuracy": {"value": float(self.accuracy),
                         "numerator": cm.tp + cm.tn, "denominator": cm.total,
                         "percent": percent_display(cm.tp + cm.tn, cm.total)},
        }
        for name, frac, num, den in (
                ("sensitivity", self.sensitivity, cm.tp, cm.tp + cm.fn),
                ("specificity", self.specificity, cm.tn, cm.tn + cm.fp)):
            out[name] = None if frac is None else {
                "value": float(frac), "numerator": num, "denominator": den,
                "percent": percent_display(num, den)}
        return out


def classification_metrics(preds: Sequence[int], labels: Sequence[int],
                           threshold: float = 0.5) -> MetricsReport:
    cm = ConfusionMatrix.from_predictions(preds, labels)
    if cm.total == 0:
        raise MetricError("no samples")
    sens = Fraction(cm.tp, cm.tp + cm.fn) if cm.tp + cm.fn else None
    spec = Fraction(cm.tn, cm.tn + cm.fp) if cm.tn + cm.fp else None
    acc = Fraction(cm.tp + cm.tn, cm.total)
    return MetricsReport(confusion=cm, sensitivity=sens, specificity=spec,
                         accuracy=acc, threshold=threshold)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Exact Mann-Whitney AUROC: P(score_pos > score_neg) + 0.5 P(tie)."""
    if len(scores) != len(labels):
        raise ValueError("length mismatch")
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    if not pos or not neg:
        raise MetricError("AUROC undefined: need both classes")
    wins = ties = 0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                wins += 1
            elif sp == sn:
                ties += 1
    return float(Fraction(2 * wins + ties, 2 * len(pos) * len(neg)))


def roc_curve_points(scores: Sequence[float], labels: Sequence[int]):
    """(fpr, tpr) points swept over all score thresholds, for plotting."""
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    y = np.asarray(labels)[order]
    p = int(y.sum())
    n = len(y) - p
    tpr = [0.0]
    fpr = [0.0]
    tp = fp = 0
    sorted_scores = np.asarray(scores, dtype=float)[order]
    for i in range(len(y)):
        tp += int(y[i])
        fp += int(1 - y[i])
        if i + 1 == len(y) or sorted_scores[i + 1] != sorted_scores[i]:
            tpr.append(tp / p if p else 0.0)
            fpr.append(fp / n if n else 0.0)
    return np.array(fpr), np.array(tpr)


@dataclass
class BootstrapResult:
    mean: float
    sd: float
    n_resamples: int
    aurocs: np.ndarray
    curves: list = field(default_factory=list)  # (fpr, tpr) per resample


def bootstrap_roc(scores: Sequence[float], labels: Sequence[int],
                  n_resamples: int = 100, seed: int = 0,
                  max_redraws: int = 1000, keep_curves: bool = True) -> BootstrapResult:
    """Case-level resampling with replacement, original size; one-class
    resamples are redrawn (cap max_redraws per resample)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if not (labels.any() and (1 - labels).any()):
        raise MetricError("bootstrap needs both classes present")
    rng = np.random.default_rng(seed)
    n = len(scores)
    aurocs = []
    curves = []
    for _ in range(n_resamples):
        for attempt in range(max_redraws + 1):
            idx = rng.integers(0, n, size=n)
            sub = labels[idx]
            if sub.any() and (1 - sub).any():
                break
        else:
            raise MetricError(f"could not draw a two-class resample in {max_redraws} tries")
        aurocs.append(roc_auc(scores[idx], labels[idx]))
        if keep_curves:
            curves.append(roc_curve_points(scores[idx], labels[idx]))
    aurocs = np.array(aurocs)
    return BootstrapResult(mean=float(aurocs.mean()), sd=float(aurocs.std()),
                           n_resamples=n_resamples, aurocs=aurocs, curves=curves)


# ---------------------------------------------------------------------------
# McNemar

@dataclass
class McNemarResult:
    p_value: float
    b: int  # a correct, b wrong
    c: int  # a wrong, b correct
    method: str  # "exact" | "chi2" | "no-discordance"
    significant: bool

    def to_json(self) -> dict:
        return {"p_value": self.p_value, "b": self.b, "c": self.c,
                "method": self.method, "alpha": 0.05,
                "significant": self.significant}


def mcnemar(preds_a: Sequence[int], preds_b: Sequence[int],
            labels: Sequence[int]) -> McNemarResult:
    """Paired comparison; exact two-sided binomial for b + c <= 25,
    continuity-corrected chi-square above."""
    if not (len(preds_a) == len(preds_b) == len(labels)):
        raise ValueError("length mismatch")
    b = sum(1 for pa, pb, y in zip(preds_a, preds_b, labels)
            if (pa == y) and (pb != y))
    c = sum(1 for pa, pb, y in zip(preds_a, preds_b, labels)
            if (pa != y) and (pb == y))
    n = b + c
    if n == 0:
        return McNemarResult(p_value=1.0, b=0, c=0, method="no-discordance",
                             significant=False)
    if n <= EXACT_MCNEMAR_CUTOFF:
        k = min(b, c)
        tail = Fraction(sum(comb(n, i) for i in range(k + 1)), 2 ** n)
        p = float(min(Fraction(1), 2 * tail))
        method = "exact"
    else:
        stat = (abs(b - c) - 1) ** 2 / n
        p = float(chi2.sf(stat, df=1))
        method = "chi2"
    return McNemarResult(p_value=p, b=b, c=c, method=method,
                         significant=p < 0.05)


# ---------------------------------------------------------------------------
# Splits

def _largest_remainder(n: int, fractions: Sequence[Fraction]) -> list[int]:
    exact = [Fraction(n) * Fraction(f) for f in fractions]
    sizes = [int(e) for e in exact]
    leftover = n - sum(sizes)
    # ties broken toward the later split, so (0.7, 0.1, 0.2) on 318
    # yields (222, 32, 64)
    order = sorted(range(len(exact)),
                   key=lambda i: (exact[i] - sizes[i], i), reverse=True)
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


def split_source(ids: Sequence[str],
                 fractions=(Fraction(7, 10), Fraction(1, 10), Fraction(2, 10)),
                 seed: int = 0,
                 stratify_by: Optional[Sequence] = None) -> tuple[list, list, list]:
    """Seeded (train, val, test) partition; floor allocation with
    largest-remainder leftovers, per stratum when labels are given."""
    fractions = [Fraction(f) for f in fractions]
    if sum(fractions) != 1:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    ids = list(ids)
    if len(ids) < len(fractions):
        raise ValueError(f"cannot split {len(ids)} ids into {len(fractions)} parts")
    if stratify_by is None:
        strata = {None: ids}
    else:
        if len(stratify_by) != len(ids):
            raise ValueError("stratify_by length mismatch")
        strata = {}
        for sid, lab in zip(ids, stratify_by):
            strata.setdefault(lab, []).append(sid)
    rng = np.random.default_rng(seed)
    splits: tuple[list, list, list] = ([], [], [])
    for key in sorted(strata, key=repr):
        members = list(strata[key])
        rng.shuffle(members)
        sizes = _largest_remainder(len(members), fractions)
        start = 0
        for part, size in zip(splits, sizes):
            part.extend(members[start:start + size])
            start += size
    return splits


def loocv(samples: Sequence, train_fn: Callable, eval_fn: Callable,
          seed: int = 0) -> list[dict]:
    """N leave-one-out folds. train_fn(train_samples, fold_seed) -> model;
    eval_fn(model, test_sample) -> (prediction, score, label). Fold seeds
    derive deterministically from (seed, fold index)."""
    n = len(samples)
    if n < 2:
        raise ValueError(f"leave-one-out needs at least 2 samples, got {n}")
    results = []
    for i in range(n):
        fold_seed = int(np.random.SeedSequence([int(seed), i]).generate_state(1)[0])
        train_set = [s for j, s in enumerate(samples) if j != i]
        model = train_fn(train_set, fold_seed)
        pred, score, label = eval_fn(model, samples[i])
        results.append({"fold": i, "prediction": int(pred),
                        "score": float(score), "label": int(label)})
    return results
