"""Statistics for trial-level analysis.

Scope is deliberately small: ordinary least-squares regression with R^2,
one-way ANOVA with the effect size eta-squared, linear-interpolation
percentile summaries, force-trace click labeling, and support-weighted
classification scores.  No p-values are produced (no distribution CDFs);
report the statistics themselves.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

#: a force sample is click-active above this fraction of the trial maximum
CLICK_THRESHOLD = 0.20


@dataclass
class RegressionFit:
    slope: float
    intercept: float
    r_squared: float
    n: int


@dataclass
class AnovaResult:
    f_statistic: float
    eta_squared: float
    ss_between: float
    ss_within: float
    df_between: int
    df_within: int
    n_groups: int
    n_total: int


@dataclass
class PercentileSummary:
    minimum: float
    p25: float
    median: float
    p75: float
    maximum: float


@dataclass
class ForceTrace:
    """A sampled force signal; timestamps strictly increasing, seconds."""

    timestamps: np.ndarray
    samples: np.ndarray

    def __post_init__(self) -> None:
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.samples = np.asarray(self.samples, dtype=float).reshape(-1)
        if self.timestamps.shape != self.samples.shape:
            raise ValueError("timestamps and samples must have equal length")
        if self.timestamps.size == 0:
            raise ValueError("force trace is empty")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("force samples must be finite")

    @property
    def trial_max(self) -> float:
        return float(self.samples.max())


@dataclass
class ClickSegment:
    """Half-open frame range [start, end) flagged as one click."""

    start: int
    end: int


@dataclass
class ClickLabels:
    frame_labels: np.ndarray     # (N,) bool, True inside a click segment
    segments: list               # list[ClickSegment], ordered, non-overlapping
    threshold_value: float       # absolute force level used


@dataclass
class ClassificationReport:
    accuracy: float
    precision_weighted: float
    recall_weighted: float
    f1_weighted: float
    confusion: np.ndarray        # [[tn, fp], [fn, tp]]
    support: dict                # class label -> count


def linear_regression(x, y) -> RegressionFit:
    """Least-squares line fit with the coefficient of determination.

    Raises for mismatched or < 2 points, or a constant x (undefined
    slope).  A constant y yields R^2 = 0 with a warning (no variance to
    explain).
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    if x.size < 2:
        raise ValueError("regression needs at least 2 points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("regression inputs must be finite")
    xm = x.mean()
    ym = y.mean()
    sxx = float(((x - xm) ** 2).sum())
    if sxx == 0.0:
        raise ValueError("x is constant; slope is undefined")
    sxy = float(((x - xm) * (y - ym)).sum())
    slope = sxy / sxx
    intercept = ym - slope * xm
    ss_tot = float(((y - ym) ** 2).sum())
    if ss_tot == 0.0:
        warnings.warn("y is constant; R^2 reported as 0", stacklevel=2)
        r2 = 0.0
    else:
        resid = y - (slope * x + intercept)
        r2 = 1.0 - float((resid ** 2).sum()) / ss_tot
    return RegressionFit(slope=slope, intercept=intercept, r_squared=r2, n=x.size)


def one_way_anova(groups: list) -> AnovaResult:
    """One-way fixed-effects ANOVA over >= 2 groups of observations.

    eta-squared is SS_between / SS_total.  Degenerate cases: all
    observations identical gives F = 0 and eta^2 = 0; zero within-group
    variance with distinct group means gives F = +inf and eta^2 = 1.
    Raises when fewer than 2 groups, any group is empty, or the residual
    degrees of freedom vanish.
    """
    arrays = [np.asarray(g, dtype=float).reshape(-1) for g in groups]
    if len(arrays) < 2:
        raise ValueError("ANOVA needs at least 2 groups")
    if any(a.size == 0 for a in arrays):
        raise ValueError("ANOVA groups must be non-empty")
    if any(not np.all(np.isfinite(a)) for a in arrays):
        raise ValueError("ANOVA observations must be finite")
    n_total = sum(a.size for a in arrays)
    k = len(arrays)
    df_between = k - 1
    df_within = n_total - k
    if df_within <= 0:
        raise ValueError("ANOVA requires residual degrees of freedom "
                         "(more observations than groups)")
    grand = np.concatenate(arrays).mean()
    ss_between = float(sum(a.size * (a.mean() - grand) ** 2 for a in arrays))
    ss_within = float(sum(((a - a.mean()) ** 2).sum() for a in arrays))
    ss_total = ss_between + ss_within
    if ss_total == 0.0:
        f_stat = 0.0
        eta2 = 0.0
    elif ss_within == 0.0:
        f_stat = float("inf")
        eta2 = 1.0
    else:
        f_stat = (ss_between / df_between) / (ss_within / df_within)
        eta2 = ss_between / ss_total
    return AnovaResult(
        f_statistic=f_stat, eta_squared=eta2,
        ss_between=ss_between, ss_within=ss_within,
        df_between=df_between, df_within=df_within,
        n_groups=k, n_total=n_total,
    )


def percentile_summary(values) -> PercentileSummary:
    """Min / p25 / median / p75 / max with linear interpolation."""
    arr = np.asarray(values, dtype=float).reshape(-1)
    if arr.size == 0:
        raise ValueError("cannot summarize an empty sample")
    if not np.all(np.isfinite(arr)):
        raise ValueError("sample must be finite")
    return PercentileSummary(
        minimum=float(arr.min()),
        p25=float(np.percentile(arr, 25)),
        median=float(np.percentile(arr, 50)),
        p75=float(np.percentile(arr, 75)),
        maximum=float(arr.max()),
    )


def label_clicks(trace: ForceTrace, threshold: float = CLICK_THRESHOLD,
                 min_segment_length: int = 1) -> ClickLabels:
    """Label click frames on a force trace.

    A frame is active when its sample exceeds threshold x trial maximum
    (strictly).  Maximal runs of active frames at least
    min_segment_length long count as clicks only if they contain a strict
    local maximum of the signal (the first index of a flat plateau
    qualifies).  An all-zero trace yields no clicks.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must be a fraction in (0, 1)")
    if min_segment_length < 1:
        raise ValueError("min_segment_length must be >= 1")
    s = trace.samples
    n = s.size
    labels = np.zeros(n, dtype=bool)
    level = threshold * trace.trial_max
    if trace.trial_max <= 0:
        return ClickLabels(frame_labels=labels, segments=[], threshold_value=level)
    active = s > level

    def has_peak(i0: int, i1: int) -> bool:
        for i in range(i0, i1):
            left = s[i - 1] if i > 0 else -np.inf
            if not s[i] > left:
                continue
            # scan past any plateau of equal samples
            j = i
            while j + 1 < n and s[j + 1] == s[i]:
                j += 1
            right = s[j + 1] if j + 1 < n else -np.inf
            if s[i] > right:
                return True
        return False

    segments: list[ClickSegment] = []
    i = 0
    while i < n:
        if not active[i]:
            i += 1
            continue
        j = i
        while j < n and active[j]:
            j += 1
        if (j - i) >= min_segment_length and has_peak(i, j):
            segments.append(ClickSegment(start=i, end=j))
            labels[i:j] = True
        i = j
    return ClickLabels(frame_labels=labels, segments=segments, threshold_value=level)


def per_click_majority(frame_predictions, labels: ClickLabels) -> list[bool]:
    """Collapse per-frame boolean predictions to one vote per click segment.

    Majority of predicted-positive frames wins; an exact tie counts as
    positive (favouring detection).
    """
    preds = np.asarray(frame_predictions, dtype=bool).reshape(-1)
    if preds.size != labels.frame_labels.size:
        raise ValueError("frame predictions must match the labeled trace length")
    votes = []
    for seg in labels.segments:
        span = preds[seg.start:seg.end]
        votes.append(bool(span.sum() * 2 >= span.size))
    return votes


def classification_report(predicted, actual) -> ClassificationReport:
    """Binary accuracy plus support-weighted precision / recall / F1.

    Per-class scores use the 0-denominator convention score = 0, then are
    averaged weighted by true-class support.
    """
    pred = np.asarray(predicted, dtype=bool).reshape(-1)
    act = np.asarray(actual, dtype=bool).reshape(-1)
    if pred.shape != act.shape or pred.size == 0:
        raise ValueError("prediction and truth vectors must match and be non-empty")
    tp = int(np.sum(pred & act))
    tn = int(np.sum(~pred & ~act))
    fp = int(np.sum(pred & ~act))
    fn = int(np.sum(~pred & act))
    n = pred.size

    def prf(tp_, fp_, fn_):
        precision = tp_ / (tp_ + fp_) if (tp_ + fp_) else 0.0
        recall = tp_ / (tp_ + fn_) if (tp_ + fn_) else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if (precision + recall) else 0.0)
        return precision, recall, f1

    p_pos, r_pos, f_pos = prf(tp, fp, fn)
    p_neg, r_neg, f_neg = prf(tn, fn, fp)
    support_pos = tp + fn
    support_neg = tn + fp
    return ClassificationReport(
        accuracy=(tp + tn) / n,
        precision_weighted=(p_pos * support_pos + p_neg * support_neg) / n,
        recall_weighted=(r_pos * support_pos + r_neg * support_neg) / n,
        f1_weighted=(f_pos * support_pos + f_neg * support_neg) / n,
        confusion=np.array([[tn, fp], [fn, tp]]),
        support={"positive": support_pos, "negative": support_neg},
    )


def load_force_trace(path) -> ForceTrace:
    """Read a force trace CSV with columns timestamp_s, reading."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(row for row in fh if not row.startswith("#"))
        if reader.fieldnames is None or not {"timestamp_s", "reading"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns timestamp_s, reading")
        times = []
        readings = []
        for record in reader:
            times.append(float(record["timestamp_s"]))
            readings.append(float(record["reading"]))
    return ForceTrace(timestamps=np.asarray(times), samples=np.asarray(readings))
