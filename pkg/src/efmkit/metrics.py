"""Micro-aggregated confusion counting, segmentation metrics, and a two-sample t-test.

Counts are pooled over whole prediction sets ("micro" aggregation): sum the
per-image confusion tallies first, compute ratios once at the end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class ConfusionCounts:
    """Pooled binary confusion tallies; positive class is 1."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ParameterError("confusion counts must be nonnegative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            tn=self.tn + other.tn,
            fn=self.fn + other.fn,
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricReport:
    """Sensitivity, specificity, F1, precision, and balanced accuracy in [0, 1].

    ``degenerate`` lists metrics whose denominator was zero; those are
    reported as 0 rather than raising.
    """

    se: float
    sp: float
    f1: float
    ppv: float
    bacc: float
    degenerate: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "se": self.se,
            "sp": self.sp,
            "f1": self.f1,
            "ppv": self.ppv,
            "bacc": self.bacc,
            "degenerate": list(self.degenerate),
        }


def _as_binary(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    uniq = np.unique(arr)
    if not np.isin(uniq, (0, 1)).all():
        raise ParameterError(f"{name} must be binary 0/1, found values {uniq[:5]}")
    return arr.astype(bool)


def accumulate(counts: ConfusionCounts, predicted, truth) -> ConfusionCounts:
    """Return ``counts`` plus the elementwise confusion tallies of one prediction set."""
    pred = _as_binary(predicted, "predicted")
    true = _as_binary(truth, "truth")
    if pred.shape != true.shape:
        raise ShapeError(f"predicted and truth lengths differ: {pred.shape} vs {true.shape}")
    tp = int(np.count_nonzero(pred & true))
    fp = int(np.count_nonzero(pred & ~true))
    fn = int(np.count_nonzero(~pred & true))
    tn = pred.size - tp - fp - fn
    return counts + ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def _ratio(num: int, den: int, name: str, degenerate: list[str]) -> float:
    if den == 0:
        degenerate.append(name)
        return 0.0
    return num / den


def metrics(counts: ConfusionCounts) -> MetricReport:
    """Compute SE, SP, F1, PPV, BACC from pooled counts; 0/0 ratios become 0."""
    degenerate: list[str] = []
    se = _ratio(counts.tp, counts.tp + counts.fn, "se", degenerate)
    sp = _ratio(counts.tn, counts.tn + counts.fp, "sp", degenerate)
    f1 = _ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn, "f1", degenerate)
    ppv = _ratio(counts.tp, counts.tp + counts.fp, "ppv", degenerate)
    return MetricReport(se=se, sp=sp, f1=f1, ppv=ppv, bacc=(se + sp) / 2, degenerate=tuple(degenerate))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    reject: bool
    df: float


def ttest2(sample_a, sample_b, alpha: float = 0.05, equal_var: bool = True) -> TTestResult:
    """Two-sample Student's t-test (pooled variance by default, Welch otherwise).

    The two-sided p-value comes from the t CDF expressed through the
    regularized incomplete beta function.  Rejects when ``p < alpha``.
    """
    a = np.asarray(sample_a, dtype=float).reshape(-1)
    b = np.asarray(sample_b, dtype=float).reshape(-1)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise ParameterError(f"each sample needs >= 2 values, got {na} and {nb}")
    va = a.var(ddof=1)
    vb = b.var(ddof=1)
    diff = a.mean() - b.mean()
    if equal_var:
        df = float(na + nb - 2)
        pooled = ((na - 1) * va + (nb - 1) * vb) / df
        denom = math.sqrt(pooled * (1.0 / na + 1.0 / nb))
    else:
        qa, qb = va / na, vb / nb
        denom = math.sqrt(qa + qb)
        if qa + qb > 0:
            df = (qa + qb) ** 2 / (qa**2 / (na - 1) + qb**2 / (nb - 1))
        else:
            df = float(na + nb - 2)
    if denom == 0.0:
        # both samples degenerate: identical constants are a perfect null
        if diff == 0.0:
            return TTestResult(t=0.0, p=1.0, reject=False, df=df)
        return TTestResult(t=math.copysign(math.inf, diff), p=0.0, reject=True, df=df)
    t = diff / denom
    p = float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))
    return TTestResult(t=t, p=p, reject=bool(p < alpha), df=df)


CSV_COLUMNS = ("model", "se", "sp", "bacc", "f1", "ppv")


def report_csv_row(model_name: str, report: MetricReport) -> str:
    """One CSV row in the fixed (model, se, sp, bacc, f1, ppv) column order."""
    return ",".join(
        [model_name]
        + [f"{v:.6f}" for v in (report.se, report.sp, report.bacc, report.f1, report.ppv)]
    )
