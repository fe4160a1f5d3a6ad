"""Evaluation metrics: endpoint MAE, fold sigma, relative length error (MWA), paired t-test."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .measurement import MeasurementLine

REPORT_FIELDS = (
    "n", "mae", "sigma", "mwa_mean", "mwa_p50", "mwa_p75", "mwa_p95",
    "t_score", "df", "p_value", "mean_diff",
)


@dataclass
class EvalPair:
    predicted: MeasurementLine
    truth: MeasurementLine
    image_id: str = ""

    def __post_init__(self):
        if not self.truth.length_px > 0:
            raise ValueError(f"{self.image_id}: ground-truth line has zero length")


@dataclass
class MetricsReport:
    n: int
    mae: float
    sigma: float
    mwa_mean: float
    mwa_p50: float
    mwa_p75: float
    mwa_p95: float
    t_score: float
    df: float
    p_value: float
    mean_diff: float

    def as_dict(self) -> dict:
        return asdict(self)


def _endpoint_errors(pairs: Sequence[EvalPair]) -> np.ndarray:
    errs = []
    for p in pairs:
        for a, b in ((p.predicted.top, p.truth.top), (p.predicted.bottom, p.truth.bottom)):
            errs.append(math.hypot(a[0] - b[0], a[1] - b[1]))
    return np.array(errs)


def mae(pairs: Sequence[EvalPair]) -> float:
    """Mean Euclidean distance over all 2N endpoints, top matched to top."""
    if not pairs:
        raise ValueError("mae: no pairs")
    return float(_endpoint_errors(pairs).mean())


def sigma(fold_pairs: Sequence[Sequence[EvalPair]]) -> float:
    """Population standard deviation of the per-fold MAE values."""
    if len(fold_pairs) < 2:
        raise ValueError(f"sigma: need at least 2 folds, got {len(fold_pairs)}")
    return float(np.std([mae(p) for p in fold_pairs]))


def percentile(values: Iterable[float], q: float) -> float:
    """Linear interpolation at fractional rank q/100 * (n - 1) of the sorted values."""
    v = np.sort(np.asarray(list(values), dtype=np.float64))
    if v.size == 0:
        raise ValueError("percentile: empty input")
    if not 0 <= q <= 100:
        raise ValueError(f"percentile: q must be in [0, 100], got {q}")
    pos = q / 100.0 * (v.size - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (pos - lo) * (v[hi] - v[lo]))


@dataclass
class MWAResult:
    errors: np.ndarray  # percent, one per pair
    mean: float
    p50: float
    p75: float
    p95: float


def relative_length_error(pair: EvalPair) -> float:
    truth = pair.truth.length_px
    if not truth > 0:
        raise ValueError(f"{pair.image_id}: ground-truth line has zero length")
    return abs((truth - pair.predicted.length_px) / truth) * 100.0


def mwa(pairs: Sequence[EvalPair]) -> MWAResult:
    if not pairs:
        raise ValueError("mwa: no pairs")
    errs = np.array([relative_length_error(p) for p in pairs])
    return MWAResult(
        errs, float(errs.mean()), percentile(errs, 50), percentile(errs, 75), percentile(errs, 95)
    )


# ---------------------------------------------------------------------------
# Student t via the regularised incomplete beta function


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-15) -> float:
    # modified Lentz evaluation of the continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc: a and b must be positive")
    if x <= 0:
        return 0.0
    if x >= 1:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_tailed_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("t_two_tailed_p: df must be positive")
    if not math.isfinite(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


@dataclass
class TTestResult:
    t_score: float
    df: int
    p_value: float
    mean_difference: float


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired_t_test: length mismatch {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("paired_t_test: need at least 2 pairs")
    d = a - b
    mean_d = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise ValueError("paired_t_test: differences have zero variance")
    t = mean_d / (sd / math.sqrt(n))
    return TTestResult(t, n - 1, t_two_tailed_p(t, n - 1), mean_d)


# ---------------------------------------------------------------------------
# reports


def _lengths(pairs: Sequence[EvalPair], which: str) -> list[float]:
    lines = [getattr(p, which) for p in pairs]
    if all(ln.length_mm is not None for ln in lines):
        return [ln.length_mm for ln in lines]
    return [ln.length_px for ln in lines]


def build_report(pairs: Sequence[EvalPair], sigma_value: Optional[float] = None) -> MetricsReport:
    """All report fields for a set of pairs.

    ``sigma_value`` overrides sigma (the cross-fold value for pooled reports);
    otherwise sigma is the population spread of per-endpoint errors. The
    t-test compares predicted against true lengths, in mm when every line
    carries a scale.
    """
    if not pairs:
        raise ValueError("build_report: no pairs")
    m = mwa(pairs)
    s = sigma_value if sigma_value is not None else float(np.std(_endpoint_errors(pairs)))
    try:
        tt = paired_t_test(_lengths(pairs, "predicted"), _lengths(pairs, "truth"))
        t_score, df, p_value, mean_diff = tt.t_score, tt.df, tt.p_value, tt.mean_difference
    except ValueError:
        t_score = df = p_value = float("nan")
        mean_diff = float(np.mean(np.subtract(_lengths(pairs, "predicted"), _lengths(pairs, "truth"))))
    return MetricsReport(
        len(pairs), mae(pairs), s, m.mean, m.p50, m.p75, m.p95, t_score, df, p_value, mean_diff
    )


def write_report_kv(report: MetricsReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for name in REPORT_FIELDS:
            fh.write(f"{name} = {_fmt(getattr(report, name))}\n")


def read_report_kv(path) -> MetricsReport:
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = float(val)
    values["n"] = int(values["n"])
    return MetricsReport(**values)


def write_reports_csv(rows: Sequence[tuple[str, MetricsReport]], path) -> None:
    """One row per (label, report); label column first, then the fixed field names."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("fold",) + REPORT_FIELDS)
        for label, rep in rows:
            writer.writerow([label] + [_fmt(getattr(rep, f)) for f in REPORT_FIELDS])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))

