"""Accuracy measures, capacity lookup and the Wilcoxon signed-rank test."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from importlib import resources
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .errors import DataError

FACILITIES = ("freeway", "multilane")
# valid free-flow speed range per facility, mi/h
FACILITY_RANGE = {"freeway": (55, 75), "multilane": (45, 70)}


def _pair(actual, predicted):
    y = np.asarray(actual, dtype=float)
    yhat = np.asarray(predicted, dtype=float)
    if y.shape != yhat.shape or y.ndim != 1:
        raise DataError(f"actual {y.shape} and predicted {yhat.shape} must be equal-length vectors")
    if y.size == 0:
        raise DataError("no points to score")
    return y, yhat


def r_squared(actual, predicted) -> float:
    y, yhat = _pair(actual, predicted)
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        raise DataError("R^2 undefined: actual volumes have zero variance")
    return 1.0 - float(np.sum((y - yhat) ** 2)) / sst


def mape(actual, predicted):
    """Mean absolute percentage error over hours with positive volume.

    Returns ``(percent, n_excluded)`` where ``n_excluded`` counts zero-volume
    hours left out because the ratio is undefined there.
    """
    y, yhat = _pair(actual, predicted)
    keep = y > 0
    if not keep.any():
        raise DataError("MAPE undefined: every actual volume is zero")
    value = float(np.mean(np.abs(yhat[keep] - y[keep]) / y[keep])) * 100.0
    return value, int(np.count_nonzero(~keep))


def etcr(actual, predicted, capacity_per_lane: float, lanes: int) -> float:
    """Mean absolute error as a percentage of carriageway capacity."""
    if lanes < 1 or not capacity_per_lane > 0:
        raise DataError(f"need lanes >= 1 and positive capacity, got {lanes}, {capacity_per_lane}")
    y, yhat = _pair(actual, predicted)
    return float(np.mean(np.abs(yhat - y))) / (capacity_per_lane * lanes) * 100.0


def emfr(actual, predicted) -> float:
    """Mean absolute error as a percentage of the largest observed volume."""
    y, yhat = _pair(actual, predicted)
    y_max = float(y.max())
    if not y_max > 0:
        raise DataError("EMFR undefined: maximum observed volume is zero")
    return float(np.mean(np.abs(yhat - y))) / y_max * 100.0


@dataclass(frozen=True)
class MetricReport:
    r_squared: float
    mape: float
    etcr: float
    emfr: float
    n_points: int
    n_excluded_zero_targets: int

    MEASURES = ("r_squared", "mape", "etcr", "emfr")

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(actual, predicted, capacity_per_lane: float, lanes: int) -> MetricReport:
    y, yhat = _pair(actual, predicted)
    m, excluded = mape(y, yhat)
    return MetricReport(
        r_squared=r_squared(y, yhat),
        mape=m,
        etcr=etcr(y, yhat, capacity_per_lane, lanes),
        emfr=emfr(y, yhat),
        n_points=int(y.size),
        n_excluded_zero_targets=excluded,
    )


class CapacityTable:
    """Per-lane capacity by free-flow speed on a 5 mi/h grid."""

    def __init__(self, rows):
        # rows: (ffs, freeway or None, multilane or None)
        self.rows = sorted(((int(f), fw, ml) for f, fw, ml in rows), reverse=True)
        self._by_speed = {f: {"freeway": fw, "multilane": ml} for f, fw, ml in self.rows}

    @classmethod
    def from_csv(cls, path) -> "CapacityTable":
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.lstrip().startswith("#")]
        reader = csv.DictReader(lines)
        parse = lambda v: None if v.strip().upper() in ("NA", "N/A", "") else float(v)
        try:
            rows = [(float(r["free_flow_speed"]), parse(r["freeway_capacity"]), parse(r["multilane_capacity"]))
                    for r in reader]
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: bad capacity table ({exc})") from exc
        return cls(rows)

    @classmethod
    def default(cls) -> "CapacityTable":
        with resources.as_file(resources.files("probevol") / "data" / "capacity_table.csv") as p:
            return cls.from_csv(p)

    def speeds(self, facility: str) -> list:
        return sorted(f for f, caps in self._by_speed.items() if caps[facility] is not None)

    def lookup(self, free_flow_speed: float, facility: str) -> float:
        if facility not in FACILITIES:
            raise ValueError(f"facility must be one of {FACILITIES}, got {facility!r}")
        if not free_flow_speed > 0:
            raise ValueError("free-flow speed must be positive")
        valid = self.speeds(facility)
        lo, hi = valid[0], valid[-1]
        snapped = 5 * math.floor(free_flow_speed / 5 + 0.5)
        snapped = min(max(snapped, lo), hi)
        return float(self._by_speed[snapped][facility])


_DEFAULT_TABLE: Optional[CapacityTable] = None


def capacity_lookup(free_flow_speed: float, facility: str, table: Optional[CapacityTable] = None) -> float:
    """Round FFS to the nearest 5 mi/h, clamp to the facility's range, look up pc/h/ln."""
    global _DEFAULT_TABLE
    if table is None:
        if _DEFAULT_TABLE is None:
            _DEFAULT_TABLE = CapacityTable.default()
        table = _DEFAULT_TABLE
    return table.lookup(free_flow_speed, facility)


# --- Wilcoxon signed-rank -----------------------------------------------------

EXACT_MAX_N = 20


def _exact_two_sided(ranks: np.ndarray, w_plus: float) -> float:
    # Doubled ranks are integers even with average-rank ties; count sign
    # patterns by subset-sum dynamic programming over all 2^n assignments.
    doubled = np.rint(ranks * 2).astype(int)
    total = int(doubled.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    probs = counts / counts.sum()
    w = int(round(w_plus * 2))
    lower = probs[: w + 1].sum()
    upper = probs[w:].sum()
    return float(min(1.0, 2.0 * min(lower, upper)))


def _normal_two_sided(ranks: np.ndarray, w_plus: float) -> float:
    n = ranks.size
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, math.erfc(z / math.sqrt(2.0))))


def wilcoxon_signed_rank(differences, method: str = "auto", min_nonzero: int = 5):
    """Two-sided signed-rank test of zero median difference.

    Zero differences are dropped and tied magnitudes share their average rank.
    ``method='auto'`` enumerates the null distribution exactly for up to 20
    nonzero differences and uses the continuity-corrected normal
    approximation beyond. Returns ``(W+, p_value)``.
    """
    d = np.asarray(differences, dtype=float)
    d = d[d != 0]
    n = d.size
    if n < min_nonzero:
        raise DataError(f"signed-rank test needs at least {min_nonzero} nonzero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal"
    if method == "exact":
        return w_plus, _exact_two_sided(ranks, w_plus)
    if method == "normal":
        return w_plus, _normal_two_sided(ranks, w_plus)
    raise ValueError(f"unknown method {method!r}")
