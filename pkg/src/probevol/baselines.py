"""Reference estimators: typical-week volume profiles, ridge-guarded least
squares, brute-force k-nearest neighbours, and prediction averaging."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import linalg

from .errors import DataError

DAY_NAMES = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")


def weekday_hour(timestamps):
    """Weekday (Mon=0) and hour for an array of datetime64 timestamps."""
    hours = np.asarray(timestamps, dtype="datetime64[h]").astype(np.int64)
    days = np.floor_divide(hours, 24)
    return (days + 3) % 7, hours % 24   # 1970-01-01 was a Thursday


@dataclass(frozen=True)
class ProfileFactors:
    """``day_factor[d]`` sums to 7; each ``hourly_share[d]`` row sums to 1."""

    day_factor: np.ndarray       # (7,)
    hourly_share: np.ndarray     # (7, 24)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["day", "hour", "share", "day_factor"])
            for d in range(7):
                for h in range(24):
                    w.writerow([DAY_NAMES[d], h, repr(float(self.hourly_share[d, h])),
                                repr(float(self.day_factor[d]))])

    @classmethod
    def from_csv(cls, path) -> "ProfileFactors":
        day_factor = np.full(7, np.nan)
        share = np.full((7, 24), np.nan)
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                d = DAY_NAMES.index(rec["day"])
                share[d, int(rec["hour"])] = float(rec["share"])
                day_factor[d] = float(rec["day_factor"])
        if np.isnan(share).any() or np.isnan(day_factor).any():
            raise DataError(f"{path}: incomplete profile table")
        return cls(day_factor, share)

    @classmethod
    def uniform(cls) -> "ProfileFactors":
        return cls(np.ones(7), np.full((7, 24), 1.0 / 24))


def derive_profile_factors(timestamps, volumes, groups, aadt) -> ProfileFactors:
    """Typical-week factors from observed hourly volumes.

    For every carriageway (``groups``) and calendar day with all 24 hours
    observed, each hour's share of the daily total is taken; shares are
    averaged per weekday within a carriageway and then across carriageways.
    Day factors are the mean daily total on each weekday relative to the
    carriageway's AADT, averaged across carriageways and rescaled to sum to 7.
    """
    wd, hr = weekday_hour(timestamps)
    frame = pd.DataFrame({
        "group": np.asarray(groups, dtype=object),
        "day": np.asarray(timestamps, dtype="datetime64[h]").astype("datetime64[D]"),
        "weekday": wd,
        "hour": hr,
        "volume": np.asarray(volumes, dtype=float),
        "aadt": np.asarray(aadt, dtype=float),
    })
    if frame["volume"].isna().any():
        raise DataError("profile derivation needs observed volumes on every row")
    daily = frame.groupby(["group", "day"]).agg(
        total=("volume", "sum"), hours=("hour", "nunique"), weekday=("weekday", "first"),
        aadt=("aadt", "first"),
    )
    daily = daily[(daily["hours"] == 24) & (daily["total"] > 0)]
    if daily.empty:
        raise DataError("no complete day of observations to build a profile from")
    missing = sorted(set(range(7)) - set(daily["weekday"]))
    if missing:
        raise DataError(f"no complete days for weekday(s) {[DAY_NAMES[d] for d in missing]}")

    full = frame.join(daily[["total"]], on=["group", "day"], how="inner")
    full["share"] = full["volume"] / full["total"]
    per_group = full.groupby(["group", "weekday", "hour"])["share"].mean()
    share = per_group.groupby(["weekday", "hour"]).mean().unstack("hour")
    share = share.reindex(index=range(7), columns=range(24)).fillna(0.0).to_numpy()
    share = share / share.sum(axis=1, keepdims=True)

    daily["ratio"] = daily["total"] / daily["aadt"]
    ratio = daily.groupby(["group", "weekday"])["ratio"].mean().groupby("weekday").mean()
    day_factor = ratio.reindex(range(7)).to_numpy()
    day_factor = day_factor * 7.0 / day_factor.sum()
    return ProfileFactors(day_factor, share)


def profile_estimate(factors: ProfileFactors, aadt, timestamp):
    """AADT x day factor x hourly share. Accepts scalars or arrays."""
    wd, hr = weekday_hour(np.atleast_1d(np.asarray(timestamp, dtype="datetime64[h]")))
    est = np.asarray(aadt, dtype=float) * factors.day_factor[wd] * factors.hourly_share[wd, hr]
    if np.ndim(timestamp) == 0 and np.ndim(aadt) == 0:
        return float(est[0])
    return est


@dataclass(frozen=True)
class LinearModel:
    coef: np.ndarray
    intercept: float
    ridge: float


def linreg_fit(X, y, ridge_scale: float = 1e-6) -> LinearModel:
    """Least squares via the normal equations on centered data.

    A ridge term ``ridge_scale * trace(Xc'Xc) / n`` keeps the system
    solvable for collinear or duplicated columns.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("linear regression needs a nonempty 2-D design matrix")
    x_mean = X.mean(axis=0)
    y_mean = float(y.mean())
    Xc = X - x_mean
    gram = Xc.T @ Xc
    ridge = max(ridge_scale * float(np.trace(gram)) / X.shape[0], 1e-12)
    coef = linalg.solve(gram + ridge * np.eye(X.shape[1]), Xc.T @ (y - y_mean), assume_a="pos")
    return LinearModel(coef, y_mean - float(x_mean @ coef), ridge)


def linreg_predict(model: LinearModel, X, clamp: bool = True):
    est = np.asarray(X, dtype=float) @ model.coef + model.intercept
    return np.maximum(est, 0.0) if clamp else est


@dataclass(frozen=True)
class KNNModel:
    X: np.ndarray
    y: np.ndarray


def knn_fit(X, y) -> KNNModel:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0 or y.shape != (X.shape[0],):
        raise DataError("k-NN needs a nonempty design matrix with one target per row")
    return KNNModel(X.copy(), y.copy())


def knn_predict(model: KNNModel, Q, k: int, chunk: int = 256):
    """Mean target of the ``k`` nearest rows (Euclidean); distance ties go to
    the earlier training row."""
    n = model.X.shape[0]
    if not 1 <= k <= n:
        raise DataError(f"k={k} must lie in [1, {n}]")
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    sq_train = np.einsum("ij,ij->i", model.X, model.X)
    out = np.empty(Q.shape[0])
    for start in range(0, Q.shape[0], chunk):
        q = Q[start:start + chunk]
        d2 = np.einsum("ij,ij->i", q, q)[:, None] - 2.0 * (q @ model.X.T) + sq_train[None, :]
        np.maximum(d2, 0.0, out=d2)
        nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
        out[start:start + chunk] = model.y[nearest].mean(axis=1)
    return out


def ensemble_average(predictions):
    preds = [np.asarray(p, dtype=float) for p in predictions]
    if len(preds) < 2:
        raise DataError("an ensemble needs at least two members")
    if any(p.shape != preds[0].shape for p in preds):
        raise DataError("ensemble members predict different numbers of points")
    return np.mean(np.stack(preds), axis=0)
