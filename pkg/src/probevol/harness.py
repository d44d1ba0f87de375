"""Leave-one-station-out evaluation and the reports built on top of it.

A fold holds out every row of one station (both carriageways), fits the
standardizer, profile factors and model on the remaining stations only, and
scores each held-out carriageway separately. Fold seeds derive from
``(base_seed, fold_index)``, so running folds in parallel or in any order
gives the same numbers.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy import stats
from threadpoolctl import threadpool_limits

from . import baselines, metrics
from .errors import ConfigError, DataError
from .features import PROFILE_COL, Dataset, fit_standardizer
from .nn import Activation, LayerSpec, LossHistory, NetworkParams, TrainConfig, predict, train

METHODS = ("ann", "ann_nobn", "profile", "linreg", "knn", "ensemble")
MEASURES = metrics.MetricReport.MEASURES
PROBE_HOUR_COLS = [0, 1, 3, 4, 6, 7]     # first + second half hour, all classes
FFS_COL = 10


@dataclass
class ModelConfig:
    method: str = "ann"
    hidden_dims: tuple = (256, 256, 256)
    activation: str = "elu"
    activation_param: float = 1.0
    keep_prob: float = 0.5
    k: int = 4
    profile_source: str = "fold"      # "fold": refit profile factors per fold; "column": use the CSV value
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.profile_source not in ("fold", "column"):
            raise ConfigError("profile_source must be 'fold' or 'column'")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        try:
            self.layer_spec(84, True)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def layer_spec(self, input_dim: int, batchnorm: bool) -> LayerSpec:
        return LayerSpec(input_dim, tuple(self.hidden_dims), 1,
                         Activation(self.activation, self.activation_param), batchnorm, self.keep_prob)


@dataclass
class CarriagewayResult:
    station_id: str
    direction: str
    actuals: np.ndarray
    predictions: np.ndarray
    report: metrics.MetricReport
    avg_probe_volume: float
    penetration_rate: float
    capacity_per_lane: float
    lanes: int

    @property
    def key(self) -> tuple:
        return (self.station_id, self.direction)

    @property
    def label(self) -> str:
        return f"{self.station_id}-{self.direction}"


@dataclass
class FoldResult:
    fold_index: int
    held_out_station: str
    train_stations: list
    carriageways: list                      # CarriagewayResult
    history: Optional[LossHistory] = None
    params: Optional[list] = None           # NetworkParams per ANN member
    train_mape: dict = field(default_factory=dict)   # training carriageway label -> MAPE


def loso_folds(stations: Sequence[str]) -> list:
    """One ``(train_stations, test_station)`` pair per station, in sorted order."""
    ids = sorted(set(stations))
    if len(ids) < 2:
        raise DataError(f"leave-one-station-out needs at least 2 stations, got {len(ids)}")
    return [([s for s in ids if s != test], test) for test in ids]


def fold_seed(base_seed: int, fold_index: int, member: int = 0) -> int:
    return int(np.random.SeedSequence([base_seed, fold_index, member]).generate_state(1)[0])


def carriageway_capacity(dataset: Dataset, key, rows, table=None) -> float:
    meta = dataset.stations[key]
    ffs = float(np.median(dataset.X[rows, FFS_COL]))
    return metrics.capacity_lookup(ffs, meta.facility, table)


def score_carriageways(dataset: Dataset, mask, predictions, table=None) -> list:
    """Per-carriageway metrics for the rows selected by ``mask``."""
    idx = np.flatnonzero(mask)
    keys = list(zip(dataset.station_ids[idx], dataset.directions[idx]))
    out = []
    for key in sorted(set(keys)):
        sel = np.array([k == key for k in keys])
        rows = idx[sel]
        y = dataset.y[rows]
        yhat = np.asarray(predictions)[sel]
        cap = carriageway_capacity(dataset, key, rows, table)
        lanes = dataset.stations[key].lanes
        probe_hour = dataset.X[rows][:, PROBE_HOUR_COLS].sum(axis=1)
        total = float(y.sum())
        out.append(CarriagewayResult(
            station_id=key[0], direction=key[1], actuals=y, predictions=yhat,
            report=metrics.evaluate(y, yhat, cap, lanes),
            avg_probe_volume=float(probe_hour.mean()),
            penetration_rate=float(probe_hour.sum() / total) if total > 0 else float("nan"),
            capacity_per_lane=cap, lanes=lanes,
        ))
    return out


def _fit_predict(method, config: ModelConfig, Xtr, ytr, Xte, seed, validation):
    """Returns ``(test_predictions, train_predictions, history, params_list)``."""
    if method == "profile":
        return Xte[:, PROFILE_COL].copy(), Xtr[:, PROFILE_COL].copy(), None, None
    std = fit_standardizer(Xtr)
    Ztr, Zte = std.apply(Xtr), std.apply(Xte)
    if method == "linreg":
        model = baselines.linreg_fit(Ztr, ytr)
        return baselines.linreg_predict(model, Zte), baselines.linreg_predict(model, Ztr), None, None
    if method == "knn":
        model = baselines.knn_fit(Ztr, ytr)
        k = min(config.k, len(ytr))
        return baselines.knn_predict(model, Zte, k), None, None, None
    members = {"ann": [True], "ann_nobn": [False], "ensemble": [True, False]}[method]
    test_preds, train_preds, params_list, history = [], [], [], None
    for m, bn in enumerate(members):
        spec = config.layer_spec(Xtr.shape[1], bn)
        tcfg = replace(config.train, seed=fold_seed(seed, 0, m))
        val = None if validation is None else (std.apply(validation[0]), validation[1])
        params, hist = train(Ztr, ytr, spec, tcfg, validation=val)
        test_preds.append(predict(params, spec, Zte))
        train_preds.append(predict(params, spec, Ztr))
        params_list.append(params)
        history = history or hist
    if len(members) > 1:
        return (baselines.ensemble_average(test_preds), baselines.ensemble_average(train_preds),
                history, params_list)
    return test_preds[0], train_preds[0], history, params_list


def _profile_column(dataset: Dataset, train_mask) -> np.ndarray:
    """Profile estimates for every row from factors fitted on training rows."""
    groups = [f"{s}|{d}" for s, d in zip(dataset.station_ids[train_mask], dataset.directions[train_mask])]
    factors = baselines.derive_profile_factors(
        dataset.timestamps[train_mask], dataset.y[train_mask], groups, dataset.aadt()[train_mask])
    return baselines.profile_estimate(factors, dataset.aadt(), dataset.timestamps)


def run_fold(dataset: Dataset, fold_index: int, test_station: str, config: ModelConfig,
             base_seed: int = 0, record_train: bool = False, capacity_table=None,
             monitor_validation: bool = True) -> FoldResult:
    with threadpool_limits(limits=1):
        train_mask = dataset.station_ids != test_station
        test_mask = ~train_mask
        if not test_mask.any():
            raise DataError(f"fold {fold_index}: station {test_station} has no rows")
        train_ids = set(dataset.station_ids[train_mask].tolist())
        if test_station in train_ids:
            raise AssertionError("held-out station leaked into training rows")
        if np.isnan(dataset.y[train_mask]).any() or np.isnan(dataset.y[test_mask]).any():
            raise DataError("cross-validation needs target volumes on every row")
        X = dataset.X
        if config.profile_source == "fold":
            X = X.copy()
            X[:, PROFILE_COL] = _profile_column(dataset, train_mask)
        work = replace(dataset, X=X)
        validation = (X[test_mask], dataset.y[test_mask]) if monitor_validation else None
        test_pred, train_pred, history, params = _fit_predict(
            config.method, config, X[train_mask], dataset.y[train_mask], X[test_mask],
            fold_seed(base_seed, fold_index), validation)
        result = FoldResult(
            fold_index=fold_index,
            held_out_station=test_station,
            train_stations=sorted(train_ids),
            carriageways=score_carriageways(work, test_mask, test_pred, capacity_table),
            history=history,
            params=params,
        )
        if record_train and train_pred is not None:
            idx = np.flatnonzero(train_mask)
            labels = np.array([f"{s}-{d}" for s, d in zip(dataset.station_ids[idx], dataset.directions[idx])])
            for label in sorted(set(labels.tolist())):
                sel = labels == label
                result.train_mape[label] = metrics.mape(dataset.y[idx][sel], train_pred[sel])[0]
        return result


def run_cv(dataset: Dataset, config: ModelConfig, base_seed: int = 0, jobs: int = 1,
           stations: Optional[Sequence[str]] = None, record_train: bool = False,
           capacity_table=None, monitor_validation: bool = True) -> list:
    """Leave-one-station-out over all stations (or the ``stations`` subset
    as held-out folds). Results come back in fold order regardless of ``jobs``."""
    config.validate()
    folds = loso_folds(dataset.station_list)
    fold_ids = [(i, test) for i, (_, test) in enumerate(folds) if stations is None or test in set(stations)]
    if not fold_ids:
        raise DataError("no folds selected")
    run = lambda i, test: run_fold(dataset, i, test, config, base_seed, record_train,
                                   capacity_table, monitor_validation)
    if jobs == 1:
        return [run(i, test) for i, test in fold_ids]
    return list(Parallel(n_jobs=jobs)(
        delayed(run_fold)(dataset, i, test, config, base_seed, record_train, capacity_table, monitor_validation)
        for i, test in fold_ids))


def all_carriageways(results: Sequence[FoldResult]) -> list:
    return sorted((c for r in results for c in r.carriageways), key=lambda c: c.key)


# --- summaries ---------------------------------------------------------------

QUANTILE_LABELS = ("min", "p25", "median", "p75", "max")


def five_numbers(values) -> list:
    """Min, quartiles and max with linear interpolation between order statistics."""
    v = np.asarray(values, dtype=float)
    return [float(x) for x in np.percentile(v, [0, 25, 50, 75, 100], method="linear")]


def summarize(results: Sequence[FoldResult]) -> dict:
    """``{measure: {min, p25, median, p75, max}}`` across held-out carriageways."""
    cws = all_carriageways(results)
    if not cws:
        raise DataError("no carriageways to summarize")
    return {m: dict(zip(QUANTILE_LABELS, five_numbers([getattr(c.report, m) for c in cws])))
            for m in MEASURES}


def compare_methods(results_a: Sequence[FoldResult], results_b: Sequence[FoldResult]) -> dict:
    """Paired signed-rank test of per-carriageway differences (A minus B)."""
    a = {c.key: c.report for c in all_carriageways(results_a)}
    b = {c.key: c.report for c in all_carriageways(results_b)}
    if set(a) != set(b):
        raise DataError("methods were scored on different carriageways")
    keys = sorted(a)
    out = {}
    for m in MEASURES:
        diffs = np.array([getattr(a[k], m) - getattr(b[k], m) for k in keys])
        entry = {"n": len(keys), "median_difference": float(np.median(diffs)),
                 "statistic": None, "p_value": None, "degenerate": False}
        try:
            entry["statistic"], entry["p_value"] = metrics.wilcoxon_signed_rank(diffs)
        except DataError:
            entry["degenerate"] = True
        out[m] = entry
    return out


QUINTILE_KEYS = {"probe_volume": "avg_probe_volume", "penetration": "penetration_rate"}


def quintile_analysis(results_by_method: dict, key: str = "probe_volume", n_groups: int = 5) -> dict:
    """Split carriageways into ``n_groups`` contiguous groups by the key and
    report per-group medians for every method. Ties on the key go by id."""
    if key not in QUINTILE_KEYS:
        raise ConfigError(f"quintile key must be one of {tuple(QUINTILE_KEYS)}")
    attr = QUINTILE_KEYS[key]
    methods = list(results_by_method)
    per_method = {m: {c.key: c for c in all_carriageways(r)} for m, r in results_by_method.items()}
    ref = per_method[methods[0]]
    for m in methods[1:]:
        if set(per_method[m]) != set(ref):
            raise DataError(f"method {m} covers different carriageways")
    if len(ref) < n_groups:
        raise DataError(f"need at least {n_groups} carriageways, got {len(ref)}")
    order = sorted(ref, key=lambda k: (getattr(ref[k], attr), k))
    groups = []
    for members in np.array_split(np.arange(len(order)), n_groups):
        keys = [order[i] for i in members]
        values = [getattr(ref[k], attr) for k in keys]
        groups.append({
            "members": [f"{s}-{d}" for s, d in keys],
            "key_min": float(min(values)),
            "key_max": float(max(values)),
            "medians": {m: {meas: float(np.median([getattr(per_method[m][k].report, meas) for k in keys]))
                            for meas in MEASURES} for m in methods},
        })
    return {"key": key, "groups": groups}


# --- appendix studies --------------------------------------------------------

def overfit_flag(val_curve, tail_fraction: float = 0.25, alpha: float = 0.05, min_rise: float = 0.02) -> dict:
    """Flags a validation curve whose final stretch trends up.

    The tail slope must be positive, significant at ``alpha`` (one-sided), and
    the fitted rise over the tail must exceed ``min_rise`` of the tail mean.
    Level differences between training and validation are never flagged.
    """
    v = np.asarray(val_curve, dtype=float)
    n_tail = max(3, int(math.ceil(len(v) * tail_fraction)))
    if len(v) < n_tail or np.isnan(v).any():
        return {"flag": False, "slope": None, "p_value": None}
    tail = v[-n_tail:]
    fit = stats.linregress(np.arange(n_tail), tail)
    p_one_sided = fit.pvalue / 2 if fit.slope > 0 else 1 - fit.pvalue / 2
    rise = fit.slope * (n_tail - 1)
    flag = bool(fit.slope > 0 and p_one_sided < alpha and rise > min_rise * float(np.mean(tail)))
    return {"flag": flag, "slope": float(fit.slope), "p_value": float(p_one_sided)}


def overfit_study(dataset: Dataset, stations: Sequence[str], config: ModelConfig,
                  base_seed: int = 0, jobs: int = 1) -> dict:
    """Training/validation MAE curves with each listed station as validation."""
    if config.method not in ("ann", "ann_nobn"):
        raise ConfigError("the overfitting study needs an ANN method")
    results = run_cv(dataset, config, base_seed, jobs, stations=stations)
    out = {}
    for r in results:
        out[r.held_out_station] = {
            "train_mae": list(r.history.train_mae),
            "val_mae": list(r.history.val_mae),
            **overfit_flag(r.history.val_mae),
        }
    return out


def dropout_study(dataset: Dataset, config: ModelConfig, base_seed: int = 0, jobs: int = 1,
                  stations: Optional[Sequence[str]] = None) -> dict:
    """Median training and test MAPE with and without dropout, seeds shared."""
    if config.method not in ("ann", "ann_nobn"):
        raise ConfigError("the dropout study needs an ANN method")
    keep = config.keep_prob if config.keep_prob < 1 else 0.5
    runs = {}
    for name, p in (("with_dropout", keep), ("without_dropout", 1.0)):
        runs[name] = run_cv(dataset, replace(config, keep_prob=p), base_seed, jobs, stations=stations,
                            record_train=True, monitor_validation=False)
    return dropout_summary(runs["with_dropout"], runs["without_dropout"], keep)


def dropout_summary(with_dropout: Sequence[FoldResult], without_dropout: Sequence[FoldResult],
                    keep_prob: float) -> dict:
    """Train/test MAPE medians from two runs made with ``record_train``."""
    out = {}
    for name, p, results in (("with_dropout", keep_prob, with_dropout), ("without_dropout", 1.0, without_dropout)):
        train_mapes = [v for r in results for v in r.train_mape.values()]
        if not train_mapes:
            raise DataError("dropout summary needs runs made with record_train=True")
        test_mapes = [c.report.mape for c in all_carriageways(results)]
        out[name] = {
            "keep_prob": p,
            "median_train_mape": float(np.median(train_mapes)),
            "median_test_mape": float(np.median(test_mapes)),
            "train_mape": train_mapes,
            "test_mape": test_mapes,
        }
    for name in ("with_dropout", "without_dropout"):
        out[name]["gap"] = abs(out[name]["median_train_mape"] - out[name]["median_test_mape"])
    return out


# --- report output -----------------------------------------------------------

def cv_report(results_by_method: dict, comparisons: Optional[dict] = None) -> dict:
    report = {"methods": {}}
    for method, results in results_by_method.items():
        report["methods"][method] = {
            "summary": summarize(results),
            "carriageways": [
                {"carriageway": c.label, "fold": r.fold_index, **c.report.to_dict(),
                 "avg_probe_volume": c.avg_probe_volume, "penetration_rate": c.penetration_rate,
                 "capacity_per_lane": c.capacity_per_lane, "lanes": c.lanes}
                for r in results for c in r.carriageways
            ],
        }
    if comparisons:
        report["comparisons"] = comparisons
    return report


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, allow_nan=False) + "\n"


def render_summary(results_by_method: dict) -> str:
    """Plain-text five-number table, one block per measure."""
    buf = io.StringIO()
    methods = list(results_by_method)
    summaries = {m: summarize(r) for m, r in results_by_method.items()}
    width = max(12, *(len(m) + 2 for m in methods))
    for measure in MEASURES:
        buf.write(f"{measure}\n")
        buf.write(f"{'':<8}" + "".join(f"{m:>{width}}" for m in methods) + "\n")
        for q in QUANTILE_LABELS:
            buf.write(f"{q:<8}" + "".join(f"{summaries[m][measure][q]:>{width}.4f}" for m in methods) + "\n")
        buf.write("\n")
    return buf.getvalue()


def render_quintiles(report: dict) -> str:
    buf = io.StringIO()
    buf.write(f"grouped by {report['key']}\n")
    methods = list(report["groups"][0]["medians"])
    header = f"{'range':<22}" + "".join(f"{m + ':' + meas:>18}" for m in methods for meas in MEASURES)
    buf.write(header + "\n")
    for g in report["groups"]:
        rng = f"[{g['key_min']:.4g}, {g['key_max']:.4g}]"
        buf.write(f"{rng:<22}" + "".join(f"{g['medians'][m][meas]:>18.4f}" for m in methods for meas in MEASURES)
                  + "\n")
    return buf.getvalue()


LONG_FORMAT_HEADER = ("carriageway", "measure", "method", "value")


def write_long_format(path, results_by_method: dict) -> None:
    """Plot-ready rows: one per (carriageway, measure, method)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LONG_FORMAT_HEADER)
        for method, results in results_by_method.items():
            for c in all_carriageways(results):
                for m in MEASURES:
                    w.writerow([c.label, m, method, repr(float(getattr(c.report, m)))])


PREDICTIONS_HEADER = ("carriageway", "timestamp", "method", "actual", "predicted")


def write_predictions(path, dataset: Dataset, results_by_method: dict) -> None:
    """Per-hour held-out estimates, usable for scatter/heat-map plots."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTIONS_HEADER)
        for method, results in results_by_method.items():
            for c in all_carriageways(results):
                sel = (dataset.station_ids == c.station_id) & (dataset.directions == c.direction)
                for ts, y, yhat in zip(dataset.timestamps[sel], c.actuals, c.predictions):
                    w.writerow([c.label, str(ts).replace("T", " ") + ":00", method, repr(float(y)),
                                repr(float(yhat))])
