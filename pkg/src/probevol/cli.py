"""Command-line front end.

Every command reads a flat ``key = value`` config file (``#`` starts a
comment) and lets flags override individual keys. Outputs land in
``<output_dir>/seed-<seed>/<command>/``, so a rerun with the same inputs
rewrites the same files with the same bytes.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import os
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import __version__, baselines, harness, synth
from .errors import ConfigError, DataError, ProbevolError
from .features import PROFILE_COL, TIME_FORMAT, fit_standardizer, load_dataset
from .metrics import CapacityTable
from .modelfile import load_model, save_model
from .nn import TrainConfig, predict, train


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple:
    parts = [p for p in str(text).replace(" ", "").split(",") if p]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def _str_list(text: str) -> tuple:
    parts = tuple(p.strip() for p in str(text).split(",") if p.strip())
    if not parts:
        raise ValueError("empty list")
    return parts


def _date(text: str) -> dt.date:
    return dt.date.fromisoformat(str(text).strip())


@dataclass(frozen=True)
class Option:
    name: str
    parse: object
    default: object
    help: str
    commands: tuple = ()        # empty: every command


_DATA = ("train", "predict", "cv", "compare", "quintiles", "study")
_MODEL = ("train", "cv", "compare", "quintiles", "study")
_GEN = ("generate",)

OPTIONS = (
    Option("seed", int, None, "base random seed (required)"),
    Option("output_dir", str, "runs", "root directory for run outputs"),
    Option("observations", str, None, "hourly observation CSV", _DATA),
    Option("stations", str, None, "station metadata CSV", _DATA),
    Option("holidays", str, None, "holiday list (YYYY-MM-DD,Name per line)", _DATA),
    Option("capacity_table", str, None, "capacity table CSV (bundled table if unset)", _DATA),
    Option("jobs", int, 1, "maximum number of folds run concurrently", ("cv", "compare", "quintiles", "study")),
    # model
    Option("method", str, "ann", f"estimator: {', '.join(harness.METHODS)}", ("train", "cv", "study")),
    Option("method_a", str, "ann", "first method of a comparison", ("compare",)),
    Option("method_b", str, "profile", "second method of a comparison", ("compare",)),
    Option("methods", _str_list, ("ann", "profile"), "comma-separated methods to group", ("quintiles",)),
    Option("hidden_dims", _int_list, (256, 256, 256), "comma-separated hidden layer widths", _MODEL),
    Option("activation", str, "elu", "elu or sigmoid", _MODEL),
    Option("activation_param", float, 1.0, "ELU alpha or sigmoid slope", _MODEL),
    Option("keep_prob", float, 0.5, "dropout keep probability for hidden units", _MODEL),
    Option("k", int, 4, "neighbours for the k-NN baseline", _MODEL),
    Option("profile_source", str, "fold", "fold: refit typical-week factors on training stations; "
                                          "column: use the profile_estimate column", _MODEL),
    Option("epochs", int, 200, "training epochs", _MODEL),
    Option("batch_size", int, 256, "minibatch size", _MODEL),
    Option("learning_rate", float, 1e-3, "Adam step size", _MODEL),
    Option("beta1", float, 0.9, "Adam first-moment decay", _MODEL),
    Option("beta2", float, 0.999, "Adam second-moment decay", _MODEL),
    Option("epsilon", float, 1e-8, "Adam denominator guard", _MODEL),
    Option("loss", str, "mae", "training loss: mae or mse", _MODEL),
    Option("scale_targets", _bool, True, "scale the output layer by the target spread", _MODEL),
    # command specific
    Option("model", str, None, "model file to score with", ("predict",)),
    Option("profile_factors", str, None, "typical-week factor CSV for the profile column "
                                         "(defaults to the one saved beside the model)", ("predict",)),
    Option("key", str, "probe_volume", "quintile key: probe_volume or penetration", ("quintiles",)),
    Option("which", str, "dropout", "appendix study: overfit or dropout", ("study",)),
    Option("study_stations", _str_list, None, "stations used by the study (all if unset)", ("study",)),
    # generator
    Option("n_stations", int, 10, "number of synthetic stations", _GEN),
    Option("n_days", int, 90, "days of hourly data", _GEN),
    Option("start_date", _date, dt.date(2016, 6, 1), "first day (YYYY-MM-DD)", _GEN),
    Option("penetration_low", float, 0.008, "lowest station probe penetration", _GEN),
    Option("penetration_high", float, 0.045, "highest station probe penetration", _GEN),
    Option("aadt_error", float, 0.25, "sd of the log error in reported AADT", _GEN),
    Option("shape_spread", float, 1.0, "scale of station-specific diurnal shape differences", _GEN),
    Option("day_noise", float, 0.08, "sd of the log daily demand shock", _GEN),
    Option("hour_noise", float, 0.12, "sd of the log hourly demand deviation", _GEN),
)
_BY_NAME = {o.name: o for o in OPTIONS}

COMMANDS = {
    "generate": "write a synthetic world as CSV files",
    "train": "fit one model on every row and save it",
    "predict": "score observations with a saved model",
    "cv": "leave-one-station-out evaluation of one method",
    "compare": "evaluate two methods and test their paired differences",
    "quintiles": "group carriageways by probe volume or penetration",
    "study": "overfitting or dropout study",
}


def _applies(opt: Option, command: str) -> bool:
    return not opt.commands or command in opt.commands


def read_config_file(path) -> dict:
    """Flat ``key = value`` pairs; blank lines and ``#`` comments ignored."""
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value
    return out


def resolve_config(command: str, file_values: dict, overrides: dict) -> dict:
    """Typed settings for ``command``: defaults < config file < flags."""
    cfg = {o.name: o.default for o in OPTIONS if _applies(o, command)}
    for source, values in (("config file", file_values), ("flag", overrides)):
        for key, raw in values.items():
            if raw is None:
                continue
            opt = _BY_NAME.get(key)
            if opt is None:
                raise ConfigError(f"unknown setting {key!r} in {source}")
            if not _applies(opt, command):
                continue    # shared config files may carry keys for other commands
            if isinstance(raw, str):
                try:
                    raw = opt.parse(raw)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {exc}") from exc
            cfg[key] = raw
    if cfg.get("seed") is None:
        raise ConfigError("a seed is required (config 'seed = N' or --seed N)")
    for name in ("observations", "stations"):
        if name in cfg and cfg[name] is None:
            raise ConfigError(f"setting {name!r} is required for {command}")
    for name in ("observations", "stations", "holidays", "capacity_table", "model", "profile_factors"):
        if cfg.get(name) is not None and not os.path.exists(cfg[name]):
            raise ConfigError(f"{name} file {cfg[name]} does not exist")
    if command == "predict" and cfg["model"] is None:
        raise ConfigError("predict needs a model file")
    if cfg.get("jobs", 1) < 1:
        raise ConfigError("jobs must be >= 1")
    return cfg


def model_config(cfg: dict, method: Optional[str] = None) -> harness.ModelConfig:
    tcfg = TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"],
        beta1=cfg["beta1"], beta2=cfg["beta2"], epsilon=cfg["epsilon"], seed=cfg["seed"],
        loss=cfg["loss"], scale_targets=cfg["scale_targets"],
    )
    if tcfg.loss not in ("mae", "mse"):
        raise ConfigError("loss must be mae or mse")
    if tcfg.epochs < 0 or tcfg.batch_size < 1 or tcfg.learning_rate <= 0:
        raise ConfigError("epochs must be >= 0, batch_size >= 1 and learning_rate > 0")
    mc = harness.ModelConfig(
        method=method or cfg.get("method", "ann"), hidden_dims=tuple(cfg["hidden_dims"]), activation=cfg["activation"],
        activation_param=cfg["activation_param"], keep_prob=cfg["keep_prob"], k=cfg["k"],
        profile_source=cfg["profile_source"], train=tcfg,
    )
    mc.validate()
    return mc


def run_dir(cfg: dict, command: str) -> str:
    path = os.path.join(cfg["output_dir"], f"seed-{cfg['seed']}", command)
    os.makedirs(path, exist_ok=True)
    return path


def _format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def write_resolved_config(path, cfg: dict) -> None:
    with open(path, "w") as fh:
        for key in sorted(cfg):
            if cfg[key] is not None:
                fh.write(f"{key} = {_format_value(cfg[key])}\n")


def _write_text(path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _dataset(cfg):
    return load_dataset(cfg["observations"], cfg["stations"], cfg["holidays"])


def _capacity(cfg):
    return CapacityTable.from_csv(cfg["capacity_table"]) if cfg.get("capacity_table") else None


# --- commands ------------------------------------------------------------------

def cmd_generate(cfg: dict) -> str:
    gen = synth.GeneratorConfig(
        n_stations=cfg["n_stations"], start_date=cfg["start_date"], n_days=cfg["n_days"], seed=cfg["seed"],
        penetration_range=(cfg["penetration_low"], cfg["penetration_high"]), aadt_error=cfg["aadt_error"],
        shape_spread=cfg["shape_spread"], day_noise=cfg["day_noise"], hour_noise=cfg["hour_noise"],
    )
    out = run_dir(cfg, "generate")
    synth.export_dataset(synth.generate_world(gen), out)
    write_resolved_config(os.path.join(out, "config.txt"), cfg)
    return out


def cmd_train(cfg: dict) -> str:
    mc = model_config(cfg)
    if mc.method not in ("ann", "ann_nobn"):
        raise ConfigError("train fits a single network; method must be ann or ann_nobn")
    ds = _dataset(cfg)
    if np.isnan(ds.y).any():
        raise DataError("training needs target_volume on every row")
    out = run_dir(cfg, "train")
    X = ds.X
    if mc.profile_source == "fold":
        groups = [f"{s}|{d}" for s, d in zip(ds.station_ids, ds.directions)]
        factors = baselines.derive_profile_factors(ds.timestamps, ds.y, groups, ds.aadt())
        factors.to_csv(os.path.join(out, "profile_factors.csv"))
        X = X.copy()
        X[:, PROFILE_COL] = baselines.profile_estimate(factors, ds.aadt(), ds.timestamps)
    std = fit_standardizer(X)
    spec = mc.layer_spec(X.shape[1], mc.method == "ann")
    params, history = train(std.apply(X), ds.y, spec, mc.train)
    save_model(os.path.join(out, "model.json"), params, spec, std)
    with open(os.path.join(out, "loss_history.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mae"])
        for epoch, mae in enumerate(history.train_mae, 1):
            w.writerow([epoch, repr(float(mae))])
    write_resolved_config(os.path.join(out, "config.txt"), cfg)
    return out


PREDICTION_COLUMNS = ("station_id", "direction", "timestamp", "predicted_volume")


def cmd_predict(cfg: dict) -> str:
    params, spec, std = load_model(cfg["model"])
    ds = _dataset(cfg)
    factors_path = cfg["profile_factors"]
    if factors_path is None:
        beside = os.path.join(os.path.dirname(os.path.abspath(cfg["model"])), "profile_factors.csv")
        factors_path = beside if os.path.exists(beside) else None
    X = ds.X
    if factors_path is not None:
        X = X.copy()
        X[:, PROFILE_COL] = baselines.profile_estimate(
            baselines.ProfileFactors.from_csv(factors_path), ds.aadt(), ds.timestamps)
    if std is not None:
        X = std.apply(X)
    est = predict(params, spec, X)
    out = run_dir(cfg, "predict")
    with open(os.path.join(out, "predictions.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for s, d, t, v in zip(ds.station_ids, ds.directions, ds.timestamps, est):
            w.writerow([s, d, t.astype(dt.datetime).strftime(TIME_FORMAT), repr(float(v))])
    write_resolved_config(os.path.join(out, "config.txt"), cfg)
    return out


def _write_cv_outputs(out, ds, results_by_method, comparisons=None):
    _write_text(os.path.join(out, "report.json"),
                harness.dumps_report(harness.cv_report(results_by_method, comparisons)))
    _write_text(os.path.join(out, "summary.txt"), harness.render_summary(results_by_method))
    harness.write_long_format(os.path.join(out, "measures_long.csv"), results_by_method)
    harness.write_predictions(os.path.join(out, "predictions.csv"), ds, results_by_method)


def cmd_cv(cfg: dict) -> str:
    mc = model_config(cfg)
    ds = _dataset(cfg)
    results = harness.run_cv(ds, mc, cfg["seed"], cfg["jobs"], capacity_table=_capacity(cfg))
    out = run_dir(cfg, f"cv-{mc.method}")
    _write_cv_outputs(out, ds, {mc.method: results})
    write_resolved_config(os.path.join(out, "config.txt"), cfg)
    return out


def cmd_compare(cfg: dict) -> str:
    a, b = cfg["method_a"], cfg["method_b"]
    if a == b:
        raise ConfigError("compare needs two different methods")
    ds = _dataset(cfg)
    table = _capacity(cfg)
    results = {m: harness.run_cv(ds, model_config(cfg, m), cfg["seed"], cfg["jobs"], capacity_table=table)
               for m in (a, b)}
    comparison = harness.compare_methods(results[a], results[b])
    out = run_dir(cfg, f"compare-{a}-{b}")
    _write_cv_outputs(out, ds, results, {f"{a}-{b}": comparison})
    lines = [f"{a} minus {b}, paired signed-rank test over {comparison['mape']['n']} carriageways"]
    for measure, entry in comparison.items():
        p = "n/a (all differences zero)" if entry["degenerate"] else f"{entry['p_value']:.4g}"
        lines.append(f"{measure:<10} median difference {entry['median_difference']:.4f}  p = {p}")
    _write_text(os.path.join(out, "comparison.txt"), "\n".join(lines) + "\n")
    write_resolved_config(os.path.join(out, "config.txt"), cfg)
    return out


def cmd_quintiles(cfg: dict) -> str:
    ds = _dataset(cfg)
    table = _capacity(cfg)
    results = {m: harness.run_cv(ds, model_config(cfg, m), cfg["seed"], cfg["jobs"], capacity_table=table)
               for m in cfg["methods"]}
    report = harness.quintile_analysis(results, cfg["key"])
    out = run_dir(cfg, f"quintiles-{cfg['key']}")
    _write_text(os.path.join(out, "quintiles.json"), harness.dumps_report(report))
    _write_text(os.path.join(out, "quintiles.txt"), harness.render_quintiles(report))
    write_resolved_config(os.path.join(out, "config.txt"), cfg)
    return out


def cmd_study(cfg: dict) -> str:
    which = cfg["which"]
    if which not in ("overfit", "dropout"):
        raise ConfigError("study must be overfit or dropout")
    mc = model_config(cfg)
    ds = _dataset(cfg)
    stations = list(cfg["study_stations"]) if cfg["study_stations"] else None
    out = run_dir(cfg, f"study-{which}")
    if which == "overfit":
        report = harness.overfit_study(ds, stations or ds.station_list, mc, cfg["seed"], cfg["jobs"])
        with open(os.path.join(out, "curves.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["station_id", "epoch", "train_mae", "val_mae"])
            for station, entry in report.items():
                for epoch, (tr, va) in enumerate(zip(entry["train_mae"], entry["val_mae"]), 1):
                    w.writerow([station, epoch, repr(float(tr)), repr(float(va))])
    else:
        report = harness.dropout_study(ds, mc, cfg["seed"], cfg["jobs"], stations)
    _write_text(os.path.join(out, f"{which}.json"), harness.dumps_report(report))
    write_resolved_config(os.path.join(out, "config.txt"), cfg)
    return out


HANDLERS = {
    "generate": cmd_generate, "train": cmd_train, "predict": cmd_predict, "cv": cmd_cv,
    "compare": cmd_compare, "quintiles": cmd_quintiles, "study": cmd_study,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="probevol",
        description="Hourly traffic volume estimation from probe vehicle counts.",
        epilog="Exit codes: 0 ok, 2 configuration error, 3 data or schema error, 4 numeric failure.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for command, text in COMMANDS.items():
        p = sub.add_parser(command, help=text, description=text,
                           epilog="Flags override values from --config.")
        p.add_argument("--config", help="flat 'key = value' config file; '#' starts a comment")
        for opt in OPTIONS:
            if not _applies(opt, command):
                continue
            default = "" if opt.default is None else f" (default: {_format_value(opt.default)})"
            p.add_argument(f"--{opt.name.replace('_', '-')}", dest=opt.name, default=None,
                           metavar=opt.name.upper(), help=opt.help + default)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)     # unknown flags exit with status 2
    command = args.command
    overrides = {o.name: getattr(args, o.name) for o in OPTIONS if _applies(o, command)}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(command, file_values, overrides)
        out = HANDLERS[command](cfg)
    except ProbevolError as exc:
        print(f"probevol {command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"probevol {command}: {exc}", file=sys.stderr)
        return DataError.exit_code
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
