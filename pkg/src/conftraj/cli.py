"""Command-line entry point.

Subcommands: generate, fit, calibrate, evaluate, sweep, stratify, risk.
Each run reads a JSON config (with flag overrides for seed and output
directory), writes its artifacts under the output directory, and drops a
resolved copy of the config beside them.  Outputs are byte-identical
across runs with the same config and seed.

Exit codes: 0 success, 1 user/config error, 2 internal numerical error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

from . import conformal, risk as risk_mod
from .data_model import CsvSchema, load_csv, save_csv, split, standardize
from .errors import ConfigurationError, ConftrajError, NumericalError
from .evaluation import (evaluate_split, fit_predictor, run_protocol,
                         stratified_compare, sweep_calibration_fraction)
from .predictors import load_model, save_model
from .synth import GroupSpec, SynthConfig, generate

SCHEMA_TAG = "conftraj-output-v1"

_KNOWN_KEYS = {
    "synth": {"n_subjects", "feature_dim", "max_time", "visits_mean", "noise_std",
              "progressor_frac", "slope_stable", "slope_progressor",
              "heterogeneity_std", "feature_signal", "group_spec", "direction",
              "varying_horizon", "min_horizon"},
    "data": {"path", "truth_path", "feature_cols", "group_cols",
             "subject_col", "time_col", "value_col"},
    "predictor": {"kind", "options", "model_dir"},
    "conformal": {"alpha", "group_by"},
    "evaluation": {"n_splits", "test_frac", "calib_frac", "mode", "fracs"},
    "risk": {"direction", "bootstrap_B"},
}
_TOP_KEYS = set(_KNOWN_KEYS) | {"seed", "out"}


def _validate_config(cfg: dict):
    for key in cfg:
        if key not in _TOP_KEYS:
            raise ConfigurationError(f"unknown config key {key!r}")
        if key in _KNOWN_KEYS:
            section = cfg[key]
            if not isinstance(section, dict):
                raise ConfigurationError(f"config section {key!r} must be an object")
            for sub in section:
                if sub not in _KNOWN_KEYS[key]:
                    raise ConfigurationError(f"unknown key {key}.{sub!r}")


def _load_config(args) -> dict:
    cfg = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
    _validate_config(cfg)
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)
    if args.out is not None:
        cfg["out"] = args.out
    if "out" not in cfg:
        raise ConfigurationError("output directory required (--out or config 'out')")
    return cfg


def _outdir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_resolved(cfg, out: Path):
    _write_json(out / "resolved_config.json", {"schema": SCHEMA_TAG, "config": cfg})


def _synth_config(cfg) -> SynthConfig:
    section = dict(cfg.get("synth", {}))
    groups = tuple(
        GroupSpec(g["column"], tuple(g["categories"]), tuple(g["probs"]),
                  g.get("noise_multipliers", {}), g.get("progressor_rates", {}))
        for g in section.pop("group_spec", []))
    return SynthConfig(seed=cfg["seed"], group_spec=groups, **section)


def _csv_schema(cfg) -> CsvSchema:
    d = cfg.get("data", {})
    return CsvSchema(subject_col=d.get("subject_col", "subject_id"),
                     time_col=d.get("time_col", "time_months"),
                     value_col=d.get("value_col", "biomarker"),
                     feature_cols=tuple(d.get("feature_cols", ())),
                     group_cols=tuple(d.get("group_cols", ())))


def _load_dataset(cfg):
    d = cfg.get("data", {})
    if "path" not in d:
        raise ConfigurationError("data.path is required for this command")
    return load_csv(d["path"], _csv_schema(cfg))


def _load_truth(cfg) -> dict:
    d = cfg.get("data", {})
    if "truth_path" not in d:
        raise ConfigurationError("data.truth_path is required for the risk command")
    truth = {}
    with open(d["truth_path"], newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            truth[row["subject_id"]] = {
                "is_progressor": row["is_progressor"].lower() in ("1", "true"),
                "true_slope": float(row["true_slope"])}
    return truth


def _eval_params(cfg):
    e = cfg.get("evaluation", {})
    return (e.get("n_splits", 10), e.get("test_frac", 0.10),
            e.get("calib_frac", 0.20))


def _alpha(cfg) -> float:
    alpha = cfg.get("conformal", {}).get("alpha", 0.1)
    if not 0 < alpha < 1:
        raise ConfigurationError(
            f"conformal.alpha must be in (0,1), got {alpha} (conformal.calibrate precondition)")
    return alpha


def _cal_to_doc(cal) -> dict:
    if isinstance(cal, conformal.GroupCalibration):
        return {"group_by": cal.grouping_column,
                "per_group": {g: _cal_to_doc(c) for g, c in sorted(cal.per_group.items())},
                "fallback": _cal_to_doc(cal.fallback)}
    return {"alpha": cal.alpha, "n": cal.n, "rank": cal.rank,
            "radius": cal.radius if cal.finite else "inf"}


def cmd_generate(cfg):
    out = _outdir(cfg)
    ds, truth = generate(_synth_config(cfg))
    save_csv(ds, out / "cohort.csv")
    with open(out / "truth.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "is_progressor", "true_slope"])
        for sid in sorted(truth):
            writer.writerow([sid, int(truth[sid]["is_progressor"]),
                             repr(truth[sid]["true_slope"])])
    _write_resolved(cfg, out)


def cmd_fit(cfg):
    out = _outdir(cfg)
    ds = _load_dataset(cfg)
    _, test_frac, calib_frac = _eval_params(cfg)
    idx = split(ds, test_frac, calib_frac, cfg["seed"])
    train_std, stats = standardize(ds.subset(idx.train))
    pred = cfg.get("predictor", {})
    model = fit_predictor(pred.get("kind", "gp"), train_std, seed=cfg["seed"],
                          **pred.get("options", {}))
    save_model(model, out / "model.json")
    _write_json(out / "scaling.json",
                {"schema": SCHEMA_TAG, "mean": stats.mean, "std": stats.std})
    _write_resolved(cfg, out)


def cmd_calibrate(cfg):
    out = _outdir(cfg)
    ds = _load_dataset(cfg)
    model_dir = Path(cfg.get("predictor", {}).get("model_dir", out))
    model = load_model(model_dir / "model.json")
    with open(model_dir / "scaling.json", encoding="utf-8") as fh:
        sc = json.load(fh)
    from .data_model import StandardizationStats
    stats = StandardizationStats(sc["mean"], sc["std"])
    _, test_frac, calib_frac = _eval_params(cfg)
    idx = split(ds, test_frac, calib_frac, cfg["seed"])
    calib_std, _ = standardize(ds.subset(idx.calib), stats)
    scores = conformal.score_dataset(model, calib_std)
    alpha = _alpha(cfg)
    group_by = cfg.get("conformal", {}).get("group_by")
    if group_by:
        cal = conformal.mondrian_calibrate(calib_std, scores, group_by, alpha)
    else:
        cal = conformal.calibrate(scores, alpha)
    _write_json(out / "calibration.json", {"schema": SCHEMA_TAG, **_cal_to_doc(cal)})
    _write_resolved(cfg, out)


def _report_rows(report, split_idx, group=""):
    rows = [{"split": split_idx, "group": group, "metric": "coverage",
             "value": report.mean_coverage},
            {"split": split_idx, "group": group, "metric": "width",
             "value": report.mean_width},
            {"split": split_idx, "group": group, "metric": "n_infinite_bands",
             "value": report.n_infinite_bands}]
    for g, stats in sorted((report.per_group or {}).items()):
        for m in ("coverage", "width", "n"):
            rows.append({"split": split_idx, "group": g, "metric": m,
                         "value": stats[m]})
    return rows


def _write_rows(path: Path, rows, fieldnames):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def cmd_evaluate(cfg):
    out = _outdir(cfg)
    ds = _load_dataset(cfg)
    n_splits, test_frac, calib_frac = _eval_params(cfg)
    pred = cfg.get("predictor", {})
    report = run_protocol(ds, pred.get("kind", "gp"), _alpha(cfg),
                          n_splits=n_splits, test_frac=test_frac,
                          calib_frac=calib_frac, seed=cfg["seed"],
                          group_by=cfg.get("conformal", {}).get("group_by"),
                          mode=cfg.get("evaluation", {}).get("mode", "conformal"),
                          predictor_opts=pred.get("options", {}))
    _write_json(out / "report.json", {
        "schema": SCHEMA_TAG, "mean": report.mean, "p95": report.p95,
        "deviation_p95": report.deviation_p95,
        "splits": [{"coverage": r.mean_coverage, "width": r.mean_width,
                    "n_test": r.n_test, "n_infinite_bands": r.n_infinite_bands,
                    "per_time_width": {str(k): v for k, v in r.per_time_width.items()},
                    "per_group": r.per_group}
                   for r in report.reports]})
    rows = []
    for i, r in enumerate(report.reports):
        rows.extend(_report_rows(r, i))
    _write_rows(out / "report.csv", rows, ["split", "group", "metric", "value"])
    _write_resolved(cfg, out)


def cmd_sweep(cfg):
    out = _outdir(cfg)
    ds = _load_dataset(cfg)
    pred = cfg.get("predictor", {})
    _, test_frac, _ = _eval_params(cfg)
    rows = sweep_calibration_fraction(
        ds, pred.get("kind", "gp"), _alpha(cfg),
        fracs=cfg.get("evaluation", {}).get("fracs"), seed=cfg["seed"],
        test_frac=test_frac, predictor_opts=pred.get("options", {}))
    _write_rows(out / "sweep.csv", rows,
                ["calib_frac", "coverage", "width", "n_infinite_bands"])
    _write_resolved(cfg, out)


def cmd_stratify(cfg):
    out = _outdir(cfg)
    ds = _load_dataset(cfg)
    group_by = cfg.get("conformal", {}).get("group_by")
    if not group_by:
        raise ConfigurationError("stratify requires conformal.group_by")
    pred = cfg.get("predictor", {})
    _, test_frac, calib_frac = _eval_params(cfg)
    results = stratified_compare(ds, pred.get("kind", "gp"), _alpha(cfg),
                                 group_by, seed=cfg["seed"], test_frac=test_frac,
                                 calib_frac=calib_frac,
                                 predictor_opts=pred.get("options", {}))
    rows = []
    for method in ("population", "group_conditional"):
        report = results[method]
        for g, stats in sorted((report.per_group or {}).items()):
            rows.append({"method": method, "group": g,
                         "coverage": stats["coverage"], "width": stats["width"],
                         "n": stats["n"]})
    _write_rows(out / "stratify.csv", rows, ["method", "group", "coverage", "width", "n"])
    _write_resolved(cfg, out)


def cmd_risk(cfg):
    out = _outdir(cfg)
    ds = _load_dataset(cfg)
    truth = _load_truth(cfg)
    pred = cfg.get("predictor", {})
    _, test_frac, calib_frac = _eval_params(cfg)
    idx = split(ds, test_frac, calib_frac, cfg["seed"])
    train_std, stats = standardize(ds.subset(idx.train))
    calib_std, _ = standardize(ds.subset(idx.calib), stats)
    test_std, _ = standardize(ds.subset(idx.test), stats)
    model = fit_predictor(pred.get("kind", "gp"), train_std, seed=cfg["seed"],
                          **pred.get("options", {}))
    scores = conformal.score_dataset(model, calib_std)
    cal = conformal.calibrate(scores, _alpha(cfg))
    r = cfg.get("risk", {})
    records, reports = risk_mod.risk_pipeline(
        test_std, truth, model, cal, r.get("direction", "decreasing"),
        bootstrap_B=r.get("bootstrap_B", 2000), seed=cfg["seed"])

    rows = []
    for name in ("roc_hat", "rocb"):
        rep = reports[name]
        for metric, value in (("precision", rep.precision), ("recall", rep.recall),
                              ("f1", rep.f1),
                              ("balanced_accuracy", rep.balanced_accuracy)):
            lo, hi = rep.ci_95[metric]
            rows.append({"method": name, "metric": metric, "tau_star": rep.tau_star,
                         "value": value, "ci_lo": lo, "ci_hi": hi})
    _write_rows(out / "risk.csv", rows,
                ["method", "metric", "tau_star", "value", "ci_lo", "ci_hi"])
    _write_rows(out / "threshold_free.csv",
                [{"method": name, "roc_auc": reports[name].roc_auc,
                  "pr_auc": reports[name].pr_auc, "n": reports[name].n,
                  "n_excluded": reports[name].n_excluded}
                 for name in ("roc_hat", "rocb")],
                ["method", "roc_auc", "pr_auc", "n", "n_excluded"])
    _write_resolved(cfg, out)


_COMMANDS = {"generate": cmd_generate, "fit": cmd_fit, "calibrate": cmd_calibrate,
             "evaluate": cmd_evaluate, "sweep": cmd_sweep,
             "stratify": cmd_stratify, "risk": cmd_risk}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="conftraj",
        description="Conformal prediction bands for randomly-timed trajectories")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--jobs", type=int, default=1,
                       help="reserved for parallel splits; merging is deterministic")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        _COMMANDS[args.command](cfg)
    except NumericalError as exc:
        print(f"error [numerical]: {exc}", file=sys.stderr)
        return 2
    except (ConftrajError, OSError, json.JSONDecodeError) as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
