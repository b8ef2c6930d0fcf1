"""Command-line interface.

Subcommands: classify, fit, simulate, compare, replicates. A JSON file
passed with ``--config`` supplies option values (and, for simulate and
replicates, scenario fields); explicit flags take precedence.

Exit codes: 0 ok, 2 input error, 3 estimation error, 4 internal error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from . import dataset, estimators, query_summarizer, simulator
from .errors import (
    ConfigError,
    ConvergenceError,
    EstimationError,
    PanelValidationError,
    RankError,
    AlignmentError,
)

EXIT_OK, EXIT_INPUT, EXIT_ESTIMATION, EXIT_INTERNAL = 0, 2, 3, 4

log = logging.getLogger("searchbias")


class InputError(Exception):
    pass


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return when.isoformat(timespec="seconds")


def write_manifest(out_dir: Path, command: str, config: dict, inputs=(), seed=None) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): _digest(p) for p in inputs},
        "version": __version__,
        "seed": seed,
        "timestamp": _timestamp(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(args, defaults: dict) -> dict:
    """Merge built-in defaults < config file < explicit flags."""
    resolved = dict(defaults)
    resolved.update({k: v for k, v in args.file_config.items() if k in defaults})
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            resolved[k] = v
    return resolved


def _require(path, what):
    if path is None:
        raise InputError(f"missing {what}")
    if not Path(path).is_file():
        raise InputError(f"{what} not found: {path}")
    return Path(path)


# classify

def cmd_classify(args) -> int:
    opts = _resolve(args, {"log": None, "daily": None, "taxonomy": None, "threshold_category": 0.5,
                           "threshold_target": 0.5, "threshold_competitor": 0.5, "match": "domain"})
    log_path = _require(opts["log"], "query log CSV")
    daily_path = _require(opts["daily"], "daily counts CSV")
    tax_path = _require(opts["taxonomy"], "taxonomy JSON")
    try:
        taxonomy = query_summarizer.UrlTaxonomy.from_json(tax_path.read_text(), opts["match"])
        thresholds = query_summarizer.Thresholds(opts["threshold_category"], opts["threshold_target"],
                                                 opts["threshold_competitor"])
        records = query_summarizer.read_query_log(log_path)
        daily = query_summarizer.read_daily_counts(daily_path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(str(exc)) from exc
    classes = query_summarizer.classify_queries(records, taxonomy, thresholds)
    volumes = query_summarizer.build_volume_panel(daily, classes)
    points, omitted = query_summarizer.emit_classification_scatter(classes)
    out = _out_dir(args)
    (out / "classification.csv").write_text(query_summarizer.classification_csv(classes))
    (out / "volumes.csv").write_text(volumes.to_csv())
    (out / "scatter.csv").write_text(query_summarizer.scatter_csv(points))
    write_manifest(out, "classify", opts | {"log": str(log_path), "daily": str(daily_path),
                                            "taxonomy": str(tax_path)},
                   [log_path, daily_path, tax_path], args.seed)
    counts = {}
    for c in classes:
        counts[c.segment] = counts.get(c.segment, 0) + 1
    print(json.dumps({"queries": len(classes), "segments": counts, "scatter_omitted": omitted}))
    return EXIT_OK


# panel loading shared by fit / compare

PANEL_OPTS = {"date_col": "date", "y_col": "sales", "x1_col": "spend", "v_cols": "v1,v2,v3", "x2_cols": ""}


def _load(path, opts) -> dataset.MmmPanel:
    v = [c.strip() for c in opts["v_cols"].split(",")]
    if len(v) != 3:
        raise InputError("--v-cols needs three column names")
    schema = {"date": opts["date_col"], "y": opts["y_col"], "x1": opts["x1_col"],
              "v1": v[0], "v2": v[1], "v3": v[2]}
    x2 = [c.strip() for c in opts["x2_cols"].split(",") if c.strip()]
    return dataset.load_panel(path, schema, x2)


def _method_name(name: str) -> str:
    m = name.replace("-", "_")
    estimators.get_method(m)
    return m


def _curve_csv(curve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "fit", "se", "lower", "upper"])
    for row in zip(curve.grid, curve.fit, curve.se, curve.lower, curve.upper):
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def _points_csv(curve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "partial_residual"])
    for x, r in zip(curve.data_x, curve.partial):
        w.writerow([repr(float(x)), repr(float(r))])
    return buf.getvalue()


def cmd_fit(args) -> int:
    opts = _resolve(args, {"panel": None, "method": "sbc", "delta": estimators.DEFAULT_DELTA, **PANEL_OPTS})
    panel_path = _require(opts["panel"], "panel CSV")
    try:
        method = _method_name(opts["method"])
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    panel = _load(panel_path, opts)
    fn = estimators.get_method(method)
    est = fn(panel, delta=opts["delta"]) if method == "sbc_monotone" else fn(panel)
    out = _out_dir(args)
    payload = est.to_dict()
    (out / "estimate.json").write_text(json.dumps(payload, indent=2) + "\n")
    if est.fit is not None:
        for label, curve in est.fit.curves.items():
            stem = label.replace("(", "_").replace(")", "").replace(",", "_")
            (out / f"curve_{stem}.csv").write_text(_curve_csv(curve))
            (out / f"points_{stem}.csv").write_text(_points_csv(curve))
    write_manifest(out, "fit", opts | {"panel": str(panel_path)}, [panel_path], args.seed)
    print(json.dumps({"method": est.method, "beta1": est.beta1, "se": est.se,
                      "edf": payload.get("edf"), "adj_r2": payload.get("adj_r2")}))
    return EXIT_OK


# simulate / replicates

def _scenario(args, extra_defaults) -> tuple:
    fields = {f for f in simulator.ScenarioConfig.__dataclass_fields__}
    unknown = set(args.file_config) - fields - set(vars(args))
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = {k: v for k, v in args.file_config.items() if k in fields}
    for key in ("scenario", "n_days"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if args.seed is not None:
        cfg["seed"] = args.seed
    opts = _resolve(args, extra_defaults)
    return simulator.ScenarioConfig.from_dict(cfg), opts


def cmd_simulate(args) -> int:
    config, _ = _scenario(args, {})
    out_sim = simulator.simulate(config)
    out = _out_dir(args)
    (out / "panel.csv").write_text(dataset.panel_to_csv(out_sim.panel, {"x1": "spend", "y": "sales"}))
    (out / "truth.json").write_text(out_sim.truth_json() + "\n")
    inputs = [args.config] if args.config else []
    write_manifest(out, "simulate", config.to_dict(), inputs, config.seed)
    print(json.dumps({"rows": len(out_sim.panel), "beta1": config.beta1, "gamma": out_sim.gamma}))
    return EXIT_OK


def cmd_replicates(args) -> int:
    config, opts = _scenario(args, {"reps": 100, "methods": "naive,demand_adjusted,sbc"})
    try:
        methods = [_method_name(m) for m in opts["methods"].split(",") if m.strip()]
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    study = simulator.replicate_study(config, int(opts["reps"]), methods)
    out = _out_dir(args)
    (out / "replicates.csv").write_text(study.to_csv())
    (out / "replicates.json").write_text(json.dumps(study.to_dict(), indent=2, sort_keys=True) + "\n")
    inputs = [args.config] if args.config else []
    write_manifest(out, "replicates", {"scenario": config.to_dict(), **opts}, inputs, config.seed)
    sys.stdout.write(study.to_text())
    return EXIT_OK


def cmd_compare(args) -> int:
    opts = _resolve(args, {"panel": None, "methods": ",".join(estimators.TABLE_METHODS),
                           "reference": None, "index_to_reference": False, "split_by_year": False,
                           **PANEL_OPTS})
    panel_path = _require(opts["panel"], "panel CSV")
    try:
        methods = [_method_name(m) for m in opts["methods"].split(",") if m.strip()]
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    panel = _load(panel_path, opts)
    ref = tuple(float(v) for v in opts["reference"]) if opts["reference"] else None
    if opts["index_to_reference"] and ref is None:
        raise InputError("--index-to-reference needs --reference ESTIMATE SE")
    report = estimators.compare_estimators(panel, ref, methods, index=bool(opts["index_to_reference"]),
                                           split_by_year=bool(opts["split_by_year"]))
    out = _out_dir(args)
    (out / "comparison.csv").write_text(report.to_csv())
    (out / "comparison.json").write_text(report.to_json() + "\n")
    write_manifest(out, "compare", opts | {"panel": str(panel_path)}, [panel_path], args.seed)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--out-dir", default=None, help="output directory (default: .)")
    common.add_argument("--config", default=None, help="JSON file of option values")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="searchbias", parents=[common],
                                     description="Selection-bias corrected search ROAS estimation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("classify", parents=[common], help="segment queries and build volume series")
    p.add_argument("--log", help="query log CSV (query,url,count)")
    p.add_argument("--daily", help="daily counts CSV (date,query,count)")
    p.add_argument("--taxonomy", help="taxonomy JSON (advertiser, competitors, category domain lists)")
    p.add_argument("--threshold-category", type=float)
    p.add_argument("--threshold-target", type=float)
    p.add_argument("--threshold-competitor", type=float)
    p.add_argument("--match", choices=["domain", "prefix"])
    p.set_defaults(func=cmd_classify)

    def panel_flags(p):
        p.add_argument("--date-col")
        p.add_argument("--y-col")
        p.add_argument("--x1-col")
        p.add_argument("--v-cols", help="three comma-separated volume columns")
        p.add_argument("--x2-cols", help="comma-separated non-search spend columns")

    p = sub.add_parser("fit", parents=[common], help="fit one ROAS estimator")
    p.add_argument("panel", nargs="?")
    p.add_argument("--method", help="naive, demand-adjusted, sbc, sbc-tensor, sbc-monotone, sbc-x2")
    p.add_argument("--delta", type=float, help="relative spend increment for sbc-monotone")
    panel_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", parents=[common], help="simulate a scenario panel")
    p.add_argument("--scenario", choices=simulator.SCENARIOS)
    p.add_argument("--n-days", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", parents=[common], help="compare estimators on a panel")
    p.add_argument("panel", nargs="?")
    p.add_argument("--methods")
    p.add_argument("--reference", nargs=2, metavar=("ESTIMATE", "SE"))
    p.add_argument("--index-to-reference", action="store_true", default=None)
    p.add_argument("--split-by-year", action="store_true", default=None)
    panel_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("replicates", parents=[common], help="bias/coverage over simulated replicates")
    p.add_argument("--scenario", choices=simulator.SCENARIOS)
    p.add_argument("--n-days", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--methods")
    p.set_defaults(func=cmd_replicates)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    try:
        args.file_config = {}
        if args.config:
            cfg_path = _require(args.config, "config file")
            args.file_config = {k.replace("-", "_"): v for k, v in json.loads(cfg_path.read_text()).items()}
        return args.func(args)
    except (InputError, PanelValidationError, AlignmentError, ConfigError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (EstimationError, RankError, ConvergenceError) as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except Exception as exc:  # pragma: no cover - last-resort handler
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
