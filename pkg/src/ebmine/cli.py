"""
Command-line entry point.

Every subcommand writes its outputs into ``--out`` together with a
``manifest.json`` recording the configuration, SHA-256 digests of inputs and
outputs, and the package version. Exit status: 0 success, 1 runtime error,
2 configuration error.
"""

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from . import __version__
from .ebpredict import predict
from .fdr import evaluate_hurdles, hurdle_by13, hurdle_rw, hurdle_storey
from .panel import (format_month, load_panel, load_stats, parse_month, save_panel, save_stats,
                    summarize, tstat_histogram, window)
from .prior import FamilyParams, ModelSpec
from .qmlfit import METHODS, FitConfig, fit_all, starts_frame
from .select import BacktestConfig, fit_models, run_backtest, sort_accuracy
from .signals import (build_strategy_panel, enumerate_acct_signals, enumerate_pastret_signals,
                      enumerate_ticker_signals, load_stock_panel, save_signal_defs)
from .simgen import GeneratorSpec, fdp_simulate, generate_panel, prop1_harness

logger = logging.getLogger("ebmine")

THREADS_ENV = "EBMINE_THREADS"


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    subcommand: str
    out_dir: Path
    settings: dict
    inputs: Dict[str, Path] = field(default_factory=dict)
    outputs: Dict[str, Path] = field(default_factory=dict)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _clean(obj):
    """Replace non-finite floats so the JSON stays standard."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    return obj


def _write_csv(df: pd.DataFrame, path: Path, index=False) -> None:
    df.to_csv(path, index=index, lineterminator="\n")


def write_manifest(rc: RunConfig) -> Path:
    manifest = {
        "tool": "ebmine",
        "version": __version__,
        "subcommand": rc.subcommand,
        "config": rc.settings,
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in sorted(rc.inputs.items())},
        "outputs": {k: {"path": p.name, "sha256": _sha256(p)} for k, p in sorted(rc.outputs.items())},
    }
    path = rc.out_dir / "manifest.json"
    _write_json(path, _clean(manifest))
    return path


# --- argument parsing ------------------------------------------------------

def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return n


def _month(text):
    try:
        return parse_month(text)
    except Exception:
        raise argparse.ArgumentTypeError(f"bad month {text!r}; expected YYYY-MM") from None


def _pct_list(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad percentage list {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty percentage list")
    return vals


def _name_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_fit_args(p):
    g = p.add_argument_group("QML fitting")
    g.add_argument("--n-starts", type=int, default=10, help="optimizer starts per family")
    g.add_argument("--max-evals", type=int, default=5000, help="objective evaluations per start")
    g.add_argument("--tol", type=float, default=1e-8, help="final trust-region radius")
    g.add_argument("--min-n", type=int, default=50, help="families below this size get the null prior")
    g.add_argument("--method", choices=METHODS, default="nlopt", help="optimizer")
    g.add_argument("--fit-seed", type=int, default=0, help="seed for quasi-random starts")


def _fit_config(args) -> FitConfig:
    return FitConfig(n_starts=args.n_starts, max_evals=args.max_evals, tol=args.tol, seed=args.fit_seed,
                     min_n=args.min_n, method=args.method)


def build_parser() -> argparse.ArgumentParser:
    threads = _default_threads()
    parser = _Parser(prog="ebmine", description="Empirical Bayes mining of long-short strategies.")
    parser.add_argument("--version", action="version", version=f"ebmine {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic returns panel from a generator spec")
    p.add_argument("--spec", type=Path, required=True, help="GeneratorSpec JSON")
    p.add_argument("--seed", type=int, default=None, help="override the spec's seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("signals", help="enumerate signals and build long-short returns from stock data")
    p.add_argument("--kind", choices=("pastret", "ticker", "acct"), required=True)
    p.add_argument("--stocks", type=Path, default=None, help="stock-level CSV; omit to only list signals")
    p.add_argument("--weighting", choices=("EW", "VW"), default="EW")
    p.add_argument("--vars", type=_name_list, default=None, help="accounting variables (default: all acct: columns)")
    p.add_argument("--denoms", type=_name_list, default=None, help="accounting denominators (required for acct)")
    p.add_argument("--limit", type=int, default=None, help="build returns for the first N signals only")
    p.add_argument("--n-deciles", type=int, default=10)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("summarize", help="per-strategy stats over a window")
    p.add_argument("--panel", type=Path, required=True, help="returns panel CSV")
    p.add_argument("--end-month", type=_month, default=None, help="last window month (default: last in panel)")
    p.add_argument("--window", type=int, default=240, help="window length in months")
    p.add_argument("--min-obs", type=int, default=60)
    p.add_argument("--bin-width", type=float, default=0.5, help="t-stat histogram bin width")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("fit", help="fit the mixture prior per family")
    p.add_argument("--stats", type=Path, required=True)
    p.add_argument("--families", type=_name_list, default=None)
    p.add_argument("--threads", type=int, default=threads)
    _add_fit_args(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("predict", help="EB predictions for a stats table")
    p.add_argument("--stats", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True, help="ModelSpec JSON")
    p.add_argument("--out", type=Path, required=True)

    for name, helptext in (("backtest", "top-X%% selection backtest"),
                           ("sort-accuracy", "grouped predicted vs out-of-sample returns")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--panel", type=Path, required=True)
        p.add_argument("--first-year", type=int, required=True, help="first forecast year")
        p.add_argument("--last-year", type=int, required=True, help="last forecast year")
        p.add_argument("--window", type=int, default=240)
        p.add_argument("--min-obs", type=int, default=60)
        p.add_argument("--families", type=_name_list, default=None)
        p.add_argument("--models", type=Path, default=None,
                       help="JSON mapping forecast year to ModelSpec; fitted when omitted")
        p.add_argument("--warm-starts", type=int, default=None,
                       help="starts per year after the first, warm-started from the previous fit")
        p.add_argument("--threads", type=int, default=threads)
        _add_fit_args(p)
        if name == "backtest":
            p.add_argument("--top-pct", type=_pct_list, default=[0.01], help="comma-separated, e.g. 0.01,0.05")
            p.add_argument("--rule", choices=("eb", "naive"), default="eb")
        else:
            p.add_argument("--split-year", type=int, required=True)
            p.add_argument("--n-groups", type=int, default=20)
        p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("fdr", help="multiple-testing hurdles")
    p.add_argument("--method", choices=("by13", "storey", "rw", "all"), required=True)
    p.add_argument("--stats", type=Path, default=None, help="stats CSV (by13, storey)")
    p.add_argument("--panel", type=Path, default=None, help="returns panel CSV (rw)")
    p.add_argument("--end-month", type=_month, default=None, help="rw window end (default: whole panel)")
    p.add_argument("--window", type=int, default=None, help="rw window length (default: whole panel)")
    p.add_argument("--q", type=float, default=0.05, help="q*")
    p.add_argument("--p", type=float, default=0.05, help="p* (rw)")
    p.add_argument("--n-boot", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--oos-panel", type=Path, default=None, help="out-of-sample panel for bin evaluation")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("fdp-sim", help="false discovery proportion Monte Carlo")
    p.add_argument("--params", type=Path, required=True, help="FamilyParams JSON")
    p.add_argument("--n-strat", type=int, default=29000)
    p.add_argument("--h", type=float, default=3.0, help="hurdle in t units")
    p.add_argument("--n-sims", type=int, default=2000)
    p.add_argument("--null-band", type=float, default=0.1)
    p.add_argument("--n-bins", type=int, default=40)
    p.add_argument("--exclude-empty", action="store_true", help="drop zero-discovery simulations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("prop1", help="naive vs EB selection overlap harness")
    p.add_argument("--spec", type=Path, required=True, help="single-family GeneratorSpec JSON")
    p.add_argument("--top-pct", type=float, default=0.01)
    p.add_argument("--n-reps", type=int, default=50)
    p.add_argument("--mode", choices=("true", "fitted"), default="true")
    p.add_argument("--seed", type=int, default=0)
    _add_fit_args(p)
    p.add_argument("--out", type=Path, required=True)
    return parser


# --- subcommands -----------------------------------------------------------

def _need_file(rc: RunConfig, key: str, path: Optional[Path], flag: str):
    if path is None:
        raise ConfigError(f"{flag} is required")
    if not path.is_file():
        raise ConfigError(f"{flag}: no such file {path}")
    rc.inputs[key] = path
    return path


def _read_json(path: Path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _load_models(path: Path) -> Dict[int, ModelSpec]:
    raw = _read_json(path)
    try:
        return {int(y): ModelSpec({f: FamilyParams.from_dict(d) for f, d in spec.items()})
                for y, spec in raw.items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: bad model file ({exc})") from None


def _models_json(models: Dict[int, ModelSpec]):
    return {str(y): {f: p.to_dict() for f, p in sorted(m.params.items())} for y, m in sorted(models.items())}


def cmd_simulate(args, rc: RunConfig):
    spec_path = _need_file(rc, "spec", args.spec, "--spec")
    try:
        spec = GeneratorSpec.from_dict(_read_json(spec_path))
        if args.seed is not None:
            spec = GeneratorSpec(**{**spec.__dict__, "seed": args.seed})
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{spec_path}: bad generator spec ({exc})") from None
    rc.settings["resolved_spec"] = spec.to_dict()
    panel, truth = generate_panel(spec)
    rc.outputs["panel"] = rc.out_dir / "panel.csv"
    rc.outputs["truth"] = rc.out_dir / "truth.csv"
    save_panel(panel, rc.outputs["panel"])
    _write_csv(truth, rc.outputs["truth"])


def cmd_signals(args, rc: RunConfig):
    stocks = None
    if args.stocks is not None:
        stocks = load_stock_panel(_need_file(rc, "stocks", args.stocks, "--stocks"))
    if args.kind == "pastret":
        defs = enumerate_pastret_signals()
    elif args.kind == "ticker":
        defs = enumerate_ticker_signals()
    else:
        if args.denoms is None:
            raise ConfigError("--denoms is required for --kind acct")
        if args.vars is None and stocks is None:
            raise ConfigError("--vars is required without --stocks")
        var_names = args.vars if args.vars is not None else sorted(stocks.acct)
        try:
            defs = enumerate_acct_signals(var_names, args.denoms)
        except ValueError as exc:
            raise ConfigError(f"--denoms: {exc}") from None
    rc.settings["n_signals"] = len(defs)
    rc.outputs["signals"] = rc.out_dir / "signals.jsonl"
    save_signal_defs(defs, rc.outputs["signals"])
    if stocks is not None:
        use = defs if args.limit is None else defs[: args.limit]
        family = f"{args.kind}_{args.weighting.lower()}"
        panel = build_strategy_panel(stocks, use, args.weighting, family, args.n_deciles)
        rc.outputs["panel"] = rc.out_dir / "panel.csv"
        save_panel(panel, rc.outputs["panel"])


def cmd_summarize(args, rc: RunConfig):
    panel = load_panel(_need_file(rc, "panel", args.panel, "--panel"), allow_custom=True)
    if panel.is_empty:
        raise ValueError(f"{args.panel}: panel is empty")
    end = args.end_month if args.end_month is not None else int(panel.months[-1])
    rc.settings["resolved_end_month"] = format_month(end)
    stats = summarize(window(panel, end, args.window), args.min_obs)
    rc.settings["diagnostics"] = stats.attrs["diagnostics"]
    rc.outputs["stats"] = rc.out_dir / "stats.csv"
    rc.outputs["histogram"] = rc.out_dir / "histogram.csv"
    save_stats(stats, rc.outputs["stats"])
    hist = pd.concat([tstat_histogram(stats, f, args.bin_width) for f in sorted(stats["family"].unique())],
                     ignore_index=True) if len(stats) else pd.DataFrame()
    _write_csv(hist, rc.outputs["histogram"])


def cmd_fit(args, rc: RunConfig):
    stats = load_stats(_need_file(rc, "stats", args.stats, "--stats"))
    model = fit_all(stats, _fit_config(args), families=args.families, workers=args.threads)
    rc.settings["fallback_families"] = list(model.fallback)
    rc.settings["converged"] = {f: r.converged for f, r in sorted(model.fits.items())}
    rc.outputs["model"] = rc.out_dir / "model.json"
    rc.outputs["starts"] = rc.out_dir / "starts.csv"
    with open(rc.outputs["model"], "w") as fh:
        fh.write(model.to_json() + "\n")
    _write_csv(starts_frame(model), rc.outputs["starts"])


def cmd_predict(args, rc: RunConfig):
    stats = load_stats(_need_file(rc, "stats", args.stats, "--stats"))
    model_path = _need_file(rc, "model", args.model, "--model")
    try:
        with open(model_path) as fh:
            model = ModelSpec.from_json(fh.read())
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{model_path}: bad model file ({exc})") from None
    rc.outputs["predictions"] = rc.out_dir / "predictions.csv"
    _write_csv(predict(stats, model), rc.outputs["predictions"])


def _models_for(args, rc: RunConfig, panel, cfg: BacktestConfig):
    if args.models is not None:
        models = _load_models(_need_file(rc, "models", args.models, "--models"))
        missing = [y for y in cfg.years if y not in models]
        if missing:
            raise ConfigError(f"--models: no model for years {missing}")
        return models
    models = fit_models(panel, cfg, _fit_config(args), warm_starts=args.warm_starts, workers=args.threads)
    rc.outputs["models"] = rc.out_dir / "models.json"
    _write_json(rc.outputs["models"], _models_json(models))
    return models


def cmd_backtest(args, rc: RunConfig):
    panel = load_panel(_need_file(rc, "panel", args.panel, "--panel"), allow_custom=True)
    fams = tuple(args.families) if args.families else None
    cfgs = [BacktestConfig(args.first_year, args.last_year, args.window, pct, args.rule, fams, args.min_obs)
            for pct in args.top_pct]
    models = _models_for(args, rc, panel, cfgs[0]) if args.rule == "eb" else None
    rets, cums, summary = [], [], {}
    for cfg in cfgs:
        res = run_backtest(panel, models, cfg)
        key = repr(cfg.top_pct)
        summary[key] = res.summary()
        rets.append(pd.DataFrame({"top_pct": cfg.top_pct, "month": [format_month(m) for m in res.returns.index],
                                  "ret": res.returns.to_numpy()}))
        cums.append(pd.DataFrame({"top_pct": cfg.top_pct, "month": [format_month(m) for m in res.cumret.index],
                                  "value": res.cumret.to_numpy()}))
    rc.outputs["returns"] = rc.out_dir / "returns.csv"
    rc.outputs["cumret"] = rc.out_dir / "cumret.csv"
    rc.outputs["summary"] = rc.out_dir / "summary.json"
    _write_csv(pd.concat(rets, ignore_index=True), rc.outputs["returns"])
    _write_csv(pd.concat(cums, ignore_index=True), rc.outputs["cumret"])
    _write_json(rc.outputs["summary"], _clean(summary))


def cmd_sort_accuracy(args, rc: RunConfig):
    panel = load_panel(_need_file(rc, "panel", args.panel, "--panel"), allow_custom=True)
    fams = tuple(args.families) if args.families else tuple(panel.family_names())
    cfg = BacktestConfig(args.first_year, args.last_year, args.window, 1.0, "eb", fams, args.min_obs)
    models = _models_for(args, rc, panel, cfg)
    years = cfg.years
    rows = [sort_accuracy(panel, models, f, years, args.split_year, args.n_groups, args.window, args.min_obs)
            for f in fams]
    rc.outputs["sort_accuracy"] = rc.out_dir / "sort_accuracy.csv"
    _write_csv(pd.concat(rows, ignore_index=True), rc.outputs["sort_accuracy"])


def cmd_fdr(args, rc: RunConfig):
    methods = ("by13", "storey", "rw") if args.method == "all" else (args.method,)
    for name, val in (("--q", args.q), ("--p", args.p)):
        if not 0 < val < 1:
            raise ConfigError(f"{name} must lie in (0, 1)")
    results = []
    tstats = None
    if {"by13", "storey"} & set(methods):
        stats = load_stats(_need_file(rc, "stats", args.stats, "--stats"))
        tstats = pd.Series(stats["tstat"].to_numpy(), index=stats["strategy_id"].to_numpy())
        if "by13" in methods:
            results.append(hurdle_by13(tstats.to_numpy(), args.q))
        if "storey" in methods:
            results.append(hurdle_storey(tstats.to_numpy(), args.q))
    if "rw" in methods:
        panel = load_panel(_need_file(rc, "panel", args.panel, "--panel"), allow_custom=True)
        if args.end_month is not None or args.window is not None:
            end = args.end_month if args.end_month is not None else int(panel.months[-1])
            length = args.window if args.window is not None else int(end - panel.months[0] + 1)
            panel = window(panel, end, length)
        results.append(hurdle_rw(panel, args.p, args.q, args.n_boot, args.seed))
    rc.outputs["hurdles"] = rc.out_dir / "hurdles.json"
    _write_json(rc.outputs["hurdles"], _clean([r.to_dict() for r in results]))
    if args.oos_panel is not None and tstats is not None:
        oos = load_panel(_need_file(rc, "oos_panel", args.oos_panel, "--oos-panel"), allow_custom=True)
        wide = pd.DataFrame(oos.returns, index=oos.strategy_ids, columns=oos.months)
        summary, bins = evaluate_hurdles(tstats, results, wide)
        rc.outputs["evaluation"] = rc.out_dir / "evaluation.csv"
        rc.outputs["bins"] = rc.out_dir / "bins.csv"
        _write_csv(summary, rc.outputs["evaluation"])
        _write_csv(bins, rc.outputs["bins"])


def cmd_fdp_sim(args, rc: RunConfig):
    path = _need_file(rc, "params", args.params, "--params")
    try:
        p = FamilyParams.from_dict(_read_json(path))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: bad params ({exc})") from None
    if args.h <= 0 or args.null_band <= 0 or args.n_sims < 1 or args.n_strat < 1:
        raise ConfigError("--h, --null-band, --n-sims and --n-strat must be positive")
    res = fdp_simulate(p, args.n_strat, args.h, args.n_sims, args.null_band, args.seed,
                       n_bins=args.n_bins, exclude_empty=args.exclude_empty)
    rc.outputs["summary"] = rc.out_dir / "fdp_summary.json"
    rc.outputs["bins"] = rc.out_dir / "fdp_bins.csv"
    _write_json(rc.outputs["summary"], _clean(res.summary()))
    _write_csv(res.bins, rc.outputs["bins"])


def cmd_prop1(args, rc: RunConfig):
    path = _need_file(rc, "spec", args.spec, "--spec")
    try:
        spec = GeneratorSpec.from_dict(_read_json(path))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: bad generator spec ({exc})") from None
    if len(spec.families) != 1:
        raise ConfigError(f"{path}: prop1 needs exactly one family")
    df = prop1_harness(spec, args.top_pct, args.n_reps, args.seed, args.mode, _fit_config(args))
    rc.outputs["overlap"] = rc.out_dir / "prop1.csv"
    rc.outputs["summary"] = rc.out_dir / "prop1_summary.json"
    _write_csv(df, rc.outputs["overlap"])
    _write_json(rc.outputs["summary"], {"mean_overlap": float(df["overlap"].mean()),
                                        "n_full_overlap": int((df["overlap"] == 1.0).sum()),
                                        "n_reps": int(len(df))})


COMMANDS = {
    "simulate": cmd_simulate, "signals": cmd_signals, "summarize": cmd_summarize, "fit": cmd_fit,
    "predict": cmd_predict, "backtest": cmd_backtest, "sort-accuracy": cmd_sort_accuracy,
    "fdr": cmd_fdr, "fdp-sim": cmd_fdp_sim, "prop1": cmd_prop1,
}


def _settings(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in ("verbose",):
            continue
        if isinstance(v, Path):
            v = str(v)
        out[k] = v
    return out


def run(argv: Optional[List[str]] = None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"ebmine: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    rc = RunConfig(args.command, args.out, _settings(args))
    try:
        if getattr(args, "threads", 1) < 1:
            raise ConfigError("--threads must be >= 1")
        if args.out.exists() and not args.out.is_dir():
            raise ConfigError(f"--out: {args.out} is not a directory")
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, rc)
        write_manifest(rc)
    except ConfigError as exc:
        print(f"ebmine: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        logger.debug("runtime failure", exc_info=True)
        print(f"ebmine: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
