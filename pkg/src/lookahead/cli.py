"""Command-line entry point wiring config, pipeline stages, and reports.

Commands: synth, ingest, train, predict, backtest, sweep. All take a JSON
config file; --seed and --out override the config. Exit codes: 0 success,
1 usage error (bad flags or unreadable/invalid config), 2 data or contract
error. Re-running a command with identical config and inputs rewrites
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import backtest as bt
from . import factor as factor_mod
from . import metrics
from .core import EBIT_IDX, FUNDAMENTAL_FIELDS, Error, format_month, parse_month
from .features import TARGET_LEAD, build_samples, fit_standardizer, samples_to_matrices
from .forecast import (
    NaivePredictor,
    PredictorConfig,
    fit_linear,
    load_checkpoint,
    save_checkpoint,
    split_securities,
    train_mlp,
)
from .ingest import UniverseConfig, load_panel, parse_cpi_csv
from .synth import SynthConfig, generate_panel, write_csv_files

logger = logging.getLogger(__name__)


class UsageError(Exception):
    """Bad command line or unreadable/invalid config file (exit code 1)."""


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: Path = Path("data")
    out_dir: Path = Path("out")
    checkpoint: Path | None = None  # defaults to out_dir/model.ckpt
    in_sample: tuple[int, int] = (parse_month("1970-01"), parse_month("1975-12"))
    out_of_sample: tuple[int, int] = (parse_month("1976-01"), parse_month("1979-12"))
    universe: UniverseConfig = field(default_factory=UniverseConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    backtest: bt.BacktestConfig | None = None  # defaults to the out-of-sample range
    synth: SynthConfig = field(default_factory=SynthConfig)

    def resolved_checkpoint(self) -> Path:
        return self.checkpoint if self.checkpoint else self.out_dir / "model.ckpt"

    def resolved_backtest(self) -> bt.BacktestConfig:
        if self.backtest is not None:
            return self.backtest
        return bt.BacktestConfig(start=self.out_of_sample[0], end=self.out_of_sample[1])


def _apply_section(instance, section: dict, name: str, month_fields: set[str] = frozenset()):
    allowed = {f.name for f in dataclasses.fields(instance)}
    updates = {}
    for key, value in section.items():
        if key not in allowed:
            raise UsageError(f"unknown key {key!r} in config section {name!r}")
        if key in month_fields:
            value = parse_month(value)
        updates[key] = value
    return replace(instance, **updates)


def _parse_range(value, name: str) -> tuple[int, int]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise UsageError(f"{name} must be a [start, end] pair of 'YYYY-MM' strings")
    start, end = parse_month(value[0]), parse_month(value[1])
    if start > end:
        raise UsageError(f"{name} start {value[0]} is after end {value[1]}")
    return start, end


def load_run_config(
    path: str | Path, seed: int | None = None, out: str | None = None
) -> RunConfig:
    """Load and validate the JSON run config; flags override file values."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")

    cfg = RunConfig()
    top_level = {
        "seed",
        "data_dir",
        "out_dir",
        "checkpoint",
        "in_sample",
        "out_of_sample",
        "universe",
        "predictor",
        "backtest",
        "synth",
    }
    unknown = set(data) - top_level
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    try:
        if "seed" in data:
            cfg.seed = int(data["seed"])
        if "data_dir" in data:
            cfg.data_dir = Path(data["data_dir"])
        if "out_dir" in data:
            cfg.out_dir = Path(data["out_dir"])
        if "checkpoint" in data:
            cfg.checkpoint = Path(data["checkpoint"])
        if "in_sample" in data:
            cfg.in_sample = _parse_range(data["in_sample"], "in_sample")
        if "out_of_sample" in data:
            cfg.out_of_sample = _parse_range(data["out_of_sample"], "out_of_sample")
        if "universe" in data:
            cfg.universe = _apply_section(
                cfg.universe, data["universe"], "universe", {"cpi_ref_month"}
            )
        if "predictor" in data:
            cfg.predictor = _apply_section(cfg.predictor, data["predictor"], "predictor")
        if "backtest" in data:
            section = dict(data["backtest"])
            base = bt.BacktestConfig(
                start=cfg.out_of_sample[0], end=cfg.out_of_sample[1]
            )
            cfg.backtest = _apply_section(base, section, "backtest", {"start", "end"})
        if "synth" in data:
            cfg.synth = _apply_section(cfg.synth, data["synth"], "synth")
    except Error as exc:
        raise UsageError(f"invalid config value: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config value: {exc}") from None

    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out_dir = Path(out)
    # sub-seeds follow the global seed unless set explicitly in their section
    if "synth" not in data or "seed" not in data.get("synth", {}):
        cfg.synth = replace(cfg.synth, seed=cfg.seed)
    if "predictor" not in data or "seed" not in data.get("predictor", {}):
        cfg.predictor = replace(cfg.predictor, seed=cfg.seed)

    if not cfg.in_sample[1] < cfg.out_of_sample[0]:
        raise UsageError("in_sample must end before out_of_sample begins")
    try:
        cfg.predictor.validate()
        cfg.synth.validate()
        if cfg.backtest is not None:
            cfg.backtest.validate()
    except Error as exc:
        raise UsageError(f"invalid config value: {exc}") from None
    return cfg


def _ensure_out_dir(cfg: RunConfig) -> Path:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    return cfg.out_dir


def _load_panel(cfg: RunConfig):
    cpi = parse_cpi_csv(cfg.data_dir / "cpi.csv")
    universe = replace(cfg.universe, cpi_index=cpi)
    return load_panel(
        cfg.data_dir / "fundamentals.csv", cfg.data_dir / "market.csv", universe
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> int:
    result = generate_panel(cfg.synth)
    cpi_through = max(result.panel.end, cfg.universe.cpi_ref_month)
    paths = write_csv_files(result, cfg.data_dir, cpi_through=cpi_through)
    print(
        f"generated {cfg.synth.n_stocks} stocks x {cfg.synth.n_months} months "
        f"(seed {cfg.synth.seed})"
    )
    for name, p in paths.items():
        print(f"  {name}: {p}")
    return 0


def cmd_ingest(cfg: RunConfig) -> int:
    panel, filtered = _load_panel(cfg)
    out = _ensure_out_dir(cfg)
    summary = {
        "securities": len(panel.securities),
        "observations": panel.n_observations(),
        "start": format_month(panel.start),
        "end": format_month(panel.end),
        "exclusions": filtered.exclusions,
    }
    with open(out / "panel_summary.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(
        f"panel: {summary['securities']} securities, {summary['observations']} "
        f"security-months, {summary['start']}..{summary['end']}"
    )
    for reason, count in sorted(filtered.exclusions.items()):
        print(f"  excluded ({reason}): {count}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    if cfg.predictor.kind == "naive":
        raise UsageError("the naive predictor has nothing to train")
    panel, _ = _load_panel(cfg)
    in_start, in_end = cfg.in_sample
    months = range(max(in_start, panel.start), in_end - TARGET_LEAD + 1)
    samples, skipped = build_samples(panel, months)
    logger.info("built %d training samples (%d skipped)", len(samples), skipped)
    sids = sorted({s.sid for s in samples})
    split = split_securities(
        sids, cfg.predictor.validation_stock_fraction, cfg.predictor.seed
    )
    train_samples = [s for s in samples if s.sid in set(split.train_sids)]
    standardizer = fit_standardizer(train_samples)
    out = _ensure_out_dir(cfg)
    if cfg.predictor.kind == "linear":
        model = fit_linear(train_samples, cfg.predictor, standardizer)
        print(f"linear model fitted on {len(train_samples)} samples")
    else:
        model = train_mlp(samples, split, cfg.predictor, standardizer)
        with open(out / "training_log.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("epoch,train_loss,val_mse\n")
            for rec in model.training_log:
                fh.write(f"{rec['epoch']},{rec['train_loss']!r},{rec['val_mse']!r}\n")
        best = model.training_log[model.best_epoch - 1]
        print(
            f"mlp trained for {len(model.training_log)} epochs; "
            f"best epoch {model.best_epoch} val_mse {best['val_mse']:.6f}"
        )
    save_checkpoint(model, cfg.resolved_checkpoint())
    print(f"checkpoint: {cfg.resolved_checkpoint()}")
    return 0


def cmd_predict(cfg: RunConfig) -> int:
    panel, _ = _load_panel(cfg)
    model = load_checkpoint(cfg.resolved_checkpoint())
    out_start, out_end = cfg.out_of_sample
    months = range(out_start, min(out_end, panel.end) - TARGET_LEAD + 1)
    samples, skipped = build_samples(panel, months)
    samples = [s for s in samples if s.target is not None]
    if not samples:
        raise Error("no evaluable out-of-sample samples")
    logger.info("built %d evaluation samples (%d skipped)", len(samples), skipped)
    preds = model.predict(samples)
    naive = NaivePredictor(model.standardizer).predict(samples)
    _, targets = samples_to_matrices(samples, model.standardizer)
    sample_months = [s.t for s in samples]
    mse_model = metrics.mse_series(preds, targets, sample_months)
    mse_naive = metrics.mse_series(naive, targets, sample_months)
    ebit_musd = model.predict_ebit_musd(samples)

    out = _ensure_out_dir(cfg)
    with open(out / "predictions.csv", "w", encoding="utf-8", newline="\n") as fh:
        pred_cols = ",".join(f"pred_{name}" for name in FUNDAMENTAL_FIELDS)
        fh.write(f"sid,month,ebit_forecast_musd,{pred_cols}\n")
        for s, forecast, row in zip(samples, ebit_musd, preds):
            cells = ",".join(repr(float(v)) for v in row)
            fh.write(f"{s.sid},{s.t},{forecast!r},{cells}\n")
    metrics.write_mse_monthly_csv(mse_model, mse_naive, out / "mse_monthly.csv")
    metrics.svg_line_chart(
        [
            ("model", mse_model.months, mse_model.values),
            ("naive", mse_naive.months, mse_naive.values),
        ],
        "out-of-sample MSE by month",
        out / "mse.svg",
    )
    report = {
        "n_samples": len(samples),
        "mse_model": mse_model.overall,
        "mse_naive": mse_naive.overall,
    }
    with open(out / "predict_report.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(
        f"out-of-sample MSE: model {mse_model.overall:.6f} vs naive "
        f"{mse_naive.overall:.6f} over {len(samples)} samples"
    )
    return 0


def _run_and_report(cfg: RunConfig, mode: str, out_subdir: Path) -> metrics.PerformanceReport:
    panel, _ = _load_panel(cfg)
    predictor = None
    kind, _horizon = factor_mod.parse_mode(mode)
    if kind == "lfm":
        predictor = load_checkpoint(cfg.resolved_checkpoint())
    ledger = bt.run_backtest(panel, mode, cfg.resolved_backtest(), predictor)
    out_subdir.mkdir(parents=True, exist_ok=True)
    ledger.write_trades_csv(out_subdir / "trades.csv")
    ledger.write_nav_csv(out_subdir / "nav.csv")
    report = metrics.performance_report(ledger.months(), ledger.nav_series())
    metrics.write_report_json(report, out_subdir / "report.json")
    metrics.svg_line_chart(
        [("nav", report.months, report.nav)], f"NAV ({mode})", out_subdir / "nav.svg"
    )
    return report


def cmd_backtest(cfg: RunConfig, mode: str) -> int:
    factor_mod.parse_mode(mode)  # validate early
    out = _ensure_out_dir(cfg) / f"backtest_{mode.replace(':', '_')}"
    report = _run_and_report(cfg, mode, out)
    sharpe = "n/a" if report.sharpe is None else f"{report.sharpe:.3f}"
    print(
        f"{mode}: CAR {report.car * 100:.2f}%  sharpe {sharpe}  "
        f"max drawdown {report.max_drawdown * 100:.2f}%"
    )
    print(f"outputs: {out}")
    return 0


def cmd_sweep(cfg: RunConfig, horizons: list[int]) -> int:
    out = _ensure_out_dir(cfg)
    cars = []
    for horizon in horizons:
        mode = f"clairvoyant:{horizon}"
        report = _run_and_report(cfg, mode, out / f"backtest_clairvoyant_{horizon}")
        cars.append((horizon, report.car))
        print(f"clairvoyant:{horizon}: CAR {report.car * 100:.2f}%")
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("horizon_months,car\n")
        for horizon, car in cars:
            fh.write(f"{horizon},{car!r}\n")
    metrics.svg_line_chart(
        [("CAR", [h for h, _ in cars], [c for _, c in cars])],
        "annualized return by clairvoyance horizon",
        out / "sweep.svg",
    )
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="lookahead", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("synth", "generate synthetic data files"),
        ("ingest", "parse, filter, and summarize the panel"),
        ("train", "train the configured predictor and save a checkpoint"),
        ("predict", "out-of-sample predictions and MSE vs the naive baseline"),
        ("backtest", "run the portfolio simulation for one factor mode"),
        ("sweep", "run clairvoyant backtests over several horizons"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--out", default=None, help="override the output directory")
        if name == "backtest":
            p.add_argument(
                "--mode",
                default="qfm",
                help="factor mode: qfm | lfm | clairvoyant:H",
            )
        if name == "sweep":
            p.add_argument(
                "--horizons",
                default="0,6,12",
                help="comma-separated clairvoyance horizons in months",
            )
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_run_config(args.config, seed=args.seed, out=args.out)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "ingest":
            return cmd_ingest(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "predict":
            return cmd_predict(cfg)
        if args.command == "backtest":
            return cmd_backtest(cfg, args.mode)
        if args.command == "sweep":
            try:
                horizons = [int(h) for h in args.horizons.split(",") if h != ""]
            except ValueError:
                raise UsageError(f"bad --horizons value {args.horizons!r}") from None
            if not horizons:
                raise UsageError("--horizons must name at least one horizon")
            return cmd_sweep(cfg, horizons)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
