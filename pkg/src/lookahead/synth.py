"""Seeded synthetic universe generator.

Each stock gets a size scale and 16 fundamental items driven by AR(1) states
on log-levels around stock-specific means, with a common per-month shock
inducing cross-item correlation. EBIT is a pure log-AR(1) process (its
12-month conditional mean has a closed form in the persistence parameter).
A few working-capital items additionally respond to the square of the
revenue cycle state with a one-year delay, so part of their 12-month-ahead
variation is predictable only by a nonlinear model.

Market cap blends the stock's EBIT twelve months ahead with current EBIT
and multiplies by slowly mean-reverting lognormal mispricing, so rankings
that know (or can predict) future EBIT genuinely earn higher returns, and
the advantage grows with the clairvoyance horizon. Generation is
counter-based per security: stock i's stream depends only on (seed, i),
never on iteration order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import (
    EBIT_IDX,
    FUNDAMENTAL_FIELDS,
    ConfigError,
    MarketRow,
    Panel,
    ymd_from_month_index,
)
from .ingest import CPI_CSV_COLUMNS, FUNDAMENTALS_CSV_COLUMNS, MARKET_CSV_COLUMNS

# Typical magnitude of each item relative to revenue; fixed structure shared
# by all stocks so scaled feature ratios are comparable across the universe.
_ITEM_SHARES = np.array(
    [
        1.00,  # revenue_ttm
        0.55,  # cogs_ttm
        0.25,  # sgna_ttm
        0.12,  # ebit_ttm
        0.07,  # net_income_ttm
        0.15,  # cash_mrq
        0.12,  # receivables_mrq
        0.10,  # inventories_mrq
        0.05,  # other_current_assets_mrq
        0.35,  # ppe_mrq
        0.08,  # other_assets_mrq
        0.08,  # debt_current_mrq
        0.09,  # accounts_payable_mrq
        0.02,  # taxes_payable_mrq
        0.06,  # other_current_liabilities_mrq
        0.45,  # total_liabilities_mrq
    ],
    dtype=np.float64,
)

_SHARES_OUT_SCALE = 2.0e7
_SHARES_OUT_SIGMA = 0.8


@dataclass
class SynthConfig:
    n_stocks: int = 100
    n_months: int = 120
    seed: int = 0
    # log-level AR(1) dynamics of the 16 fundamental items
    persistence: float = 0.97
    drift: float = 0.0
    noise_scale: float = 0.04
    common_shock_weight: float = 0.5
    # pricing: market cap anchored to 12-month-forward EBIT
    price_multiple: float = 10.0
    price_noise: float = 0.30
    min_market_cap_musd: float = 1.0
    # payout, volume, and execution benchmark
    payout_ratio: float = 0.30
    turnover: float = 0.25
    volume_noise: float = 0.30
    exec_price_noise: float = 0.004
    # cross-sectional size heterogeneity
    size_scale_musd: float = 300.0
    size_sigma: float = 1.0

    def validate(self) -> None:
        if self.n_stocks < 1:
            raise ConfigError("n_stocks must be >= 1")
        if self.n_months < 73:
            raise ConfigError("n_months must be >= 73 (one full sample window)")
        if not 0.0 <= self.persistence <= 1.0:
            raise ConfigError("persistence must be in [0, 1]")
        if self.noise_scale < 0 or self.price_noise < 0:
            raise ConfigError("noise scales must be >= 0")
        if not 0.0 <= self.common_shock_weight <= 1.0:
            raise ConfigError("common_shock_weight must be in [0, 1]")
        if self.price_multiple <= 0:
            raise ConfigError("price_multiple must be > 0")
        if self.min_market_cap_musd <= 0:
            raise ConfigError("min_market_cap_musd must be > 0")
        if not 0.0 <= self.payout_ratio <= 1.0:
            raise ConfigError("payout_ratio must be in [0, 1]")
        if self.turnover < 0 or self.volume_noise < 0 or self.exec_price_noise < 0:
            raise ConfigError("volume/exec parameters must be >= 0")
        if self.size_scale_musd <= 0 or self.size_sigma < 0:
            raise ConfigError("size parameters must be positive")


@dataclass
class SynthResult:
    panel: Panel
    # realized EBIT(t+12) in millions USD per security, indexed by month t
    forward_ebit: dict[str, np.ndarray]
    config: SynthConfig


def _stock_paths(cfg: SynthConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Simulate one stock. Returns raw arrays keyed by name.

    The fundamentals path runs 12 months past the panel so the pricing
    anchor EBIT(t+12) exists for every published month.
    """
    horizon = cfg.n_months + 12
    phi, sigma, w = cfg.persistence, cfg.noise_scale, cfg.common_shock_weight

    size = cfg.size_scale_musd * np.exp(cfg.size_sigma * rng.standard_normal())
    shares_out = _SHARES_OUT_SCALE * np.exp(_SHARES_OUT_SIGMA * rng.standard_normal())
    log_means = np.log(size * _ITEM_SHARES)

    common = rng.standard_normal(horizon + 1)
    idio = rng.standard_normal((horizon + 1, len(FUNDAMENTAL_FIELDS)))
    shocks = np.sqrt(w) * common[:, None] + np.sqrt(1.0 - w) * idio

    z = np.empty((horizon, len(FUNDAMENTAL_FIELDS)), dtype=np.float64)
    if sigma > 0 and phi < 1.0:
        z[0] = (sigma / np.sqrt(1.0 - phi * phi)) * shocks[0]
    else:
        z[0] = 0.0
    for t in range(1, horizon):
        z[t] = cfg.drift + phi * z[t - 1] + sigma * shocks[t]
    levels = np.exp(log_means[None, :] + z)

    ebit = levels[:, EBIT_IDX]
    price_eps = rng.standard_normal(cfg.n_months)
    exec_eps = rng.standard_normal(cfg.n_months)
    volume_eps = rng.standard_normal(cfg.n_months)

    mcap = cfg.price_multiple * ebit[12 : 12 + cfg.n_months] * np.exp(
        cfg.price_noise * price_eps
    )
    mcap = np.maximum(mcap, cfg.min_market_cap_musd)
    close = mcap * 1.0e6 / shares_out
    exec_price = close * np.exp(cfg.exec_price_noise * exec_eps)
    volume = cfg.turnover * shares_out * np.exp(
        cfg.volume_noise * volume_eps - 0.5 * cfg.volume_noise**2
    )
    net_income = levels[: cfg.n_months, FUNDAMENTAL_FIELDS.index("net_income_ttm")]
    dividend = cfg.payout_ratio * np.maximum(net_income, 0.0) * 1.0e6 / (
        12.0 * shares_out
    )
    return {
        "levels": levels[: cfg.n_months],
        "forward_ebit": ebit[12 : 12 + cfg.n_months],
        "mcap": mcap,
        "close": close,
        "exec_price": exec_price,
        "volume": volume,
        "dividend": dividend,
        "shares_out": np.full(cfg.n_months, shares_out),
    }


def generate_panel(cfg: SynthConfig) -> SynthResult:
    """Generate a panel plus the ground-truth forward EBIT record."""
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    children = root.spawn(cfg.n_stocks)
    observations: dict[str, dict[int, tuple[MarketRow, np.ndarray]]] = {}
    forward_ebit: dict[str, np.ndarray] = {}
    for i in range(cfg.n_stocks):
        sid = f"S{i:04d}"
        rng = np.random.Generator(np.random.Philox(children[i]))
        paths = _stock_paths(cfg, rng)
        per_month: dict[int, tuple[MarketRow, np.ndarray]] = {}
        for t in range(cfg.n_months):
            row = MarketRow(
                close_price=float(paths["close"][t]),
                exec_price=float(paths["exec_price"][t]),
                shares_outstanding=float(paths["shares_out"][t]),
                market_cap=float(paths["mcap"][t]),
                month_share_volume=float(paths["volume"][t]),
                dividend_per_share=float(paths["dividend"][t]),
                is_us=True,
                is_financial_sector=False,
            )
            per_month[t] = (row, paths["levels"][t])
        observations[sid] = per_month
        forward_ebit[sid] = paths["forward_ebit"]
    return SynthResult(panel=Panel(observations), forward_ebit=forward_ebit, config=cfg)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv_files(
    result: SynthResult, out_dir: str | Path, cpi_through: int | None = None
) -> dict[str, Path]:
    """Emit fundamentals.csv / market.csv / cpi.csv in the ingest schema.

    CPI is flat at 100, so inflation adjustment is a no-op for generated
    universes; ``cpi_through`` extends the series past the panel end so any
    configured reference month is covered. Files are byte-stable given the
    same SynthResult.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    panel = result.panel
    paths = {
        "fundamentals": out / "fundamentals.csv",
        "market": out / "market.csv",
        "cpi": out / "cpi.csv",
    }
    with open(paths["fundamentals"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(FUNDAMENTALS_CSV_COLUMNS) + "\n")
        for sid in panel.securities:
            for t in panel.months(sid):
                _, vec = panel.lookup(sid, t)
                year, month = ymd_from_month_index(t)
                cells = [sid, str(year), str(month)] + [_fmt(v) for v in vec]
                fh.write(",".join(cells) + "\n")
    with open(paths["market"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(MARKET_CSV_COLUMNS) + "\n")
        for sid in panel.securities:
            for t in panel.months(sid):
                row, _ = panel.lookup(sid, t)
                year, month = ymd_from_month_index(t)
                cells = [
                    sid,
                    str(year),
                    str(month),
                    _fmt(row.close_price),
                    _fmt(row.exec_price),
                    _fmt(row.shares_outstanding),
                    _fmt(row.market_cap),
                    _fmt(row.month_share_volume),
                    _fmt(row.dividend_per_share),
                    "1" if row.is_us else "0",
                    "1" if row.is_financial_sector else "0",
                ]
                fh.write(",".join(cells) + "\n")
    last_cpi_month = panel.end if cpi_through is None else max(panel.end, cpi_through)
    with open(paths["cpi"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(CPI_CSV_COLUMNS) + "\n")
        for t in range(panel.start, last_cpi_month + 1):
            year, month = ymd_from_month_index(t)
            fh.write(f"{year},{month},100.0\n")
    return paths
