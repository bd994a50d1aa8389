"""Deterministic monthly portfolio simulator.

Trading rules per month, in order: credit dividends; sell positions that
aged past the hold period and fell out of the top-n ranking; split available
cash equally across open slots and buy down the ranking; force-sell anything
that vanished from the panel; append the ledger row. Execution pays a
per-share cost and a slippage penalty quadratic in volume participation,
with fills capped at a fixed share of monthly volume. Cash and NAV are in
millions USD; prices are USD per share; fractional shares are allowed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .core import ConfigError, ContractError, DomainError, MarketRow, Panel
from .factor import FactorSnapshot, factor_snapshot, parse_mode, rank_top_n
from .forecast import Predictor

logger = logging.getLogger(__name__)

USD_PER_MUSD = 1.0e6


@dataclass
class BacktestConfig:
    start: int
    end: int
    top_n: int = 50
    hold_months: int = 12
    initial_cash: float = 100.0  # millions USD
    max_participation: float = 0.10
    per_share_cost: float = 0.01  # USD per share
    slippage_at_max: float = 0.01

    def validate(self) -> None:
        if self.top_n < 1 or self.hold_months < 1:
            raise ConfigError("top_n and hold_months must be >= 1")
        if self.initial_cash <= 0:
            raise ConfigError("initial_cash must be > 0")
        if not 0.0 < self.max_participation <= 1.0:
            raise ConfigError("max_participation must be in (0, 1]")
        if self.per_share_cost < 0 or self.slippage_at_max < 0:
            raise ConfigError("costs must be >= 0")
        if not self.start < self.end:
            raise ConfigError("start must precede end")


@dataclass
class Position:
    sid: str
    shares: float
    acquired: int  # month the position was opened


@dataclass(frozen=True)
class TradeRecord:
    month: int
    sid: str
    side: str  # buy | sell
    shares: float
    price: float  # USD per share, slippage included
    fee_usd: float
    cash_delta_musd: float


@dataclass(frozen=True)
class Fill:
    shares: float
    price: float
    fee_usd: float
    cash_delta_musd: float


@dataclass(frozen=True)
class MonthRecord:
    month: int
    nav: float
    cash: float
    positions_value: float
    n_positions: int
    dividends_musd: float
    trades: tuple[TradeRecord, ...]
    positions: tuple[tuple[str, float, int], ...]  # (sid, shares, acquired)


@dataclass
class PortfolioState:
    cash: float
    positions: dict[str, Position] = field(default_factory=dict)


class Ledger:
    """Append-only month-by-month record of the simulation."""

    def __init__(self) -> None:
        self.records: list[MonthRecord] = []

    def append(self, record: MonthRecord) -> None:
        self.records.append(record)

    def nav_series(self) -> list[float]:
        return [r.nav for r in self.records]

    def months(self) -> list[int]:
        return [r.month for r in self.records]

    def all_trades(self) -> list[TradeRecord]:
        return [t for r in self.records for t in r.trades]

    def write_trades_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("month,sid,side,shares,price,fee\n")
            for t in self.all_trades():
                fh.write(
                    f"{t.month},{t.sid},{t.side},{t.shares!r},{t.price!r},{t.fee_usd!r}\n"
                )

    def write_nav_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("month,nav,cash,n_positions\n")
            for r in self.records:
                fh.write(f"{r.month},{r.nav!r},{r.cash!r},{r.n_positions}\n")


def slippage_fraction(participation: float, cfg: BacktestConfig) -> float:
    """Execution penalty, quadratic in volume participation.

    Hits ``slippage_at_max`` exactly at the participation cap. Callers must
    cap participation first.
    """
    if participation < 0 or participation > cfg.max_participation + 1e-12:
        raise ContractError(
            f"participation {participation} outside [0, {cfg.max_participation}]"
        )
    ratio = participation / cfg.max_participation
    return cfg.slippage_at_max * ratio * ratio


def execute_order(
    side: str, sid: str, desired_shares: float, row: MarketRow, cfg: BacktestConfig
) -> Fill:
    """Fill up to the volume cap at the slippage-adjusted execution price.

    Buys pay exec_price * (1 + s), sells receive exec_price * (1 - s), where
    s comes from the filled participation. The unfilled remainder is
    cancelled, never carried.
    """
    if side not in ("buy", "sell"):
        raise DomainError(f"side must be buy or sell, got {side!r}")
    if desired_shares < 0:
        raise DomainError(f"desired_shares must be >= 0, got {desired_shares}")
    if row.month_share_volume == 0:
        if desired_shares > 0:
            logger.warning("zero volume for %s; order cancelled", sid)
        return Fill(0.0, row.exec_price, 0.0, 0.0)
    cap = cfg.max_participation * row.month_share_volume
    filled = min(desired_shares, cap)
    if filled <= 0:
        return Fill(0.0, row.exec_price, 0.0, 0.0)
    s = slippage_fraction(filled / row.month_share_volume, cfg)
    price = row.exec_price * (1.0 + s) if side == "buy" else row.exec_price * (1.0 - s)
    fee = cfg.per_share_cost * filled
    if side == "buy":
        cash_delta = -(filled * price + fee) / USD_PER_MUSD
    else:
        cash_delta = (filled * price - fee) / USD_PER_MUSD
    return Fill(filled, price, fee, cash_delta)


def _affordable_shares(budget_musd: float, row: MarketRow, cfg: BacktestConfig) -> float:
    """Largest share count whose all-in buy cost stays within the budget.

    Two-step sizing: cap first, then shrink by the slippage implied at the
    capped size. Since slippage grows with size, the final cost can only
    undershoot the budget.
    """
    if budget_musd <= 0 or row.month_share_volume == 0:
        return 0.0
    budget_usd = budget_musd * USD_PER_MUSD
    n0 = budget_usd / (row.exec_price + cfg.per_share_cost)
    n1 = min(n0, cfg.max_participation * row.month_share_volume)
    if n1 <= 0:
        return 0.0
    s1 = slippage_fraction(n1 / row.month_share_volume, cfg)
    return min(n1, budget_usd / (row.exec_price * (1.0 + s1) + cfg.per_share_cost))


def rebalance_month(
    state: PortfolioState,
    panel: Panel,
    snapshot: FactorSnapshot,
    cfg: BacktestConfig,
) -> MonthRecord:
    """Apply one month of trading rules to the portfolio state.

    With an empty snapshot the ranking steps are skipped (dividends,
    delisting handling, and the ledger row still happen). Aged positions
    still ranked in the top-n are held with their age timer running.
    """
    t = snapshot.t
    trades: list[TradeRecord] = []
    dividends = 0.0

    # 1. dividends
    for sid in sorted(state.positions):
        row = panel.market_at(sid, t)
        if row is not None and row.dividend_per_share > 0:
            dividends += state.positions[sid].shares * row.dividend_per_share / USD_PER_MUSD
    state.cash += dividends

    if snapshot.values:
        top_list = rank_top_n(snapshot, cfg.top_n)
        top_set = set(top_list)

        # 2. sell holdings that served their year and dropped out of the top-n
        for sid in sorted(state.positions):
            pos = state.positions[sid]
            row = panel.market_at(sid, t)
            if row is None:
                continue  # delisting handled below
            if t - pos.acquired >= cfg.hold_months and sid not in top_set:
                fill = execute_order("sell", sid, pos.shares, row, cfg)
                if fill.shares > 0:
                    state.cash += fill.cash_delta_musd
                    pos.shares -= fill.shares
                    trades.append(
                        TradeRecord(t, sid, "sell", fill.shares, fill.price, fill.fee_usd, fill.cash_delta_musd)
                    )
                    if pos.shares <= 0:
                        del state.positions[sid]

        # 3. buy down the ranking into open slots, splitting remaining cash
        for sid in top_list:
            if len(state.positions) >= cfg.top_n or state.cash <= 0:
                break
            if sid in state.positions:
                continue
            row = panel.market_at(sid, t)
            slots = cfg.top_n - len(state.positions)
            desired = _affordable_shares(state.cash / slots, row, cfg)
            if desired <= 0:
                continue
            fill = execute_order("buy", sid, desired, row, cfg)
            if fill.shares <= 0:
                continue
            state.cash += fill.cash_delta_musd
            state.positions[sid] = Position(sid=sid, shares=fill.shares, acquired=t)
            trades.append(
                TradeRecord(t, sid, "buy", fill.shares, fill.price, fill.fee_usd, fill.cash_delta_musd)
            )
    else:
        logger.warning("month %d: empty eligible universe, rebalance skipped", t)

    # 4. force-sell positions that disappeared from the panel
    for sid in sorted(state.positions):
        if panel.market_at(sid, t) is not None:
            continue
        pos = state.positions[sid]
        last = panel.last_observation_at_or_before(sid, t)
        row = last[1]
        price = row.exec_price * (1.0 - cfg.slippage_at_max)
        fee = cfg.per_share_cost * pos.shares
        cash_delta = (pos.shares * price - fee) / USD_PER_MUSD
        state.cash += cash_delta
        trades.append(TradeRecord(t, sid, "sell", pos.shares, price, fee, cash_delta))
        del state.positions[sid]
        logger.warning("month %d: %s delisted, force-sold at max slippage", t, sid)

    # 5. mark to market and append
    positions_value = 0.0
    detail = []
    for sid in sorted(state.positions):
        pos = state.positions[sid]
        row = panel.market_at(sid, t)
        positions_value += pos.shares * row.close_price / USD_PER_MUSD
        detail.append((sid, pos.shares, pos.acquired))
    return MonthRecord(
        month=t,
        nav=state.cash + positions_value,
        cash=state.cash,
        positions_value=positions_value,
        n_positions=len(state.positions),
        dividends_musd=dividends,
        trades=tuple(trades),
        positions=tuple(detail),
    )


def run_backtest(
    panel: Panel,
    mode: str,
    cfg: BacktestConfig,
    predictor: Predictor | None = None,
) -> Ledger:
    """Iterate the monthly rebalance from start to end; fully deterministic."""
    cfg.validate()
    kind, _ = parse_mode(mode)
    if kind == "lfm" and predictor is None:
        raise DomainError("lfm backtest requires a trained predictor")
    if panel.start > cfg.start - 1 or panel.end < cfg.end:
        raise DomainError(
            f"panel [{panel.start}, {panel.end}] does not cover "
            f"[{cfg.start - 1}, {cfg.end}]"
        )
    state = PortfolioState(cash=cfg.initial_cash)
    ledger = Ledger()
    for t in range(cfg.start, cfg.end + 1):
        snapshot = factor_snapshot(panel, t, mode, predictor)
        record = rebalance_month(state, panel, snapshot, cfg)
        if state.cash < -1e-9:
            raise ContractError(f"negative cash {state.cash} at month {t}")
        ledger.append(record)
    return ledger
