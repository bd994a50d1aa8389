"""CSV ingestion: parse fundamentals/market/CPI files, forward-fill missing
fundamental items, apply the universe filter, and assemble the Panel.

File schemas (UTF-8, '.' decimal, header row required):

* ``fundamentals.csv``: sid, year, month, then the 16 canonical fundamental
  names in order. Empty cell = item missing that month.
* ``market.csv``: sid, year, month, close_price, exec_price,
  shares_outstanding, market_cap, month_share_volume, dividend_per_share,
  is_us (0/1), is_financial (0/1). No missing cells.
* ``cpi.csv``: year, month, cpi.
"""

from __future__ import annotations

import bisect
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .core import (
    FUNDAMENTAL_FIELDS,
    N_FUNDAMENTALS,
    ConfigError,
    ContractError,
    EmptyUniverseError,
    MarketRow,
    Panel,
    ParseError,
    month_index_from_ymd,
)

logger = logging.getLogger(__name__)

FUNDAMENTALS_CSV_COLUMNS: tuple[str, ...] = ("sid", "year", "month") + FUNDAMENTAL_FIELDS
MARKET_CSV_COLUMNS: tuple[str, ...] = (
    "sid",
    "year",
    "month",
    "close_price",
    "exec_price",
    "shares_outstanding",
    "market_cap",
    "month_share_volume",
    "dividend_per_share",
    "is_us",
    "is_financial",
)
CPI_CSV_COLUMNS: tuple[str, ...] = ("year", "month", "cpi")


class FundamentalsRecord(NamedTuple):
    sid: str
    t: int
    values: np.ndarray  # shape (16,), NaN where the item is missing


class MarketRecord(NamedTuple):
    sid: str
    t: int
    row: MarketRow


@dataclass
class UniverseConfig:
    """Universe filter settings.

    Market caps are deflated by ``cpi_index`` to ``cpi_ref_month`` before
    the size threshold is applied, making "inflation-adjusted" reproducible
    with any caller-supplied CPI series.
    """

    min_market_cap_musd: float = 100.0
    cpi_index: dict[int, float] = field(default_factory=dict)
    cpi_ref_month: int = month_index_from_ymd(2010, 1)
    min_consecutive_months: int = 12
    exclude_financials: bool = True
    exclude_non_us: bool = True

    def validate(self) -> None:
        if not self.min_market_cap_musd > 0:
            raise ConfigError("min_market_cap_musd must be > 0")
        if self.min_consecutive_months < 1:
            raise ConfigError("min_consecutive_months must be >= 1")
        if any(v <= 0 for v in self.cpi_index.values()):
            raise ConfigError("cpi values must be positive")


@dataclass
class FilterResult:
    records: list[MarketRecord]
    exclusions: dict[str, int]  # reason -> count of excluded security-months


def _check_header(header: list[str], expected: Sequence[str], path: str) -> None:
    missing = [c for c in expected if c not in header]
    unknown = [c for c in header if c not in expected]
    if missing or unknown or list(header) != list(expected):
        raise ParseError(
            f"{path}:1: bad header; missing={missing} unknown={unknown} "
            f"(expected exact column order {list(expected)})"
        )


def _parse_float(cell: str, path: str, line: int, column: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise ParseError(f"{path}:{line}: non-numeric {column} cell {cell!r}") from None
    if not np.isfinite(value):
        raise ParseError(f"{path}:{line}: non-finite {column} cell {cell!r}")
    return value


def _parse_sid_month(
    record: list[str], path: str, line: int, width: int
) -> tuple[str, int]:
    if len(record) != width:
        raise ParseError(f"{path}:{line}: expected {width} cells, got {len(record)}")
    sid = record[0]
    if not sid:
        raise ParseError(f"{path}:{line}: empty sid")
    try:
        year, month = int(record[1]), int(record[2])
    except ValueError:
        raise ParseError(f"{path}:{line}: non-integer year/month") from None
    try:
        t = month_index_from_ymd(year, month)
    except Exception as exc:
        raise ParseError(f"{path}:{line}: {exc}") from None
    return sid, t


def parse_fundamentals_csv(path: str | Path) -> list[FundamentalsRecord]:
    """Parse fundamentals rows; empty fundamental cells become NaN."""
    path = str(path)
    records: list[FundamentalsRecord] = []
    seen: set[tuple[str, int]] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}:1: empty file")
        _check_header(header, FUNDAMENTALS_CSV_COLUMNS, path)
        for line, record in enumerate(reader, start=2):
            if not record:
                continue
            sid, t = _parse_sid_month(record, path, line, len(FUNDAMENTALS_CSV_COLUMNS))
            if (sid, t) in seen:
                raise ParseError(f"{path}:{line}: duplicate (sid, month) ({sid!r}, {t})")
            seen.add((sid, t))
            values = np.full(N_FUNDAMENTALS, np.nan, dtype=np.float64)
            for j, cell in enumerate(record[3:]):
                if cell == "":
                    continue
                values[j] = _parse_float(cell, path, line, FUNDAMENTAL_FIELDS[j])
            records.append(FundamentalsRecord(sid, t, values))
    return records


def parse_market_csv(path: str | Path) -> list[MarketRecord]:
    """Parse market rows; every cell is required."""
    path = str(path)
    records: list[MarketRecord] = []
    seen: set[tuple[str, int]] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}:1: empty file")
        _check_header(header, MARKET_CSV_COLUMNS, path)
        for line, record in enumerate(reader, start=2):
            if not record:
                continue
            sid, t = _parse_sid_month(record, path, line, len(MARKET_CSV_COLUMNS))
            if (sid, t) in seen:
                raise ParseError(f"{path}:{line}: duplicate (sid, month) ({sid!r}, {t})")
            seen.add((sid, t))
            numeric = [
                _parse_float(cell, path, line, col)
                for cell, col in zip(record[3:9], MARKET_CSV_COLUMNS[3:9])
            ]
            flags = []
            for cell, col in zip(record[9:], MARKET_CSV_COLUMNS[9:]):
                if cell not in ("0", "1"):
                    raise ParseError(f"{path}:{line}: {col} must be 0 or 1, got {cell!r}")
                flags.append(cell == "1")
            row = MarketRow(
                close_price=numeric[0],
                exec_price=numeric[1],
                shares_outstanding=numeric[2],
                market_cap=numeric[3],
                month_share_volume=numeric[4],
                dividend_per_share=numeric[5],
                is_us=flags[0],
                is_financial_sector=flags[1],
            )
            try:
                row.validate()
            except Exception as exc:
                raise ParseError(f"{path}:{line}: {exc}") from None
            records.append(MarketRecord(sid, t, row))
    return records


def parse_cpi_csv(path: str | Path) -> dict[int, float]:
    path = str(path)
    cpi: dict[int, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}:1: empty file")
        _check_header(header, CPI_CSV_COLUMNS, path)
        for line, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != 3:
                raise ParseError(f"{path}:{line}: expected 3 cells, got {len(record)}")
            try:
                t = month_index_from_ymd(int(record[0]), int(record[1]))
            except Exception as exc:
                raise ParseError(f"{path}:{line}: {exc}") from None
            if t in cpi:
                raise ParseError(f"{path}:{line}: duplicate month {t}")
            value = _parse_float(record[2], path, line, "cpi")
            if value <= 0:
                raise ParseError(f"{path}:{line}: cpi must be positive, got {value}")
            cpi[t] = value
    return cpi


def forward_fill(records: Iterable[FundamentalsRecord]) -> list[FundamentalsRecord]:
    """Fill each missing item with its most recent prior value per security.

    Records are grouped by security and processed in month order. Months
    where some item has never been observed stay incomplete and are dropped
    here, so every returned vector is fully populated. Pure transformation:
    filled values never come from later months.
    """
    by_sid: dict[str, list[FundamentalsRecord]] = {}
    for rec in records:
        by_sid.setdefault(rec.sid, []).append(rec)
    out: list[FundamentalsRecord] = []
    for sid in sorted(by_sid):
        last = np.full(N_FUNDAMENTALS, np.nan, dtype=np.float64)
        for rec in sorted(by_sid[sid], key=lambda r: r.t):
            observed = ~np.isnan(rec.values)
            last[observed] = rec.values[observed]
            if not np.any(np.isnan(last)):
                out.append(FundamentalsRecord(sid, rec.t, last.copy()))
    return out


def apply_universe_filter(
    records: Iterable[MarketRecord], cfg: UniverseConfig
) -> FilterResult:
    """Keep security-months passing the US/sector/size screens, then drop
    qualifying runs shorter than ``min_consecutive_months``.

    A security re-enters the universe if it later re-qualifies for another
    full run. Raises ConfigError if the CPI series misses a needed month.
    """
    cfg.validate()
    if cfg.cpi_ref_month not in cfg.cpi_index:
        raise ConfigError(
            f"cpi_index does not cover the reference month {cfg.cpi_ref_month}"
        )
    cpi_ref = cfg.cpi_index[cfg.cpi_ref_month]
    exclusions = {"non_us": 0, "financial_sector": 0, "below_market_cap": 0, "short_run": 0}
    qualifying: dict[str, list[MarketRecord]] = {}
    for rec in records:
        row = rec.row
        if cfg.exclude_non_us and not row.is_us:
            exclusions["non_us"] += 1
            continue
        if cfg.exclude_financials and row.is_financial_sector:
            exclusions["financial_sector"] += 1
            continue
        if rec.t not in cfg.cpi_index:
            raise ConfigError(f"cpi_index missing month {rec.t}")
        adjusted = row.market_cap * (cpi_ref / cfg.cpi_index[rec.t])
        if adjusted < cfg.min_market_cap_musd:
            exclusions["below_market_cap"] += 1
            continue
        qualifying.setdefault(rec.sid, []).append(rec)

    kept: list[MarketRecord] = []
    for sid in sorted(qualifying):
        recs = sorted(qualifying[sid], key=lambda r: r.t)
        run: list[MarketRecord] = []
        for rec in recs:
            if run and rec.t != run[-1].t + 1:
                if len(run) >= cfg.min_consecutive_months:
                    kept.extend(run)
                else:
                    exclusions["short_run"] += len(run)
                run = []
            run.append(rec)
        if len(run) >= cfg.min_consecutive_months:
            kept.extend(run)
        else:
            exclusions["short_run"] += len(run)
    return FilterResult(records=kept, exclusions=exclusions)


def build_panel(
    fundamentals: Iterable[FundamentalsRecord],
    market: Iterable[MarketRecord],
) -> Panel:
    """Assemble the monthly panel from filtered market rows and filled
    fundamentals.

    Fundamentals persist forward: a market month at t takes the most recent
    complete fundamentals record at month <= t. Months with no market row,
    or preceding a security's first complete fundamentals, are absent.
    """
    fund_by_sid: dict[str, list[FundamentalsRecord]] = {}
    for rec in fundamentals:
        if np.any(np.isnan(rec.values)):
            raise ContractError(
                f"incomplete fundamentals for {rec.sid!r} at {rec.t}; run forward_fill first"
            )
        fund_by_sid.setdefault(rec.sid, []).append(rec)
    fund_months: dict[str, list[int]] = {}
    for sid, recs in fund_by_sid.items():
        recs.sort(key=lambda r: r.t)
        fund_months[sid] = [r.t for r in recs]
    observations: dict[str, dict[int, tuple[MarketRow, np.ndarray]]] = {}
    for rec in market:
        months = fund_months.get(rec.sid)
        if not months:
            continue
        i = bisect.bisect_right(months, rec.t) - 1
        if i < 0:
            continue
        vec = fund_by_sid[rec.sid][i].values
        observations.setdefault(rec.sid, {})[rec.t] = (rec.row, vec)
    if not observations:
        raise EmptyUniverseError("no security-month has both market data and fundamentals")
    return Panel(observations)


def load_panel(
    fundamentals_path: str | Path,
    market_path: str | Path,
    cfg: UniverseConfig,
) -> tuple[Panel, FilterResult]:
    """Full ingest pipeline: parse, forward-fill, filter, assemble."""
    fundamentals = forward_fill(parse_fundamentals_csv(fundamentals_path))
    market = parse_market_csv(market_path)
    filtered = apply_universe_filter(market, cfg)
    panel = build_panel(fundamentals, filtered.records)
    return panel, filtered
