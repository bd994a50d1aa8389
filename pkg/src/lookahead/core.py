"""Shared domain primitives: month arithmetic, the canonical fundamental
field order, per-month market rows, and the immutable monthly Panel."""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

EPOCH_YEAR = 1970

# Canonical order of the 16 reported fundamentals. Every matrix, CSV column
# block, and loss weight indexes fundamentals in exactly this order; nothing
# else in the codebase is allowed to define its own ordering.
FUNDAMENTAL_FIELDS: tuple[str, ...] = (
    "revenue_ttm",
    "cogs_ttm",
    "sgna_ttm",
    "ebit_ttm",
    "net_income_ttm",
    "cash_mrq",
    "receivables_mrq",
    "inventories_mrq",
    "other_current_assets_mrq",
    "ppe_mrq",
    "other_assets_mrq",
    "debt_current_mrq",
    "accounts_payable_mrq",
    "taxes_payable_mrq",
    "other_current_liabilities_mrq",
    "total_liabilities_mrq",
)

N_FUNDAMENTALS = len(FUNDAMENTAL_FIELDS)
EBIT_IDX = FUNDAMENTAL_FIELDS.index("ebit_ttm")
CASH_IDX = FUNDAMENTAL_FIELDS.index("cash_mrq")
TOTAL_LIABILITIES_IDX = FUNDAMENTAL_FIELDS.index("total_liabilities_mrq")


class Error(Exception):
    """Base class for all errors raised by this package."""


class DomainError(Error):
    """An argument violates an operation's stated domain."""


class UnknownSecurityError(Error):
    """A security id is not present in the panel at all."""


class ParseError(Error):
    """A data file violates its schema; message names file and line."""


class ConfigError(Error):
    """A configuration value is missing, malformed, or inconsistent."""


class EmptyUniverseError(Error):
    """Filtering left no security-months to build a panel from."""


class DivergenceError(Error):
    """Training produced a non-finite loss."""


class ContractError(Error):
    """An internal call contract was violated by the caller."""


# ---------------------------------------------------------------------------
# Month arithmetic
# ---------------------------------------------------------------------------

MonthIndex = int  # months since January 1970 (1970-01 == 0), always >= 0


def month_index_from_ymd(year: int, month: int) -> MonthIndex:
    """Map a calendar (year, month) to months since 1970-01."""
    if month < 1 or month > 12:
        raise DomainError(f"month must be in 1..12, got {month}")
    if year < EPOCH_YEAR:
        raise DomainError(f"year must be >= {EPOCH_YEAR}, got {year}")
    return (year - EPOCH_YEAR) * 12 + (month - 1)


def ymd_from_month_index(t: MonthIndex) -> tuple[int, int]:
    """Inverse of :func:`month_index_from_ymd`."""
    if t < 0:
        raise DomainError(f"month index must be >= 0, got {t}")
    return EPOCH_YEAR + t // 12, t % 12 + 1


def format_month(t: MonthIndex) -> str:
    year, month = ymd_from_month_index(t)
    return f"{year:04d}-{month:02d}"


def parse_month(text: str) -> MonthIndex:
    """Parse 'YYYY-MM' into a month index."""
    parts = text.strip().split("-")
    if len(parts) != 2:
        raise DomainError(f"expected 'YYYY-MM', got {text!r}")
    try:
        year, month = int(parts[0]), int(parts[1])
    except ValueError:
        raise DomainError(f"expected 'YYYY-MM', got {text!r}") from None
    return month_index_from_ymd(year, month)


# ---------------------------------------------------------------------------
# Fundamental vectors
# ---------------------------------------------------------------------------


def fundamentals_from_mapping(values: Mapping[str, float]) -> np.ndarray:
    """Build a length-16 fundamentals vector in canonical field order.

    All 16 fields must be present and finite; negatives are allowed
    (net income, for one, can be negative).
    """
    missing = [f for f in FUNDAMENTAL_FIELDS if f not in values]
    if missing:
        raise DomainError(f"missing fundamental fields: {missing}")
    unknown = [k for k in values if k not in FUNDAMENTAL_FIELDS]
    if unknown:
        raise DomainError(f"unknown fundamental fields: {unknown}")
    vec = np.array([float(values[f]) for f in FUNDAMENTAL_FIELDS], dtype=np.float64)
    if not np.all(np.isfinite(vec)):
        raise DomainError("fundamental values must be finite")
    return vec


# ---------------------------------------------------------------------------
# Market rows and the panel
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class MarketRow:
    """Per-stock per-month market data.

    Prices are USD per share (split- and dividend-adjusted); market cap is
    millions of USD; volume is shares traded over the month. ``exec_price``
    is the execution benchmark the simulator trades against.
    """

    close_price: float
    exec_price: float
    shares_outstanding: float
    market_cap: float
    month_share_volume: float
    dividend_per_share: float
    is_us: bool
    is_financial_sector: bool

    def validate(self) -> None:
        if not (self.close_price > 0 and np.isfinite(self.close_price)):
            raise DomainError(f"close_price must be > 0, got {self.close_price}")
        if not (self.exec_price > 0 and np.isfinite(self.exec_price)):
            raise DomainError(f"exec_price must be > 0, got {self.exec_price}")
        if not (self.market_cap > 0 and np.isfinite(self.market_cap)):
            raise DomainError(f"market_cap must be > 0, got {self.market_cap}")
        if not (self.month_share_volume >= 0 and np.isfinite(self.month_share_volume)):
            raise DomainError(
                f"month_share_volume must be >= 0, got {self.month_share_volume}"
            )
        if not (self.dividend_per_share >= 0 and np.isfinite(self.dividend_per_share)):
            raise DomainError(
                f"dividend_per_share must be >= 0, got {self.dividend_per_share}"
            )
        if not (self.shares_outstanding > 0 and np.isfinite(self.shares_outstanding)):
            raise DomainError(
                f"shares_outstanding must be > 0, got {self.shares_outstanding}"
            )


class Panel:
    """Immutable month-indexed universe of (MarketRow, fundamentals) pairs.

    Per security, months are strictly increasing and every stored
    fundamentals vector is fully populated (item-level gaps are resolved
    upstream by forward filling). Safe for concurrent reads once built.
    """

    def __init__(
        self,
        observations: Mapping[str, Mapping[int, tuple[MarketRow, np.ndarray]]],
    ):
        if not observations:
            raise EmptyUniverseError("panel has no securities")
        self._months: dict[str, list[int]] = {}
        self._rows: dict[str, list[MarketRow]] = {}
        self._fundamentals: dict[str, np.ndarray] = {}
        sids_at: dict[int, list[str]] = {}
        for sid in sorted(observations):
            if not sid:
                raise DomainError("security id must be a non-empty string")
            per_month = observations[sid]
            if not per_month:
                raise DomainError(f"security {sid!r} has no observations")
            months = sorted(per_month)
            rows = []
            mat = np.empty((len(months), N_FUNDAMENTALS), dtype=np.float64)
            for i, t in enumerate(months):
                if t < 0:
                    raise DomainError(f"negative month index {t} for {sid!r}")
                row, vec = per_month[t]
                row.validate()
                vec = np.asarray(vec, dtype=np.float64)
                if vec.shape != (N_FUNDAMENTALS,):
                    raise DomainError(
                        f"fundamentals for {sid!r} at {t} have shape {vec.shape}"
                    )
                rows.append(row)
                mat[i] = vec
                sids_at.setdefault(t, []).append(sid)
            if not np.all(np.isfinite(mat)):
                raise DomainError(f"non-finite fundamentals for {sid!r}")
            mat.setflags(write=False)
            self._months[sid] = months
            self._rows[sid] = rows
            self._fundamentals[sid] = mat
        self.securities: tuple[str, ...] = tuple(sorted(observations))
        self.start: int = min(m[0] for m in self._months.values())
        self.end: int = max(m[-1] for m in self._months.values())
        self._sids_at: dict[int, tuple[str, ...]] = {
            t: tuple(s) for t, s in sids_at.items()
        }

    def months(self, sid: str) -> list[int]:
        self._check_sid(sid)
        return list(self._months[sid])

    def has(self, sid: str, t: int) -> bool:
        self._check_sid(sid)
        return self._index_of(sid, t) is not None

    def lookup(self, sid: str, t: int) -> tuple[MarketRow, np.ndarray] | None:
        """Observation at exactly month t, or None. No interpolation."""
        self._check_sid(sid)
        i = self._index_of(sid, t)
        if i is None:
            return None
        return self._rows[sid][i], self._fundamentals[sid][i]

    def market_at(self, sid: str, t: int) -> MarketRow | None:
        obs = self.lookup(sid, t)
        return None if obs is None else obs[0]

    def last_observation_at_or_before(
        self, sid: str, t: int
    ) -> tuple[int, MarketRow, np.ndarray] | None:
        """Most recent observation at month <= t, with its month."""
        self._check_sid(sid)
        months = self._months[sid]
        i = bisect.bisect_right(months, t) - 1
        if i < 0:
            return None
        return months[i], self._rows[sid][i], self._fundamentals[sid][i]

    def sids_at(self, t: int) -> tuple[str, ...]:
        """Securities with an observation at month t, sorted."""
        return self._sids_at.get(t, ())

    def truncate(self, end: int) -> "Panel":
        """New panel limited to months <= end (for leakage audits)."""
        obs: dict[str, dict[int, tuple[MarketRow, np.ndarray]]] = {}
        for sid in self.securities:
            keep = {
                t: (self._rows[sid][i], self._fundamentals[sid][i])
                for i, t in enumerate(self._months[sid])
                if t <= end
            }
            if keep:
                obs[sid] = keep
        if not obs:
            raise EmptyUniverseError(f"no observations at or before month {end}")
        return Panel(obs)

    def n_observations(self) -> int:
        return sum(len(m) for m in self._months.values())

    def _check_sid(self, sid: str) -> None:
        if sid not in self._months:
            raise UnknownSecurityError(f"unknown security {sid!r}")

    def _index_of(self, sid: str, t: int) -> int | None:
        months = self._months[sid]
        i = bisect.bisect_left(months, t)
        if i < len(months) and months[i] == t:
            return i
        return None


def build_panel_from_observations(
    observations: Mapping[str, Mapping[int, tuple[MarketRow, np.ndarray]]],
) -> Panel:
    return Panel(observations)
