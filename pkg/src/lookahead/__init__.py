"""Fundamentals forecasting, lookahead factor rankings, and a deterministic
monthly portfolio backtester."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    EBIT_IDX,
    FUNDAMENTAL_FIELDS,
    Error,
    MarketRow,
    MonthIndex,
    Panel,
    format_month,
    month_index_from_ymd,
    parse_month,
    ymd_from_month_index,
)
