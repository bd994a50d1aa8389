"""Performance and forecast-quality statistics, plus report writers.

All MSEs are computed in standardized-scaled target space, unweighted over
the 16 fundamentals. Sharpe uses a zero monthly risk-free rate unless told
otherwise and is annualized by sqrt(12); a zero-variance return series has
no defined Sharpe and yields None.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DomainError

MONTHS_PER_YEAR = 12


def compound_annual_return(nav: Sequence[float]) -> float:
    """Annualized growth rate of a monthly NAV series."""
    nav = np.asarray(nav, dtype=np.float64)
    if nav.size < 2:
        raise DomainError("need at least 2 NAV points")
    if np.any(nav <= 0):
        raise DomainError("NAV must be positive throughout")
    return float((nav[-1] / nav[0]) ** (MONTHS_PER_YEAR / (nav.size - 1)) - 1.0)


def monthly_returns(nav: Sequence[float]) -> np.ndarray:
    nav = np.asarray(nav, dtype=np.float64)
    if nav.size < 2:
        raise DomainError("need at least 2 NAV points")
    return nav[1:] / nav[:-1] - 1.0


def sharpe_ratio(
    returns: Sequence[float], risk_free_monthly: float = 0.0
) -> float | None:
    """Annualized mean-over-std of excess monthly returns (sample std).

    Returns None when the excess-return variance is zero (undefined metric).
    """
    returns = np.asarray(returns, dtype=np.float64)
    if returns.size < 2:
        raise DomainError("need at least 2 returns")
    excess = returns - risk_free_monthly
    std = float(np.std(excess, ddof=1))
    if std == 0.0:
        return None
    return float(np.mean(excess) / std * np.sqrt(MONTHS_PER_YEAR))


def max_drawdown(nav: Sequence[float]) -> float:
    """Largest peak-to-trough NAV decline, as a positive fraction."""
    nav = np.asarray(nav, dtype=np.float64)
    if nav.size < 1:
        raise DomainError("need at least 1 NAV point")
    peaks = np.maximum.accumulate(nav)
    return float(np.max(1.0 - nav / peaks))


@dataclass
class MseSeries:
    overall: float
    months: list[int]
    values: list[float]
    counts: list[int]


def mse_series(
    predictions: np.ndarray, targets: np.ndarray, months: Sequence[int]
) -> MseSeries:
    """Unweighted MSE over all 16 targets, overall and grouped by month.

    The count-weighted mean of the monthly values equals the overall MSE.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    months = np.asarray(months)
    if predictions.shape != targets.shape or predictions.shape[0] != months.size:
        raise DomainError(
            f"misaligned shapes: {predictions.shape}, {targets.shape}, {months.size}"
        )
    sq = (predictions - targets) ** 2
    overall = float(np.mean(sq))
    out_months: list[int] = []
    values: list[float] = []
    counts: list[int] = []
    for m in np.unique(months):
        mask = months == m
        out_months.append(int(m))
        values.append(float(np.mean(sq[mask])))
        counts.append(int(np.sum(mask)))
    return MseSeries(overall=overall, months=out_months, values=values, counts=counts)


@dataclass
class PerformanceReport:
    car: float
    sharpe: float | None
    max_drawdown: float
    months: list[int]
    nav: list[float]
    monthly_returns: list[float]
    mse_model: MseSeries | None = None
    mse_naive: MseSeries | None = None


def performance_report(
    months: Sequence[int],
    nav: Sequence[float],
    mse_model: MseSeries | None = None,
    mse_naive: MseSeries | None = None,
) -> PerformanceReport:
    nav_arr = np.asarray(nav, dtype=np.float64)
    returns = monthly_returns(nav_arr)
    return PerformanceReport(
        car=compound_annual_return(nav_arr),
        sharpe=sharpe_ratio(returns),
        max_drawdown=max_drawdown(nav_arr),
        months=[int(m) for m in months],
        nav=[float(v) for v in nav_arr],
        monthly_returns=[float(r) for r in returns],
        mse_model=mse_model,
        mse_naive=mse_naive,
    )


def write_report_json(report: PerformanceReport, path: str | Path) -> None:
    payload = asdict(report)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_mse_monthly_csv(
    model: MseSeries, naive: MseSeries, path: str | Path
) -> None:
    by_month_naive = dict(zip(naive.months, naive.values))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("month,model_mse,naive_mse,n_samples\n")
        for m, v, c in zip(model.months, model.values, model.counts):
            fh.write(f"{m},{v!r},{by_month_naive[m]!r},{c}\n")


# ---------------------------------------------------------------------------
# Minimal self-contained SVG line charts
# ---------------------------------------------------------------------------

_SVG_COLORS = ("#d95f02", "#1b1b1b", "#1f77b4", "#2ca02c")
_W, _H = 640, 360
_MARGIN = 48


def _coords(
    xs: np.ndarray, ys: np.ndarray, x_range: tuple[float, float], y_range: tuple[float, float]
) -> str:
    x0, x1 = x_range
    y0, y1 = y_range
    span_x = (x1 - x0) or 1.0
    span_y = (y1 - y0) or 1.0
    points = []
    for x, y in zip(xs, ys):
        px = _MARGIN + (x - x0) / span_x * (_W - 2 * _MARGIN)
        py = _H - _MARGIN - (y - y0) / span_y * (_H - 2 * _MARGIN)
        points.append(f"{px:.2f},{py:.2f}")
    return " ".join(points)


def svg_line_chart(
    series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
    title: str,
    path: str | Path | None = None,
) -> str:
    """Render labelled (x, y) series as a small standalone SVG.

    Output bytes depend only on the inputs, so re-rendering the same data
    overwrites files identically.
    """
    if not series:
        raise DomainError("need at least one series")
    all_x = np.concatenate([np.asarray(s[1], dtype=np.float64) for s in series])
    all_y = np.concatenate([np.asarray(s[2], dtype=np.float64) for s in series])
    if all_x.size == 0:
        raise DomainError("series are empty")
    x_range = (float(all_x.min()), float(all_x.max()))
    y_range = (float(all_y.min()), float(all_y.max()))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {_W} {_H}" '
        f'font-family="sans-serif" font-size="12">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{_MARGIN}" y1="{_H - _MARGIN}" x2="{_W - _MARGIN}" y2="{_H - _MARGIN}" stroke="#888"/>',
        f'<line x1="{_MARGIN}" y1="{_MARGIN}" x2="{_MARGIN}" y2="{_H - _MARGIN}" stroke="#888"/>',
        f'<text x="{_MARGIN}" y="{_H - _MARGIN + 16}" text-anchor="middle">{x_range[0]:.6g}</text>',
        f'<text x="{_W - _MARGIN}" y="{_H - _MARGIN + 16}" text-anchor="middle">{x_range[1]:.6g}</text>',
        f'<text x="{_MARGIN - 4}" y="{_H - _MARGIN}" text-anchor="end">{y_range[0]:.6g}</text>',
        f'<text x="{_MARGIN - 4}" y="{_MARGIN + 4}" text-anchor="end">{y_range[1]:.6g}</text>',
    ]
    for i, (label, xs, ys) in enumerate(series):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        coords = _coords(
            np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64), x_range, y_range
        )
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>'
        )
        parts.append(
            f'<text x="{_W - _MARGIN}" y="{_MARGIN + 14 * i + 4}" text-anchor="end" '
            f'fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    svg = "\n".join(parts) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(svg)
    return svg
