"""EBIT/EV factor snapshots in three modes and deterministic rankings.

Modes: ``qfm`` (current EBIT), ``lfm`` (predicted 12-month-ahead EBIT), and
``clairvoyant:H`` (oracle EBIT observed H months ahead; H=0 coincides with
qfm exactly). Ineligible securities are excluded with a recorded reason,
never assigned sentinel values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    CASH_IDX,
    EBIT_IDX,
    TOTAL_LIABILITIES_IDX,
    DomainError,
    MarketRow,
    Panel,
)
from .features import build_samples
from .forecast import Predictor

logger = logging.getLogger(__name__)

MODES = ("qfm", "lfm", "clairvoyant")


@dataclass(frozen=True)
class FactorSnapshot:
    """Factor values for the eligible cross-section at one month."""

    t: int
    mode: str
    values: dict[str, float]
    exclusions: dict[str, str]  # sid -> reason


def parse_mode(text: str) -> tuple[str, int | None]:
    """Parse 'qfm' | 'lfm' | 'clairvoyant:H' into (mode, horizon)."""
    if text == "qfm" or text == "lfm":
        return text, None
    if text.startswith("clairvoyant:"):
        try:
            horizon = int(text.split(":", 1)[1])
        except ValueError:
            raise DomainError(f"bad clairvoyant horizon in {text!r}") from None
        if horizon < 0:
            raise DomainError(f"clairvoyant horizon must be >= 0, got {horizon}")
        return "clairvoyant", horizon
    raise DomainError(f"unknown factor mode {text!r}")


def format_mode(mode: str, horizon: int | None = None) -> str:
    return f"clairvoyant:{horizon}" if mode == "clairvoyant" else mode


def enterprise_value(row: MarketRow, fundamentals: np.ndarray) -> float:
    """Market cap plus total liabilities minus cash, in millions USD.

    The 16 reported items carry no long-term-debt line, so total liabilities
    stands in for debt in the conventional EV composition. Non-positive
    results mark the security ineligible rather than failing.
    """
    return float(row.market_cap + fundamentals[TOTAL_LIABILITIES_IDX] - fundamentals[CASH_IDX])


def _ebit_over_ev_snapshot(panel: Panel, t: int, horizon: int, mode_label: str) -> FactorSnapshot:
    values: dict[str, float] = {}
    exclusions: dict[str, str] = {}
    for sid in panel.sids_at(t):
        row, fundamentals = panel.lookup(sid, t)
        ev = enterprise_value(row, fundamentals)
        if ev <= 0:
            exclusions[sid] = "non_positive_ev"
            continue
        future = panel.lookup(sid, t + horizon) if horizon else (row, fundamentals)
        if future is None:
            exclusions[sid] = "missing_future_observation"
            continue
        values[sid] = float(future[1][EBIT_IDX]) / ev
    return FactorSnapshot(t=t, mode=mode_label, values=values, exclusions=exclusions)


def qfm_factor(panel: Panel, t: int) -> FactorSnapshot:
    """Current EBIT over current enterprise value."""
    return _ebit_over_ev_snapshot(panel, t, 0, "qfm")


def clairvoyant_factor(panel: Panel, t: int, horizon: int) -> FactorSnapshot:
    """Oracle EBIT observed ``horizon`` months ahead over current EV.

    Horizon 0 reproduces the qfm snapshot values bitwise. Securities without
    the future observation (delisted before t+horizon) are ineligible.
    """
    if horizon < 0:
        raise DomainError(f"horizon must be >= 0, got {horizon}")
    if t + horizon > panel.end:
        raise DomainError(
            f"clairvoyant horizon {horizon} at month {t} exceeds panel end {panel.end}"
        )
    return _ebit_over_ev_snapshot(panel, t, horizon, format_mode("clairvoyant", horizon))


def lfm_factor(panel: Panel, t: int, predictor: Predictor) -> FactorSnapshot:
    """Predicted 12-month-ahead EBIT over current enterprise value.

    Securities without a constructible inference sample at t are excluded;
    prediction never requires data past month t.
    """
    samples, _ = build_samples(panel, [t], for_inference=True)
    values: dict[str, float] = {}
    exclusions: dict[str, str] = {}
    sampled = {s.sid: s for s in samples}
    forecasts: dict[str, float] = {}
    if samples:
        ebit_musd = predictor.predict_ebit_musd(samples)
        forecasts = {s.sid: float(v) for s, v in zip(samples, ebit_musd)}
    for sid in panel.sids_at(t):
        if sid not in sampled:
            exclusions[sid] = "no_sample"
            continue
        row, fundamentals = panel.lookup(sid, t)
        ev = enterprise_value(row, fundamentals)
        if ev <= 0:
            exclusions[sid] = "non_positive_ev"
            continue
        values[sid] = forecasts[sid] / ev
    return FactorSnapshot(t=t, mode="lfm", values=values, exclusions=exclusions)


def factor_snapshot(
    panel: Panel,
    t: int,
    mode: str,
    predictor: Predictor | None = None,
) -> FactorSnapshot:
    """Dispatch on a mode string such as 'qfm', 'lfm', or 'clairvoyant:12'."""
    kind, horizon = parse_mode(mode)
    if kind == "qfm":
        return qfm_factor(panel, t)
    if kind == "lfm":
        if predictor is None:
            raise DomainError("lfm mode requires a trained predictor")
        return lfm_factor(panel, t, predictor)
    return clairvoyant_factor(panel, t, horizon)


def rank_top_n(snapshot: FactorSnapshot, n: int) -> list[str]:
    """Top-n security ids, descending by factor, ties broken by ascending id."""
    if n <= 0:
        raise DomainError(f"n must be > 0, got {n}")
    ordered = sorted(snapshot.values.items(), key=lambda kv: (-kv[1], kv[0]))
    return [sid for sid, _ in ordered[:n]]


def write_factor_dump(snapshots: Sequence[FactorSnapshot], path: str | Path) -> None:
    """Audit CSV: one row per (month, security), eligible or not."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,sid,mode,factor,eligible,reason\n")
        for snap in snapshots:
            for sid in sorted(set(snap.values) | set(snap.exclusions)):
                if sid in snap.values:
                    fh.write(f"{snap.t},{sid},{snap.mode},{snap.values[sid]!r},1,\n")
                else:
                    fh.write(f"{snap.t},{sid},{snap.mode},,0,{snap.exclusions[sid]}\n")
