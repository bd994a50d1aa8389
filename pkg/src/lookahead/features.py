"""Model inputs: 5-step input matrices with market-cap scaling and
cross-sectional momentum percentiles, 16-value targets, and train-time
standardization.

A sample at month t covers input steps (t-48, t-36, t-24, t-12, t) and the
target month t+12. Every input entry derives from months <= t only.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .core import DomainError, N_FUNDAMENTALS, Panel

MOMENTUM_HORIZONS: tuple[int, ...] = (1, 3, 6, 9)
N_STEPS = 5
STEP_MONTHS = 12
INPUT_LOOKBACK = (N_STEPS - 1) * STEP_MONTHS  # 48
TARGET_LEAD = 12
N_INPUT_COLUMNS = N_FUNDAMENTALS + len(MOMENTUM_HORIZONS)  # 20
# Earliest usable sample month relative to panel start: the oldest input
# step still needs a close 9 months further back for its momentum features.
MIN_HISTORY = INPUT_LOOKBACK + max(MOMENTUM_HORIZONS)  # 57


@dataclass(frozen=True)
class Sample:
    """One training/inference example.

    ``inputs`` is 5x20: per step, 16 mcap-scaled fundamentals then momentum
    percentiles for the 1/3/6/9-month horizons. ``target`` is the 16 scaled
    fundamentals at t+12, or None for inference-only samples.
    """

    sid: str
    t: int
    inputs: np.ndarray
    target: np.ndarray | None
    mcap_t: float


def scale_by_mcap(raw: np.ndarray, mcap_t: float) -> np.ndarray:
    """Divide fundamentals by the market cap at the last input step.

    Every step uses the same divisor so relative changes between steps
    survive scaling.
    """
    if not mcap_t > 0:
        raise DomainError(f"market cap must be > 0 to scale, got {mcap_t}")
    return np.asarray(raw, dtype=np.float64) / mcap_t


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 0..n-1 with exact ties sharing their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_values = values[order]
    i = 0
    n = len(values)
    while i < n:
        j = i
        while j + 1 < n and sorted_values[j + 1] == sorted_values[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0
        i = j + 1
    return ranks


def momentum_percentile(panel: Panel, t: int, horizon: int) -> dict[str, float]:
    """Cross-sectional percentile in [0, 1] of the trailing return.

    The return is close(t)/close(t-horizon) - 1 over securities observed at
    both months; others are excluded from that month's cross-section. A
    single-security cross-section gets 0.5 by convention.
    """
    if horizon not in MOMENTUM_HORIZONS:
        raise DomainError(f"horizon must be one of {MOMENTUM_HORIZONS}, got {horizon}")
    sids = []
    returns = []
    for sid in panel.sids_at(t):
        now = panel.market_at(sid, t)
        then = panel.market_at(sid, t - horizon)
        if now is None or then is None:
            continue
        sids.append(sid)
        returns.append(now.close_price / then.close_price - 1.0)
    n = len(sids)
    if n == 0:
        return {}
    if n == 1:
        return {sids[0]: 0.5}
    percentiles = _average_ranks(np.array(returns)) / (n - 1)
    return dict(zip(sids, percentiles))


@dataclass
class Standardizer:
    """Per-column zero-mean/unit-std transform fitted on training data.

    Input statistics pool the 5 time steps; target statistics are separate.
    Constant columns are flagged and keep std 1 so the transform stays
    invertible.
    """

    input_mean: np.ndarray
    input_std: np.ndarray
    input_constant: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray
    target_constant: np.ndarray

    def transform_inputs(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.input_mean) / self.input_std

    def inverse_transform_inputs(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.input_std + self.input_mean

    def transform_target(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.target_mean) / self.target_std

    def inverse_transform_target(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) * self.target_std + self.target_mean

    def apply(self, sample: Sample) -> Sample:
        target = None if sample.target is None else self.transform_target(sample.target)
        return replace(sample, inputs=self.transform_inputs(sample.inputs), target=target)

    def to_jsonable(self) -> dict:
        return {
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
            "input_constant": [bool(b) for b in self.input_constant],
            "target_mean": self.target_mean.tolist(),
            "target_std": self.target_std.tolist(),
            "target_constant": [bool(b) for b in self.target_constant],
        }

    @classmethod
    def from_jsonable(cls, data: dict) -> "Standardizer":
        return cls(
            input_mean=np.array(data["input_mean"], dtype=np.float64),
            input_std=np.array(data["input_std"], dtype=np.float64),
            input_constant=np.array(data["input_constant"], dtype=bool),
            target_mean=np.array(data["target_mean"], dtype=np.float64),
            target_std=np.array(data["target_std"], dtype=np.float64),
            target_constant=np.array(data["target_constant"], dtype=bool),
        )


def fit_standardizer(samples: Sequence[Sample]) -> Standardizer:
    """Fit per-column statistics on training samples only.

    Uses the population (1/n) standard deviation convention. Columns with
    zero spread are flagged constant and assigned std 1.
    """
    if not samples:
        raise DomainError("cannot fit a standardizer on an empty sample set")
    inputs = np.stack([s.inputs for s in samples]).reshape(-1, N_INPUT_COLUMNS)
    targets = [s.target for s in samples if s.target is not None]
    if not targets:
        raise DomainError("no training sample has a target")
    target_mat = np.stack(targets)

    def stats(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        mean = mat.mean(axis=0)
        std = mat.std(axis=0)  # population convention
        constant = std == 0.0
        std = np.where(constant, 1.0, std)
        return mean, std, constant

    input_mean, input_std, input_constant = stats(inputs)
    target_mean, target_std, target_constant = stats(target_mat)
    return Standardizer(
        input_mean, input_std, input_constant, target_mean, target_std, target_constant
    )


class _MomentumCache:
    def __init__(self, panel: Panel):
        self.panel = panel
        self._cache: dict[tuple[int, int], dict[str, float]] = {}

    def get(self, t: int, horizon: int) -> dict[str, float]:
        key = (t, horizon)
        if key not in self._cache:
            self._cache[key] = momentum_percentile(self.panel, t, horizon)
        return self._cache[key]


def build_samples(
    panel: Panel,
    months: Iterable[int],
    standardizer: Standardizer | None = None,
    for_inference: bool = False,
) -> tuple[list[Sample], int]:
    """Build samples for each (security, t) with full history available.

    A sample exists iff the security is observed at all five input steps and
    every momentum percentile at every step is computable. Targets require
    an observation at t+12; with ``for_inference=True`` (factor scoring) no
    target is attached and t+12 is not required, which keeps the eligible
    universe free of survivorship. Months past the panel end likewise yield
    inference-only samples. Returns (samples, skipped_count), canonically
    ordered by (sid, t).
    """
    momentum = _MomentumCache(panel)
    samples: list[Sample] = []
    skipped = 0
    month_list = sorted(set(months))
    for sid in panel.securities:
        observed = set(panel.months(sid))
        for t in month_list:
            if t not in observed:
                continue
            steps = [t - INPUT_LOOKBACK + i * STEP_MONTHS for i in range(N_STEPS)]
            if steps[0] < 0 or any(s not in observed for s in steps):
                skipped += 1
                continue
            target_vec: np.ndarray | None = None
            if not for_inference and t + TARGET_LEAD <= panel.end:
                target_obs = panel.lookup(sid, t + TARGET_LEAD)
                if target_obs is None:
                    skipped += 1
                    continue
                target_vec = target_obs[1]
            raw = np.empty((N_STEPS, N_FUNDAMENTALS), dtype=np.float64)
            mom = np.empty((N_STEPS, len(MOMENTUM_HORIZONS)), dtype=np.float64)
            ok = True
            for i, s in enumerate(steps):
                row, vec = panel.lookup(sid, s)
                raw[i] = vec
                for j, horizon in enumerate(MOMENTUM_HORIZONS):
                    pct = momentum.get(s, horizon).get(sid)
                    if pct is None:
                        ok = False
                        break
                    mom[i, j] = pct
                if not ok:
                    break
            if not ok:
                skipped += 1
                continue
            mcap_t = panel.market_at(sid, t).market_cap
            inputs = np.concatenate([scale_by_mcap(raw, mcap_t), mom], axis=1)
            target = None if target_vec is None else scale_by_mcap(target_vec, mcap_t)
            sample = Sample(sid=sid, t=t, inputs=inputs, target=target, mcap_t=mcap_t)
            if standardizer is not None:
                sample = standardizer.apply(sample)
            samples.append(sample)
    return samples, skipped


def samples_to_matrices(
    samples: Sequence[Sample], standardizer: Standardizer | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Stack samples into (n, 100) inputs and (n, 16) targets.

    Inputs flatten step-major (step 0's 20 columns first). Targets are None
    if any sample lacks one. Applies the standardizer when given.
    """
    if standardizer is not None:
        samples = [standardizer.apply(s) for s in samples]
    x = np.stack([s.inputs.reshape(-1) for s in samples])
    if any(s.target is None for s in samples):
        return x, None
    y = np.stack([s.target for s in samples])
    return x, y
