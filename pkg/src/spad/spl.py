"""Self-paced sample reweighting.

The weight rule inverts classical self-paced learning: samples whose
reconstruction loss falls at or below the pace threshold are treated as
suspicious and dropped (weight 0), while high-loss samples keep weights
close to 1. The threshold rises with the step counter toward
mu - sigma of the per-batch loss distribution.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

STATS_BATCH = "batch"
STATS_RUNNING = "running"


@dataclass(frozen=True)
class SPLState:
    """Bookkeeping for the pace schedule.

    `step` counts processed mini-batches after warm-up; it stays frozen
    while `warmup_active` is set. `m` is the initial standard-deviation
    range and `r` the shrink rate of the schedule coefficient.
    """

    m: float = 4.0
    r: float = 5e-3
    step: int = 0
    warmup_active: bool = True
    last_lambda: float | None = None
    stats_mode: str = STATS_BATCH
    # Welford accumulators, used only in running-statistics mode.
    run_count: int = 0
    run_mean: float = 0.0
    run_m2: float = 0.0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.r <= 0:
            raise ValueError(f"r must be positive, got {self.r}")
        if self.step < 0:
            raise ValueError("step must be nonnegative")
        if self.stats_mode not in (STATS_BATCH, STATS_RUNNING):
            raise ValueError(f"unknown stats_mode {self.stats_mode!r}")

    def to_dict(self) -> dict:
        return {"m": self.m, "r": self.r, "step": self.step,
                "warmup_active": self.warmup_active,
                "last_lambda": self.last_lambda, "stats_mode": self.stats_mode,
                "run_count": self.run_count, "run_mean": self.run_mean,
                "run_m2": self.run_m2}

    @classmethod
    def from_dict(cls, d: dict) -> "SPLState":
        return cls(**d)


@dataclass(frozen=True)
class BatchReport:
    """Per-batch outcome of the reweighting step.

    `lambda_used` is None whenever the weight rule was bypassed (warm-up,
    constant-loss batch, or reweighting disabled); in that case all weights
    are exactly 1.
    """

    losses: tuple[float, ...]
    weights: tuple[float, ...]
    mu: float
    sigma: float
    lambda_used: float | None
    removed_count: int

    def __post_init__(self):
        if len(self.losses) != len(self.weights):
            raise ValueError("losses and weights must have equal length")
        if self.removed_count != sum(1 for w in self.weights if w == 0.0):
            raise ValueError("removed_count does not match zero weights")

    def weight_histogram(self) -> list[int]:
        """Counts over 10 equal bins spanning [0, 1]; the last bin is closed."""
        hist, _ = np.histogram(self.weights, bins=10, range=(0.0, 1.0))
        return hist.tolist()

    def log_line(self, step: int) -> str:
        return json.dumps({
            "step": int(step),
            "mu": self.mu,
            "sigma": self.sigma,
            "lambda": self.lambda_used,
            "removed_count": self.removed_count,
            "weight_histogram": self.weight_histogram(),
        })


def compute_lambda(mu: float, sigma: float, s: int, m: float, r: float) -> float:
    """Pace threshold for step `s`: min(mu - max(m - r*s, 1)*sigma, mu - sigma).

    The coefficient multiplying sigma never drops below 1, so the threshold
    saturates at mu - sigma. The result may be negative early on, which
    simply keeps every sample (see compute_weights).
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if s < 0:
        raise ValueError("step must be nonnegative")
    coeff = max(m - r * s, 1.0)
    return min(mu - coeff * sigma, mu - sigma)


def compute_weights(losses, lam: float) -> np.ndarray:
    """Closed-form sample weights for the given pace threshold.

    v_i = 0 for L_i <= lam, otherwise 1 - lam / L_i clamped to [0, 1].
    A threshold lam <= 0 keeps every sample at weight exactly 1 (including
    the degenerate zero-loss case).
    """
    l = np.asarray(losses, dtype=np.float64)
    if not np.all(np.isfinite(l)):
        raise ValueError("losses must be finite")
    if np.any(l < 0):
        raise ValueError("losses must be nonnegative")
    if lam <= 0:
        return np.ones_like(l)
    w = np.zeros_like(l)
    above = l > lam
    w[above] = 1.0 - lam / l[above]
    return np.clip(w, 0.0, 1.0)


def batch_statistics(losses) -> tuple[float, float]:
    """Arithmetic mean and population standard deviation of a batch."""
    l = np.asarray(losses, dtype=np.float64)
    if l.size < 2:
        raise ValueError(f"need at least 2 losses, got {l.size}")
    return float(l.mean()), float(l.std())


def unit_report(losses: Sequence[float], mu: float | None = None,
                sigma: float | None = None) -> BatchReport:
    """All-ones report for batches where the weight rule is bypassed."""
    if mu is None or sigma is None:
        mu, sigma = batch_statistics(losses)
    return BatchReport(losses=tuple(float(v) for v in losses),
                       weights=(1.0,) * len(losses),
                       mu=mu, sigma=sigma, lambda_used=None, removed_count=0)


def _running_update(state: SPLState, losses: np.ndarray) -> SPLState:
    count, mean, m2 = state.run_count, state.run_mean, state.run_m2
    for v in losses:
        count += 1
        delta = v - mean
        mean += delta / count
        m2 += delta * (v - mean)
    return replace(state, run_count=count, run_mean=mean, run_m2=m2)


def spl_step(losses: Sequence[float], state: SPLState) -> tuple[BatchReport, SPLState]:
    """One reweighting step: statistics, pace threshold, weights, bookkeeping.

    During warm-up all weights are 1 and the step counter stays frozen.
    A zero-spread batch carries no ranking signal, so it is kept whole
    rather than discarded by the saturated threshold.
    """
    l = np.asarray(losses, dtype=np.float64)
    if not np.all(np.isfinite(l)):
        raise ValueError("losses must be finite")
    mu, sigma = batch_statistics(l)

    if state.warmup_active:
        return unit_report(losses, mu, sigma), state

    if state.stats_mode == STATS_RUNNING:
        state = _running_update(state, l)
        mu = state.run_mean
        sigma = float(np.sqrt(state.run_m2 / state.run_count))

    if sigma == 0.0:
        log.warning("constant-loss batch (mu=%.6g): keeping all samples", mu)
        report = unit_report(losses, mu, sigma)
        return report, replace(state, step=state.step + 1, last_lambda=None)

    lam = compute_lambda(mu, sigma, state.step, state.m, state.r)
    weights = compute_weights(l, lam)
    report = BatchReport(losses=tuple(float(v) for v in l),
                         weights=tuple(float(w) for w in weights),
                         mu=mu, sigma=sigma, lambda_used=lam,
                         removed_count=int(np.count_nonzero(weights == 0.0)))
    return report, replace(state, step=state.step + 1, last_lambda=lam)
