"""Baseline and shifted context distributions for both synthetic systems.

Contexts are returned as ``(n, dim)`` float arrays: ``(amplitude, frequency)``
for the spring and ``(amplitude, frequency, spread)`` for the pendulum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import special, stats

from .errors import InvalidCorrelationError, UnsupportedSettingError

System = Literal["spring", "pendulum"]
CONTEXT_DIM = {"spring": 2, "pendulum": 3}


@dataclass(frozen=True)
class BetaMarginalParams:
    a1: float = 1.0
    b1: float = 2.0
    a2: float = 1.0
    b2: float = 4.0
    amp_range: tuple[float, float] = (0.1, 0.3)
    freq_range: tuple[float, float] = (1.0, 5.0)
    spread: float = 1.0

    def __post_init__(self):
        for name in ("a1", "b1", "a2", "b2"):
            if not getattr(self, name) > 0:
                raise UnsupportedSettingError(f"Beta shape {name}={getattr(self, name)} must be positive")
        for lo, hi in (self.amp_range, self.freq_range):
            if not lo < hi:
                raise ValueError("ranges must be ordered")


BASELINE_BETA = BetaMarginalParams()


# (system, family) -> regimes that exist in the shift table
SHIFT_TABLE: dict[tuple[str, str], tuple[str, ...]] = {
    ("spring", "mean"): ("null", "boundary", "alternative"),
    ("spring", "covariance"): ("null", "boundary"),
    ("pendulum", "marginal"): ("null", "boundary", "alternative"),
    ("pendulum", "dependence"): ("null", "boundary"),
}

DEFAULT_FAMILY = {"spring": "mean", "pendulum": "marginal"}


@dataclass(frozen=True)
class ShiftSetting:
    system: str
    family: str
    regime: str
    delta: float = 0.0

    def __post_init__(self):
        regimes = SHIFT_TABLE.get((self.system, self.family))
        if regimes is None or self.regime not in regimes:
            raise UnsupportedSettingError(
                f"no {self.regime!r} regime for {self.system}/{self.family} in the shift table"
            )
        if not self.delta >= 0:
            raise UnsupportedSettingError("delta must be non-negative")


def _beta_scaled(rng, a, b, lo, hi, n):
    return lo + (hi - lo) * rng.beta(a, b, size=n)


def _pendulum_from_beta(rng, p: BetaMarginalParams, n: int) -> np.ndarray:
    amp = _beta_scaled(rng, p.a1, p.b1, *p.amp_range, n)
    freq = _beta_scaled(rng, p.a2, p.b2, *p.freq_range, n)
    return np.column_stack([amp, freq, np.full(n, p.spread)])


def sample_baseline(system: str, n: int, seed=None) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    if system == "spring":
        return rng.standard_normal((n, 2))
    if system == "pendulum":
        return _pendulum_from_beta(rng, BASELINE_BETA, n)
    raise UnsupportedSettingError(f"unknown system {system!r}")


def marginal_shift_params(regime: str, delta: float) -> BetaMarginalParams:
    if regime == "null":
        return BetaMarginalParams(a1=1 + 10 * delta / 3, b1=2 + 20 * delta / 3)
    a2, b2 = 1 + 1.5 * delta, 4 - 1.5 * delta
    if regime == "boundary":
        return BetaMarginalParams(a2=a2, b2=b2)
    return BetaMarginalParams(a1=1.5, b1=1.5, a2=a2, b2=b2)


def sample_shifted(setting: ShiftSetting, n: int, seed=None) -> np.ndarray:
    """Draw ``n`` contexts from the shifted law ``P1(delta)`` described by ``setting``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    d, regime = setting.delta, setting.regime
    if setting.system == "spring":
        z = rng.standard_normal((n, 2))
        if setting.family == "mean":
            mu0, v = {
                "null": ((0.0, 0.0), (0.0, 1.0)),
                "boundary": ((0.0, 0.0), (1.0, 0.0)),
                "alternative": ((-1.0, 0.0), (0.0, 1.0)),
            }[regime]
            return z + np.asarray(mu0) + d * np.asarray(v)
        scale = np.array([1.0, np.sqrt(1 + d)]) if regime == "null" else np.array([np.sqrt(1 + d), 1.0])
        return z * scale
    if setting.family == "marginal":
        return _pendulum_from_beta(rng, marginal_shift_params(regime, d), n)
    rho = -d if regime == "null" else d
    return _copula(rng, rho, BASELINE_BETA, n)


def _copula(rng, rho: float, params: BetaMarginalParams, n: int) -> np.ndarray:
    if not -1 < rho < 1:
        raise InvalidCorrelationError(f"correlation must lie in (-1, 1), got {rho}")
    z1 = rng.standard_normal(n)
    z2 = rho * z1 + np.sqrt(1 - rho**2) * rng.standard_normal(n)
    u1, u2 = special.ndtr(z1), special.ndtr(z2)
    lo1, hi1 = params.amp_range
    lo2, hi2 = params.freq_range
    amp = lo1 + (hi1 - lo1) * special.betaincinv(params.a1, params.b1, u1)
    freq = lo2 + (hi2 - lo2) * special.betaincinv(params.a2, params.b2, u2)
    return np.column_stack([amp, freq, np.full(n, params.spread)])


def gaussian_copula_beta(rho: float, params: BetaMarginalParams = BASELINE_BETA, n: int = 1, seed=None) -> np.ndarray:
    """Pendulum contexts whose (amplitude, frequency) share a Gaussian copula with correlation ``rho``.

    Marginals are the scaled Beta laws in ``params`` for every ``rho``.
    """
    return _copula(np.random.default_rng(seed), rho, params, n)


def scaled_beta_cdf(x, a, b, lo, hi):
    return stats.beta.cdf((np.asarray(x) - lo) / (hi - lo), a, b)
