"""Negative binomial kernel in mean-dispersion (NB2) parameterization.

Variance is θ + θ²/r and the success probability is r / (r + θ), the
convention of BUGS-style ``dnegbin`` models with θ the mean and r the size.
"""

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.special import betaln

from crashtype_bayes.exceptions import NBDomainError

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class NBParams:
    """Mean θ and dispersion r of a negative binomial law"""

    mean: float
    r: float

    def __post_init__(self):
        if not (self.mean > 0 and math.isfinite(self.mean)):
            raise NBDomainError(f"mean must be positive and finite, got {self.mean}")
        if not (self.r > 0 and math.isfinite(self.r)):
            raise NBDomainError(f"dispersion r must be positive and finite, got {self.r}")

    @property
    def variance(self) -> float:
        return self.mean + self.mean**2 / self.r


def nb_log_pmf_array(y: ArrayLike, theta: ArrayLike, r: ArrayLike) -> np.ndarray:
    """
    Elementwise NB log-pmf without domain checks

    ln Γ(y+r) − ln Γ(r) − ln y! is evaluated as −ln(r+y) − ln B(r, y+1), which
    stays accurate when r is large against y.
    """
    y = np.asarray(y, dtype=float)
    theta = np.asarray(theta, dtype=float)
    r = np.asarray(r, dtype=float)
    log_coefficient = -np.log(r + y) - betaln(r, y + 1.0)
    return log_coefficient - r * np.log1p(theta / r) + y * (np.log(theta) - np.log(r + theta))


def nb_log_pmf(y: int, p: NBParams) -> float:
    """
    Log probability of count y under NB(θ, r)

    Raises:
        NBDomainError: y is negative
    """
    if y < 0:
        raise NBDomainError(f"count must be nonnegative, got {y}")
    return float(nb_log_pmf_array(y, p.mean, p.r))


def nb_sample_array(
    theta: ArrayLike, r: ArrayLike, rng: np.random.Generator, size: Optional[tuple] = None
) -> np.ndarray:
    """Gamma-Poisson draws: λ ~ Gamma(r, θ/r), y ~ Poisson(λ)"""
    theta = np.asarray(theta, dtype=float)
    r = np.asarray(r, dtype=float)
    lam = rng.gamma(shape=r, scale=theta / r, size=size)
    return rng.poisson(lam)


def nb_sample(p: NBParams, rng: np.random.Generator, size: Optional[int] = None) -> Union[int, np.ndarray]:
    """Draw from NB(θ, r); a single int when size is None"""
    draws = nb_sample_array(p.mean, p.r, rng, size=size)
    if size is None:
        return int(draws)
    return draws
