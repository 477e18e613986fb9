"""Prior distributions of the random-effect negative binomial model."""

import math
from typing import Annotated

import numpy as np
from pydantic import BaseModel, Field
from scipy.special import gammaln

_LOG_2PI = math.log(2.0 * math.pi)


class NormalPrior(BaseModel):
    """Normal prior N(mean, variance) placed on every regression coefficient"""

    mean: Annotated[float, Field(default=0.0, description="Prior mean")]
    variance: Annotated[float, Field(default=1e5, gt=0, description="Prior variance")]

    model_config = {"frozen": True, "extra": "forbid"}

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return -0.5 * (_LOG_2PI + math.log(self.variance)) - 0.5 * (x - self.mean) ** 2 / self.variance


class InverseGammaPrior(BaseModel):
    """Inverse-Gamma(shape, scale) on a positive parameter

    Equivalent to Gamma(shape, rate=scale) on its reciprocal.
    """

    shape: Annotated[float, Field(default=1e-3, gt=0, description="Shape a")]
    scale: Annotated[float, Field(default=1e-3, gt=0, description="Scale b")]

    model_config = {"frozen": True, "extra": "forbid"}

    def logpdf(self, x: float) -> float:
        if x <= 0:
            return -math.inf
        a, b = self.shape, self.scale
        return a * math.log(b) - float(gammaln(a)) - (a + 1.0) * math.log(x) - b / x

    def mean(self) -> float:
        if self.shape <= 1:
            return math.inf
        return self.scale / (self.shape - 1.0)

    def sample(self, rng: np.random.Generator) -> float:
        gamma_draw = rng.standard_gamma(self.shape)
        # tiny shapes underflow to zero
        return self.scale / max(gamma_draw, np.finfo(float).tiny)


class PriorSpec(BaseModel):
    """Priors of β, r and σ_φ² (defaults: N(0, 1e5) and Inverse-Gamma(1e-3, 1e-3))"""

    beta: NormalPrior = Field(default_factory=NormalPrior)
    r: InverseGammaPrior = Field(default_factory=InverseGammaPrior)
    sigma2_phi: InverseGammaPrior = Field(default_factory=InverseGammaPrior)

    model_config = {"frozen": True, "extra": "forbid"}
