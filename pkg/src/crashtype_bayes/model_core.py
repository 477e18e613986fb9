"""Joint log-posterior of the random-effect negative binomial model.

    y_ij ~ NB(θ_ij, r),  log θ_ij = β·x_ij + φ_i,  φ_i ~ N(0, σ_φ²)

with N(0, v) priors on β and Inverse-Gamma priors on r and σ_φ². The
normalizing constant of the posterior is never computed.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from crashtype_bayes.design import DesignMatrix, DesignRow
from crashtype_bayes.exceptions import DivergenceError, NumericError
from crashtype_bayes.negbin import nb_log_pmf_array
from crashtype_bayes.priors import InverseGammaPrior, NormalPrior, PriorSpec

# |log θ| above this raises instead of overflowing exp()
MAX_LINEAR_PREDICTOR = 700.0


@dataclass
class Parameters:
    """Model parameters: β (one per design column), φ (one per intersection), r, σ_φ²"""

    beta: np.ndarray
    phi: np.ndarray
    r: float
    sigma2_phi: float

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        if not self.r > 0:
            raise NumericError(f"dispersion r must be positive, got {self.r}")
        if not self.sigma2_phi > 0:
            raise NumericError(f"sigma2_phi must be positive, got {self.sigma2_phi}")

    @classmethod
    def zeros(cls, dm: DesignMatrix, r: float = 1.0, sigma2_phi: float = 1.0) -> "Parameters":
        return cls(np.zeros(dm.n_columns), np.zeros(dm.n_groups), r, sigma2_phi)

    def check_dimensions(self, dm: DesignMatrix) -> None:
        if self.beta.shape != (dm.n_columns,):
            raise NumericError(f"beta has shape {self.beta.shape}, design has {dm.n_columns} columns")
        if self.phi.shape != (dm.n_groups,):
            raise NumericError(f"phi has shape {self.phi.shape}, design has {dm.n_groups} groups")

    def copy(self) -> "Parameters":
        return Parameters(self.beta.copy(), self.phi.copy(), self.r, self.sigma2_phi)

    def report(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "r": self.r,
            "sigma2_phi": self.sigma2_phi,
            "phi_range": [float(self.phi.min()), float(self.phi.max())] if self.phi.size else [],
        }


def check_linear_predictor(eta: np.ndarray, state: Optional[dict] = None) -> None:
    """Raise DivergenceError when any |log θ| exceeds MAX_LINEAR_PREDICTOR"""
    if not np.all(np.isfinite(eta)):
        raise NumericError("linear predictor is not finite")
    if eta.size and np.max(np.abs(eta)) > MAX_LINEAR_PREDICTOR:
        worst = int(np.argmax(np.abs(eta)))
        report = dict(state or {})
        report.update({"row": worst, "linear_predictor": float(eta[worst])})
        raise DivergenceError(
            f"linear predictor {eta[worst]:.4g} at row {worst} exceeds ±{MAX_LINEAR_PREDICTOR}",
            state=report,
        )


def linear_predictor(row: DesignRow, params: Parameters) -> float:
    """
    Expected count θ = exp(β·x + φ_group) of one design row

    Raises:
        NumericError: non-finite covariate or dimension mismatch
        DivergenceError: the exponent exceeds the overflow bound
    """
    x = np.asarray(row.values, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite covariate in row of group {row.group_index}")
    if x.shape != params.beta.shape:
        raise NumericError(f"row has {x.size} values, beta has {params.beta.size}")
    eta = np.array([float(x @ params.beta) + params.phi[row.group_index]])
    check_linear_predictor(eta, params.report())
    return math.exp(eta[0])


def linear_predictor_array(dm: DesignMatrix, params: Parameters) -> np.ndarray:
    """log θ for every row of the design"""
    params.check_dimensions(dm)
    eta = dm.X @ params.beta + params.phi[dm.group]
    check_linear_predictor(eta, params.report())
    return eta


def log_likelihood(dm: DesignMatrix, params: Parameters) -> float:
    """Sum of NB log-pmf over the rows; 0 for an empty design"""
    if dm.n_rows == 0:
        return 0.0
    eta = linear_predictor_array(dm, params)
    return float(np.sum(nb_log_pmf_array(dm.y, np.exp(eta), params.r)))


def log_r_prior(log_r: float, prior: InverseGammaPrior) -> float:
    """Prior density of log r, Jacobian included"""
    return prior.logpdf(math.exp(log_r)) + log_r


def random_effect_log_density(phi: np.ndarray, sigma2_phi: float) -> float:
    return float(np.sum(NormalPrior(mean=0.0, variance=sigma2_phi).logpdf(phi)))


def log_prior(params: Parameters, priors: PriorSpec) -> float:
    """Σ log N(β_k) + Σ log N(φ_i; 0, σ_φ²) + log IG(r) + log IG(σ_φ²)"""
    return (
        float(np.sum(priors.beta.logpdf(params.beta)))
        + random_effect_log_density(params.phi, params.sigma2_phi)
        + priors.r.logpdf(params.r)
        + priors.sigma2_phi.logpdf(params.sigma2_phi)
    )


def log_posterior(dm: DesignMatrix, params: Parameters, priors: PriorSpec) -> float:
    """Unnormalized log posterior: log_likelihood + log_prior"""
    return log_likelihood(dm, params) + log_prior(params, priors)
