"""Convergence and mixing diagnostics: Gelman-Rubin R̂, effective sample size, acceptance rates."""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from crashtype_bayes.exceptions import DegenerateChainError
from crashtype_bayes.sampler import Trace

logger = logging.getLogger(__name__)

RHAT_THRESHOLD = 1.1
ESS_THRESHOLD = 400.0
MIN_RHAT_DRAWS = 4
MIN_ESS_DRAWS = 10
MEAN_PHI = "mean_phi"


def _is_random_effect(name: str) -> bool:
    return name.startswith("phi[")


def gelman_rubin(chains: Sequence[np.ndarray], split: bool = False) -> float:
    """
    Potential scale reduction factor of one parameter

    R̂ = sqrt(((n−1)/n · W + B/n) / W), W the mean within-chain variance and B
    n times the variance of the chain means. With split=True every chain is
    cut in halves first (the middle draw of an odd-length chain is dropped).

    Raises:
        ValueError: fewer than two chains, chains shorter than 4 or of unequal length
        DegenerateChainError: the within-chain variance is zero
    """
    arrays = [np.asarray(chain, dtype=float) for chain in chains]
    if split:
        halves = []
        for chain in arrays:
            half = chain.size // 2
            halves.extend([chain[:half], chain[chain.size - half :]])
        arrays = halves
    if len(arrays) < 2:
        raise ValueError("R-hat needs at least two chains")
    n = arrays[0].size
    if any(chain.size != n for chain in arrays):
        raise ValueError("R-hat needs chains of equal length")
    if n < MIN_RHAT_DRAWS:
        raise ValueError(f"R-hat needs at least {MIN_RHAT_DRAWS} draws per chain, got {n}")

    draws = np.vstack(arrays)
    within = float(np.mean(np.var(draws, axis=1, ddof=1)))
    if within <= 0.0:
        raise DegenerateChainError("zero within-chain variance")
    between = n * float(np.var(np.mean(draws, axis=1), ddof=1))
    pooled = (n - 1) / n * within + between / n
    return math.sqrt(pooled / within)


def autocorrelation(x: np.ndarray) -> np.ndarray:
    """Sample autocorrelation at lags 0..n-1, computed by FFT"""
    x = np.asarray(x, dtype=float)
    n = x.size
    centered = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    spectrum = np.fft.rfft(centered, size)
    acov = np.fft.irfft(spectrum * np.conjugate(spectrum), size)[:n]
    return acov / acov[0]


@dataclass(frozen=True)
class EssEstimate:
    """Effective sample size; raw is the uncapped estimate"""

    value: float
    raw: float
    capped: bool = False

    def __float__(self) -> float:
        return self.value


def effective_sample_size(trace: np.ndarray) -> EssEstimate:
    """
    ESS = n / (1 + 2Σρ_k) with Geyer's initial positive sequence truncation

    Autocorrelations are summed in pairs (ρ_2m + ρ_2m+1) up to the first
    negative pair. Estimates above n, as produced by antithetic traces, are
    capped at n and flagged.

    Raises:
        ValueError: fewer than 10 draws
        DegenerateChainError: the trace is constant
    """
    x = np.asarray(trace, dtype=float)
    n = x.size
    if n < MIN_ESS_DRAWS:
        raise ValueError(f"ESS needs at least {MIN_ESS_DRAWS} draws, got {n}")
    if np.ptp(x) == 0.0:
        raise DegenerateChainError("constant trace")

    rho = autocorrelation(x)
    n_pairs = n // 2
    pairs = rho[: 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
    negative = np.flatnonzero(pairs < 0)
    stop = int(negative[0]) if negative.size else n_pairs
    tau = -1.0 + 2.0 * float(np.sum(pairs[:stop]))

    raw = n / tau if tau > 0 else math.inf
    if raw > n:
        return EssEstimate(value=float(n), raw=raw, capped=True)
    return EssEstimate(value=raw, raw=raw)


def pooled_effective_sample_size(chains: Sequence[np.ndarray]) -> EssEstimate:
    """Sum of per-chain ESS, capped at the pooled draw count"""
    estimates = [effective_sample_size(chain) for chain in chains]
    total = sum(np.asarray(chain).size for chain in chains)
    raw = sum(e.raw for e in estimates)
    value = sum(e.value for e in estimates)
    capped = any(e.capped for e in estimates) or value > total
    return EssEstimate(value=float(min(value, total)), raw=raw, capped=capped)


class ParameterDiagnostics(BaseModel):
    name: str
    r_hat: Optional[float] = None
    ess: Optional[float] = None
    ess_capped: bool = False
    flags: List[str] = []


class MeanPhiMonitor(BaseModel):
    """Posterior of the average random effect; it should hover near zero"""

    mean: float
    sd: float
    flagged: bool


class DiagnosticsReport(BaseModel):
    """Per-parameter R̂ and ESS, per-coordinate acceptance rates and warning flags"""

    n_chains: int
    n_draws: int
    split: bool = False
    parameters: List[ParameterDiagnostics]
    acceptance: Dict[str, float] = {}
    mean_phi: Optional[MeanPhiMonitor] = None
    rhat_threshold: float = RHAT_THRESHOLD
    ess_threshold: float = ESS_THRESHOLD

    def parameter(self, name: str) -> ParameterDiagnostics:
        for entry in self.parameters:
            if entry.name == name:
                return entry
        raise KeyError(name)

    @property
    def converged(self) -> bool:
        return not any("r_hat" in p.flags or "degenerate" in p.flags for p in self.parameters)

    @property
    def warnings(self) -> List[str]:
        messages = []
        for p in self.parameters:
            for flag in p.flags:
                if flag == "r_hat":
                    messages.append(f"{p.name}: R-hat {p.r_hat:.3f} > {self.rhat_threshold}")
                elif flag == "ess":
                    messages.append(f"{p.name}: ESS {p.ess:.0f} < {self.ess_threshold:.0f}")
                elif flag == "degenerate":
                    messages.append(f"{p.name}: chain is stuck")
                elif flag == "short":
                    messages.append(f"{p.name}: too few draws for R-hat or ESS")
        if self.mean_phi is not None and self.mean_phi.flagged:
            messages.append(
                f"mean(phi) posterior {self.mean_phi.mean:.3f} (sd {self.mean_phi.sd:.3f}) is away from 0"
            )
        return messages

    def to_text(self) -> str:
        lines = [
            f"chains: {self.n_chains}, draws per chain: {self.n_draws}"
            + (" (split R-hat)" if self.split else ""),
            f"{'parameter':<32}{'R-hat':>10}{'ESS':>12}  flags",
        ]
        for p in self.parameters:
            r_hat = f"{p.r_hat:.4f}" if p.r_hat is not None else "-"
            ess = f"{p.ess:.0f}" if p.ess is not None else "-"
            if p.ess_capped:
                ess += "*"
            lines.append(f"{p.name:<32}{r_hat:>10}{ess:>12}  {','.join(p.flags)}")
        if self.mean_phi is not None:
            lines.append(
                f"mean(phi): {self.mean_phi.mean:.4f} (sd {self.mean_phi.sd:.4f})"
                + ("  FLAGGED" if self.mean_phi.flagged else "")
            )
        if self.acceptance:
            rates = np.array(list(self.acceptance.values()))
            lines.append(
                f"acceptance: {len(rates)} coordinates, min {rates.min():.3f}, "
                f"median {np.median(rates):.3f}, max {rates.max():.3f}"
            )
        for message in self.warnings:
            lines.append(f"WARNING {message}")
        return "\n".join(lines)

    def to_json(self, path: Path) -> None:
        Path(path).write_text(
            json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8"
        )


def _mean_acceptance(traces: Sequence[Trace]) -> Dict[str, float]:
    names = sorted({name for t in traces for name in t.acceptance})
    return {
        name: float(np.mean([t.acceptance[name] for t in traces if name in t.acceptance]))
        for name in names
    }


def diagnose(traces: Sequence[Trace], split: bool = False, include_phi: bool = False) -> DiagnosticsReport:
    """
    R̂ and ESS of every traced parameter, acceptance rates and the mean(φ) monitor

    A parameter constant and equal across all chains (a held dispersion) is
    reported without diagnostics; a parameter constant within chains but not
    across them is flagged as degenerate. Chains too short for R̂ or ESS leave
    them unset and are flagged short.
    """
    if not traces:
        raise ValueError("no traces to diagnose")
    names = traces[0].names
    if any(t.names != names for t in traces):
        raise ValueError("traces disagree on parameter names")
    n_draws = min(len(t) for t in traces)

    parameters = []
    for name in names:
        if name == MEAN_PHI or (_is_random_effect(name) and not include_phi):
            continue
        chains = [t[name][:n_draws] for t in traces]
        entry = ParameterDiagnostics(name=name)
        pooled = np.concatenate(chains)
        if np.ptp(pooled) == 0.0:
            entry.flags.append("fixed")
            parameters.append(entry)
            continue
        rhat_draws = n_draws // 2 if split else n_draws
        if rhat_draws < MIN_RHAT_DRAWS or n_draws < MIN_ESS_DRAWS:
            entry.flags.append("short")
        try:
            if (len(chains) >= 2 or split) and rhat_draws >= MIN_RHAT_DRAWS:
                entry.r_hat = gelman_rubin(chains, split=split)
            if n_draws >= MIN_ESS_DRAWS:
                ess = pooled_effective_sample_size(chains)
                entry.ess, entry.ess_capped = ess.value, ess.capped
        except DegenerateChainError:
            entry.flags.append("degenerate")
            parameters.append(entry)
            continue
        if entry.r_hat is not None and entry.r_hat > RHAT_THRESHOLD:
            entry.flags.append("r_hat")
        if entry.ess is not None and entry.ess < ESS_THRESHOLD:
            entry.flags.append("ess")
        if entry.ess_capped:
            logger.warning(f"{name}: ESS exceeds the draw count, capped at {entry.ess:.0f}")
        parameters.append(entry)

    mean_phi = None
    if MEAN_PHI in names:
        pooled = np.concatenate([t[MEAN_PHI][:n_draws] for t in traces])
        mean, sd = float(np.mean(pooled)), float(np.std(pooled, ddof=1)) if pooled.size > 1 else 0.0
        mean_phi = MeanPhiMonitor(mean=mean, sd=sd, flagged=abs(mean) > 2.0 * sd)

    report = DiagnosticsReport(
        n_chains=len(traces),
        n_draws=n_draws,
        split=split,
        parameters=parameters,
        acceptance=_mean_acceptance(traces),
        mean_phi=mean_phi,
    )
    for message in report.warnings:
        logger.warning(message)
    return report
