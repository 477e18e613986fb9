"""Metropolis-within-Gibbs MCMC for the random-effect negative binomial model.

Each sweep updates every β_k by random-walk Metropolis (random scan), the φ
block in ascending intersection order, log r by random-walk Metropolis and
σ_φ² by its conjugate Inverse-Gamma full conditional. Proposal scales adapt
during burn-in only.
"""

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Annotated, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, PositiveFloat, model_validator

from crashtype_bayes.design import LOG_EXPOSURE, DesignMatrix
from crashtype_bayes.exceptions import ChainError, CrashModelError
from crashtype_bayes.model_core import Parameters, check_linear_predictor, log_r_prior
from crashtype_bayes.negbin import nb_log_pmf_array
from crashtype_bayes.priors import InverseGammaPrior, PriorSpec

logger = logging.getLogger(__name__)

TRACE_INDEX_FILE = "traces.json"


class SamplerConfig(BaseModel):
    """MCMC run protocol (defaults: 2 chains x 20000 iterations, 2000 burn-in)

    Attributes:
        n_chains: number of independent chains
        n_iterations: sweeps per chain, burn-in included
        n_burnin: leading sweeps discarded; proposal scales adapt only here
        thinning: keep every thinning-th post-burn-in sweep
        adaptation_window: sweeps between proposal-scale adjustments
        target_acceptance: acceptance rate the scalar updates are steered to
        seed: master seed, chain seeds are derived from it
        chain_seeds: explicit per-chain seeds, overriding seed
        store_phi: keep the φ draws in the traces (needed for in-sample prediction)
        random_effects: False fits the fixed-effects model (φ ≡ 0, no σ_φ²)
        fixed_r: hold the dispersion at this value instead of sampling it
        center_internal: move slopes along mean-centered directions
        n_workers: worker processes, None for one per chain
    """

    n_chains: Annotated[int, Field(default=2, ge=1, description="Number of chains")]
    n_iterations: Annotated[int, Field(default=20000, gt=0, description="Iterations per chain")]
    n_burnin: Annotated[int, Field(default=2000, ge=0, description="Discarded iterations")]
    thinning: Annotated[int, Field(default=1, ge=1, description="Keep every k-th draw")]
    adaptation_window: Annotated[int, Field(default=50, ge=1, description="Adaptation window")]
    target_acceptance: Annotated[float, Field(default=0.44, gt=0, lt=1)]
    seed: Annotated[int, Field(default=1, ge=0, description="Master seed")]
    chain_seeds: Optional[Tuple[int, ...]] = None
    store_phi: bool = False
    random_effects: bool = True
    fixed_r: Optional[PositiveFloat] = None
    center_internal: bool = True
    n_workers: Annotated[Optional[int], Field(default=None, ge=1)]

    model_config = {"frozen": True, "extra": "forbid"}

    @model_validator(mode="after")
    def validate_protocol(self):
        if self.n_burnin >= self.n_iterations:
            raise ValueError(
                f"n_burnin ({self.n_burnin}) must be smaller than n_iterations ({self.n_iterations})"
            )
        if self.chain_seeds is not None:
            if len(self.chain_seeds) != self.n_chains:
                raise ValueError(f"{len(self.chain_seeds)} chain seeds for {self.n_chains} chains")
            if len(set(self.chain_seeds)) != len(self.chain_seeds):
                raise ValueError("chain seeds must be distinct")
        return self

    def resolved_seeds(self) -> Tuple[int, ...]:
        """Per-chain seeds, derived from the master seed unless given explicitly"""
        if self.chain_seeds is not None:
            return tuple(self.chain_seeds)
        children = np.random.SeedSequence(self.seed).spawn(self.n_chains)
        seeds = tuple(int(child.generate_state(1)[0]) for child in children)
        if len(set(seeds)) != len(seeds):
            raise ChainError(f"seed {self.seed} derives colliding chain seeds, choose another")
        return seeds

    @property
    def n_kept(self) -> int:
        return math.ceil((self.n_iterations - self.n_burnin) / self.thinning)


class Coordinate(NamedTuple):
    """A scalar coordinate updated by random-walk Metropolis: ("beta", k), ("phi", i) or ("log_r", 0)"""

    kind: str
    index: int = 0


@dataclass
class ChainState:
    """Mutable state of one chain

    Proposal scales and acceptance counters are flat arrays over the
    coordinates β_0..β_{p-1}, φ_0..φ_{I-1}, log r.
    """

    params: Parameters
    offsets: np.ndarray
    proposal_sd: np.ndarray
    rng: np.random.Generator
    eta: np.ndarray
    row_log_lik: np.ndarray
    group_rows: List[np.ndarray]
    accepted: np.ndarray = field(default=None)
    proposed: np.ndarray = field(default=None)
    window_accepted: np.ndarray = field(default=None)
    window_proposed: np.ndarray = field(default=None)
    iteration: int = 0
    windows: int = 0

    def __post_init__(self):
        n = self.proposal_sd.size
        for name in ("accepted", "proposed", "window_accepted", "window_proposed"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(n, dtype=np.int64))

    @property
    def n_beta(self) -> int:
        return self.params.beta.size

    @property
    def n_phi(self) -> int:
        return self.params.phi.size

    def slot(self, coord: Coordinate) -> int:
        if coord.kind == "beta":
            return coord.index
        if coord.kind == "phi":
            return self.n_beta + coord.index
        if coord.kind == "log_r":
            return self.n_beta + self.n_phi
        raise ValueError(f"unknown coordinate kind {coord.kind!r}")

    def log_likelihood(self) -> float:
        return float(np.sum(self.row_log_lik))

    def acceptance_rates(self) -> np.ndarray:
        return self.accepted / np.maximum(self.proposed, 1)

    def reset_counters(self) -> None:
        for counter in (self.accepted, self.proposed, self.window_accepted, self.window_proposed):
            counter[:] = 0

    def report(self) -> dict:
        report = self.params.report()
        report["iteration"] = self.iteration
        return report


def inverse_gamma_posterior(phi: np.ndarray, prior: InverseGammaPrior) -> InverseGammaPrior:
    """Full conditional of σ_φ²: Inverse-Gamma(a + I/2, b + Σφ²/2)"""
    phi = np.asarray(phi, dtype=float)
    if phi.size == 0:
        return prior
    return InverseGammaPrior(
        shape=prior.shape + 0.5 * phi.size,
        scale=prior.scale + 0.5 * float(np.sum(phi**2)),
    )


def gibbs_sigma2(phi: np.ndarray, prior: InverseGammaPrior, rng: np.random.Generator) -> float:
    """Draw σ_φ² from its conjugate full conditional"""
    return inverse_gamma_posterior(phi, prior).sample(rng)


def _accept(delta: float, rng: np.random.Generator) -> bool:
    u = rng.random()
    return delta >= 0 or (u > 0 and math.log(u) < delta)


def mh_update_scalar(
    coord: Coordinate,
    state: ChainState,
    dm: DesignMatrix,
    priors: PriorSpec,
    rng: Optional[np.random.Generator] = None,
) -> ChainState:
    """
    One random-walk Metropolis update of a single coordinate

    β_k moves along its (optionally mean-centered) column, φ_i touches only the
    rows of intersection i, log r moves on the log scale with the Jacobian in
    its prior. The move is accepted with probability min(1, exp(Δ log posterior)).

    Raises:
        ChainError: the log posterior at the current state is not finite
        DivergenceError: the proposal overflows the linear predictor
    """
    rng = rng if rng is not None else state.rng
    current = state.log_likelihood()
    if not math.isfinite(current):
        raise ChainError(f"non-finite log posterior at iteration {state.iteration}: {state.report()}")

    slot = state.slot(coord)
    step = rng.normal(0.0, state.proposal_sd[slot])
    params = state.params

    if coord.kind == "beta":
        k = coord.index
        direction = dm.X[:, k] - state.offsets[k]
        new_eta = state.eta + step * direction
        check_linear_predictor(new_eta, state.report())
        new_rows = nb_log_pmf_array(dm.y, np.exp(new_eta), params.r)
        new_beta = params.beta.copy()
        new_beta[k] += step
        if k > 0:
            new_beta[0] -= state.offsets[k] * step
        delta = (
            float(np.sum(new_rows)) - current
            + float(np.sum(priors.beta.logpdf(new_beta)))
            - float(np.sum(priors.beta.logpdf(params.beta)))
        )
        if _accept(delta, rng):
            params.beta = new_beta
            state.eta = new_eta
            state.row_log_lik = new_rows
            state.accepted[slot] += 1
            state.window_accepted[slot] += 1

    elif coord.kind == "phi":
        i = coord.index
        rows = state.group_rows[i]
        new_eta_rows = state.eta[rows] + step
        check_linear_predictor(new_eta_rows, state.report())
        new_rows = nb_log_pmf_array(dm.y[rows], np.exp(new_eta_rows), params.r)
        new_phi = params.phi[i] + step
        delta = (
            float(np.sum(new_rows - state.row_log_lik[rows]))
            - 0.5 * (new_phi**2 - params.phi[i] ** 2) / params.sigma2_phi
        )
        if _accept(delta, rng):
            params.phi[i] = new_phi
            state.eta[rows] = new_eta_rows
            state.row_log_lik[rows] = new_rows
            state.accepted[slot] += 1
            state.window_accepted[slot] += 1

    elif coord.kind == "log_r":
        log_r = math.log(params.r)
        new_log_r = log_r + step
        new_r = math.exp(new_log_r)
        new_rows = nb_log_pmf_array(dm.y, np.exp(state.eta), new_r)
        delta = (
            float(np.sum(new_rows)) - current
            + log_r_prior(new_log_r, priors.r)
            - log_r_prior(log_r, priors.r)
        )
        if _accept(delta, rng):
            params.r = new_r
            state.row_log_lik = new_rows
            state.accepted[slot] += 1
            state.window_accepted[slot] += 1
    else:
        raise ValueError(f"unknown coordinate kind {coord.kind!r}")

    state.proposed[slot] += 1
    state.window_proposed[slot] += 1
    return state


def mh_update_phi_block(
    state: ChainState,
    dm: DesignMatrix,
    priors: PriorSpec,
    rng: Optional[np.random.Generator] = None,
) -> ChainState:
    """
    Random-walk update of every φ_i, in ascending i

    The φ_i are conditionally independent given β, r and σ_φ², so drawing all
    proposals and acceptances at once has the law of I sequential scalar updates.
    """
    rng = rng if rng is not None else state.rng
    n_phi = state.n_phi
    if n_phi == 0:
        return state
    if not math.isfinite(state.log_likelihood()):
        raise ChainError(f"non-finite log posterior at iteration {state.iteration}: {state.report()}")

    params = state.params
    slots = state.n_beta + np.arange(n_phi)
    steps = rng.normal(0.0, state.proposal_sd[slots])
    new_phi = params.phi + steps
    new_eta = state.eta + steps[dm.group]
    check_linear_predictor(new_eta, state.report())
    new_rows = nb_log_pmf_array(dm.y, np.exp(new_eta), params.r)
    delta = np.bincount(dm.group, weights=new_rows - state.row_log_lik, minlength=n_phi)
    delta -= 0.5 * (new_phi**2 - params.phi**2) / params.sigma2_phi
    u = rng.random(n_phi)
    with np.errstate(divide="ignore"):
        accept = (delta >= 0) | (np.log(u) < delta)

    params.phi = np.where(accept, new_phi, params.phi)
    moved = accept[dm.group]
    state.eta = np.where(moved, new_eta, state.eta)
    state.row_log_lik = np.where(moved, new_rows, state.row_log_lik)
    state.accepted[slots] += accept
    state.window_accepted[slots] += accept
    state.proposed[slots] += 1
    state.window_proposed[slots] += 1
    return state


def adapt_scales(state: ChainState, target: float = 0.44) -> ChainState:
    """
    Steer every proposal sd toward the target acceptance rate

    After the k-th completed window each sd is multiplied by exp(+δ) when its
    window acceptance exceeds the target and by exp(−δ) when it falls short,
    δ = 0.1 / sqrt(k). Counters of the window are reset.
    """
    state.windows += 1
    delta = 0.1 / math.sqrt(state.windows)
    active = state.window_proposed > 0
    rate = np.where(active, state.window_accepted / np.maximum(state.window_proposed, 1), target)
    factor = np.where(rate > target, math.exp(delta), np.where(rate < target, math.exp(-delta), 1.0))
    state.proposal_sd = state.proposal_sd * factor
    state.window_accepted[:] = 0
    state.window_proposed[:] = 0
    return state


@dataclass(frozen=True)
class Trace:
    """Post-burn-in, thinned draws of one chain; one column per parameter"""

    names: Tuple[str, ...]
    samples: np.ndarray
    chain: int = 0
    seed: Optional[int] = None
    acceptance: Dict[str, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.samples.shape[0]

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.samples[:, self.names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def has(self, name: str) -> bool:
        return name in self.names

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.samples, columns=list(self.names))


def phi_name(intersection_id: str) -> str:
    return f"phi[{intersection_id}]"


class MarkovChain:
    """
    One chain of the Metropolis-within-Gibbs sampler, owning its random stream
    """

    def __init__(
        self,
        dm: DesignMatrix,
        priors: PriorSpec,
        config: SamplerConfig,
        chain: int = 0,
        seed: int = 0,
    ):
        self._dm = dm
        self._priors = priors
        self._config = config
        self._chain = chain
        self._seed = seed
        self._logger = logging.getLogger(self.__class__.__name__)

    @property
    def config(self) -> SamplerConfig:
        return self._config

    def parameter_names(self) -> Tuple[str, ...]:
        names = list(self._dm.column_names) + ["r"]
        if self._config.random_effects:
            names += ["sigma2_phi", "mean_phi"]
            if self._config.store_phi:
                names += [phi_name(gid) for gid in self._dm.group_ids]
        return tuple(names)

    def initial_state(self) -> ChainState:
        """
        β_0 = ln(ȳ + 0.5) − 0.5·mean(log exposure), β_exposure = 0.5, other β = 0,
        φ = 0, r = 1 (or the fixed value), σ_φ² = 0.1
        """
        dm, config = self._dm, self._config
        n_rows, n_beta, n_phi = dm.n_rows, dm.n_columns, dm.n_groups
        y_bar = float(np.mean(dm.y)) if n_rows else 0.0

        beta = np.zeros(n_beta)
        beta[0] = math.log(y_bar + 0.5)
        if LOG_EXPOSURE in dm.column_names:
            k = dm.column_names.index(LOG_EXPOSURE)
            beta[k] = 0.5
            beta[0] -= 0.5 * float(np.mean(dm.X[:, k]))
        r = config.fixed_r if config.fixed_r is not None else 1.0
        params = Parameters(beta=beta, phi=np.zeros(n_phi), r=r, sigma2_phi=0.1)

        offsets = np.zeros(n_beta)
        if config.center_internal and n_rows:
            offsets[1:] = dm.X[:, 1:].mean(axis=0)

        # scales from a diagonal Fisher approximation at the initial mean
        theta0 = y_bar + 0.5
        weight = theta0 / (1.0 + theta0 / r)
        directions = dm.X - offsets
        beta_sd = 2.4 / np.sqrt(weight * np.sum(directions**2, axis=0) + 1e-12)
        group_sizes = np.bincount(dm.group, minlength=n_phi)
        phi_sd = 2.4 / np.sqrt(weight * group_sizes + 1.0 / params.sigma2_phi)
        log_r_sd = 2.4 / math.sqrt(0.5 * max(n_rows, 1))
        proposal_sd = np.clip(np.concatenate([beta_sd, phi_sd, [log_r_sd]]), 1e-4, 1.0)

        eta = dm.X @ beta
        check_linear_predictor(eta, params.report())
        row_log_lik = nb_log_pmf_array(dm.y, np.exp(eta), r)
        order = np.argsort(dm.group, kind="stable")
        bounds = np.cumsum(group_sizes)[:-1] if n_phi else []
        group_rows = np.split(order, bounds) if n_phi else []

        return ChainState(
            params=params,
            offsets=offsets,
            proposal_sd=proposal_sd,
            rng=np.random.default_rng(self._seed),
            eta=eta,
            row_log_lik=row_log_lik,
            group_rows=group_rows,
        )

    def sweep(self, state: ChainState) -> ChainState:
        """One full Gibbs sweep: β (random scan), φ block, log r, σ_φ²"""
        dm, priors, config = self._dm, self._priors, self._config
        for k in state.rng.permutation(state.n_beta):
            mh_update_scalar(Coordinate("beta", int(k)), state, dm, priors)
        if config.random_effects:
            mh_update_phi_block(state, dm, priors)
        if config.fixed_r is None:
            mh_update_scalar(Coordinate("log_r"), state, dm, priors)
        if config.random_effects:
            state.params.sigma2_phi = gibbs_sigma2(state.params.phi, priors.sigma2_phi, state.rng)
        state.iteration += 1
        return state

    def _draw(self, state: ChainState) -> np.ndarray:
        params = state.params
        values = [params.beta, [params.r]]
        if self._config.random_effects:
            mean_phi = float(np.mean(params.phi)) if params.phi.size else 0.0
            values.append([params.sigma2_phi, mean_phi])
            if self._config.store_phi:
                values.append(params.phi)
        return np.concatenate([np.asarray(v, dtype=float) for v in values])

    def _acceptance(self, state: ChainState) -> Dict[str, float]:
        rates = state.acceptance_rates()
        names = list(self._dm.column_names)
        if self._config.random_effects:
            names += [phi_name(gid) for gid in self._dm.group_ids]
        else:
            rates = np.concatenate([rates[: state.n_beta], rates[-1:]])
        if self._config.fixed_r is None:
            names.append("log_r")
        return {name: float(rate) for name, rate in zip(names, rates)}

    def run(self) -> Trace:
        """
        Run burn-in with adaptation, then the frozen kernel, and collect the kept draws

        Raises:
            DivergenceError: the linear predictor overflowed; the error carries the state
            ChainError: the state became non-finite
        """
        config = self._config
        state = self.initial_state()
        names = self.parameter_names()
        samples = np.empty((config.n_kept, len(names)))
        self._logger.info(
            f"chain {self._chain}: seed {self._seed}, {config.n_iterations} iterations, "
            f"{config.n_burnin} burn-in, {self._dm.n_rows} rows, {self._dm.n_groups} groups"
        )
        kept = 0
        try:
            for t in range(config.n_iterations):
                self.sweep(state)
                if t < config.n_burnin:
                    if (t + 1) % config.adaptation_window == 0:
                        adapt_scales(state, config.target_acceptance)
                        self._logger.debug(
                            f"chain {self._chain}: window {state.windows}, "
                            f"median sd {np.median(state.proposal_sd):.4g}"
                        )
                    if t + 1 == config.n_burnin:
                        state.reset_counters()
                    continue
                if (t - config.n_burnin) % config.thinning == 0:
                    samples[kept] = self._draw(state)
                    kept += 1
        except CrashModelError as err:
            self._logger.error(f"chain {self._chain} aborted at iteration {state.iteration}: {err}")
            raise

        acceptance = self._acceptance(state)
        self._logger.info(
            f"chain {self._chain}: done, mean acceptance "
            f"{np.mean(list(acceptance.values())) if acceptance else float('nan'):.3f}"
        )
        return Trace(
            names=names,
            samples=samples[:kept],
            chain=self._chain,
            seed=self._seed,
            acceptance=acceptance,
        )


def run_chain(dm: DesignMatrix, priors: PriorSpec, cfg: SamplerConfig, chain: int, seed: int) -> Trace:
    return MarkovChain(dm, priors, cfg, chain=chain, seed=seed).run()


def run_chains(dm: DesignMatrix, priors: PriorSpec, cfg: SamplerConfig) -> List[Trace]:
    """
    Run cfg.n_chains independent chains, each on its own seed and random stream

    Chains run in worker processes when more than one worker is available; the
    result does not depend on the number of workers.
    """
    seeds = cfg.resolved_seeds()
    workers = cfg.n_workers or min(cfg.n_chains, os.cpu_count() or 1)
    if workers <= 1 or cfg.n_chains == 1:
        return [run_chain(dm, priors, cfg, chain, seed) for chain, seed in enumerate(seeds)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(run_chain, dm, priors, cfg, chain, seed) for chain, seed in enumerate(seeds)
        ]
        return [future.result() for future in futures]


def write_traces(traces: Sequence[Trace], out_dir: Path, config: Optional[SamplerConfig] = None) -> List[Path]:
    """Write one CSV per chain plus an index of seeds, settings and acceptance rates"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    entries = []
    for trace in traces:
        path = out_dir / f"chain_{trace.chain}.csv"
        trace.to_frame().to_csv(path, index=False, lineterminator="\n")
        paths.append(path)
        entries.append(
            {
                "chain": trace.chain,
                "seed": trace.seed,
                "file": path.name,
                "n_draws": len(trace),
                "acceptance": trace.acceptance,
            }
        )
    index = {"sampler": config.model_dump() if config else None, "chains": entries}
    (out_dir / TRACE_INDEX_FILE).write_text(json.dumps(index, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"wrote {len(traces)} trace file(s) to {out_dir}")
    return paths


def read_traces(out_dir: Path) -> List[Trace]:
    """Read the traces written by write_traces"""
    out_dir = Path(out_dir)
    index_path = out_dir / TRACE_INDEX_FILE
    if not index_path.is_file():
        raise FileNotFoundError(f"trace index not found: {index_path}")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    traces = []
    for entry in index["chains"]:
        frame = pd.read_csv(out_dir / entry["file"], float_precision="round_trip")
        traces.append(
            Trace(
                names=tuple(frame.columns),
                samples=frame.to_numpy(dtype=float),
                chain=entry["chain"],
                seed=entry["seed"],
                acceptance=entry.get("acceptance", {}),
            )
        )
    return traces
