import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy import stats

from crashtype_bayes.data_model import CrashType
from crashtype_bayes.design import DesignMatrix, ModelSpec, build_design
from crashtype_bayes.exceptions import ChainError, DivergenceError
from crashtype_bayes.priors import InverseGammaPrior, PriorSpec
from crashtype_bayes.sampler import (
    Coordinate,
    MarkovChain,
    SamplerConfig,
    adapt_scales,
    gibbs_sigma2,
    inverse_gamma_posterior,
    mh_update_phi_block,
    mh_update_scalar,
    read_traces,
    run_chains,
    write_traces,
)

COUNTS_12 = [2, 0, 5, 1, 3, 7, 0, 2, 4, 1, 6, 3]


class FixedStepRng:
    """Stands in for a Generator: every proposal step and uniform draw is fixed"""

    def __init__(self, step: float, u: float):
        self.step = step
        self.u = u

    def normal(self, loc=0.0, scale=1.0, size=None):
        return loc + self.step

    def random(self, size=None):
        return self.u


def _intercept_design(y=COUNTS_12) -> DesignMatrix:
    return DesignMatrix.from_arrays(np.ones((len(y), 1)), y=y)


def test_sigma2_full_conditional_parameters():
    phi = np.full(4, math.sqrt(2.5))
    posterior = inverse_gamma_posterior(phi, InverseGammaPrior())
    assert posterior.shape == pytest.approx(2.001)
    assert posterior.scale == pytest.approx(5.001)


def test_sigma2_gibbs_draws_follow_inverse_gamma(rng):
    phi = np.full(4, math.sqrt(2.5))
    draws = np.array([gibbs_sigma2(phi, InverseGammaPrior(), rng) for _ in range(20000)])
    assert stats.kstest(draws, stats.invgamma(2.001, scale=5.001).cdf).pvalue > 1e-3
    assert np.median(draws) == pytest.approx(stats.invgamma.median(2.001, scale=5.001), rel=0.05)


def test_sigma2_without_groups_returns_prior():
    prior = InverseGammaPrior(shape=3.0, scale=2.0)
    assert inverse_gamma_posterior(np.array([]), prior) == prior


def test_trace_length_after_thinning(toy_dataset):
    dm = build_design(toy_dataset, ModelSpec(crash_type=CrashType.REAR_END, covariates=()))
    config = SamplerConfig(n_chains=1, n_iterations=150, n_burnin=50, thinning=2, n_workers=1)
    assert config.n_kept == 50
    traces = run_chains(dm, PriorSpec(), config)
    assert len(traces) == 1
    assert len(traces[0]) == 50
    assert traces[0].names == ("intercept", "log_exposure", "r", "sigma2_phi", "mean_phi")


def test_chains_are_reproducible(toy_dataset, short_sampler):
    dm = build_design(toy_dataset, ModelSpec(crash_type=CrashType.REAR_END, covariates=("friction",)))
    first = run_chains(dm, PriorSpec(), short_sampler)
    second = run_chains(dm, PriorSpec(), short_sampler)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(first[0].samples, first[1].samples)


def test_worker_count_does_not_change_draws(toy_dataset):
    dm = build_design(toy_dataset, ModelSpec(crash_type=CrashType.SIDESWIPE, covariates=()))
    serial = SamplerConfig(n_chains=2, n_iterations=60, n_burnin=20, seed=5, n_workers=1)
    parallel = serial.model_copy(update={"n_workers": 2})
    for a, b in zip(run_chains(dm, PriorSpec(), serial), run_chains(dm, PriorSpec(), parallel)):
        np.testing.assert_array_equal(a.samples, b.samples)


def test_store_phi_adds_named_columns(toy_dataset):
    dm = build_design(toy_dataset, ModelSpec(crash_type=CrashType.REAR_END, covariates=()))
    config = SamplerConfig(n_chains=1, n_iterations=40, n_burnin=10, store_phi=True, n_workers=1)
    trace = run_chains(dm, PriorSpec(), config)[0]
    assert trace.names[-3:] == ("phi[A]", "phi[B]", "phi[C]")
    np.testing.assert_allclose(
        trace["mean_phi"], trace.samples[:, -3:].mean(axis=1), rtol=1e-12, atol=1e-15
    )
    assert np.all(trace["sigma2_phi"] > 0)
    assert np.all(trace["r"] > 0)


def test_intercept_posterior_matches_quadrature():
    y = np.array(COUNTS_12)
    dm = _intercept_design(y)
    config = SamplerConfig(
        n_chains=1,
        n_iterations=32000,
        n_burnin=2000,
        seed=3,
        fixed_r=1.0,
        random_effects=False,
        n_workers=1,
    )
    trace = run_chains(dm, PriorSpec(), config)[0]
    assert trace.names == ("intercept", "r")
    np.testing.assert_array_equal(trace["r"], 1.0)

    grid = np.linspace(-2.0, 4.0, 4001)
    log_density = np.array(
        [np.sum(stats.nbinom.logpmf(y, 1.0, 1.0 / (1.0 + math.exp(b)))) for b in grid]
    ) + stats.norm.logpdf(grid, 0.0, math.sqrt(1e5))
    weights = np.exp(log_density - log_density.max())
    weights /= weights.sum()
    mean = float(np.sum(weights * grid))
    sd = math.sqrt(float(np.sum(weights * (grid - mean) ** 2)))

    draws = trace["intercept"]
    assert abs(draws.mean() - mean) < 0.02
    assert draws.std(ddof=1) == pytest.approx(sd, rel=0.10)


def test_improving_move_is_always_accepted():
    dm = _intercept_design()
    config = SamplerConfig(n_chains=1, n_iterations=10, n_burnin=0, fixed_r=1.0, random_effects=False)
    chain = MarkovChain(dm, PriorSpec(), config)
    state = chain.initial_state()
    start = state.params.beta[0]
    toward_mean = math.log(np.mean(COUNTS_12)) - start

    mh_update_scalar(Coordinate("beta", 0), state, dm, PriorSpec(), rng=FixedStepRng(toward_mean, 0.999999))
    assert state.accepted[0] == 1
    assert state.params.beta[0] == pytest.approx(start + toward_mean)

    mh_update_scalar(Coordinate("beta", 0), state, dm, PriorSpec(), rng=FixedStepRng(5.0, 0.999999))
    assert state.accepted[0] == 1
    assert state.proposed[0] == 2
    assert state.params.beta[0] == pytest.approx(start + toward_mean)


def test_cached_likelihood_follows_accepted_moves(toy_dataset):
    from crashtype_bayes.model_core import log_likelihood

    dm = build_design(toy_dataset, ModelSpec(crash_type=CrashType.REAR_END, covariates=("friction",)))
    config = SamplerConfig(n_chains=1, n_iterations=10, n_burnin=0)
    chain = MarkovChain(dm, PriorSpec(), config)
    state = chain.initial_state()
    for _ in range(20):
        chain.sweep(state)
    assert state.log_likelihood() == pytest.approx(log_likelihood(dm, state.params), rel=1e-10)


def test_adaptation_moves_scales_toward_target():
    dm = DesignMatrix.from_arrays(np.ones((4, 1)), y=[1, 0, 2, 1], group=[0, 0, 1, 1])
    config = SamplerConfig(n_chains=1, n_iterations=10, n_burnin=5)
    state = MarkovChain(dm, PriorSpec(), config).initial_state()
    before = state.proposal_sd.copy()
    state.window_proposed[:] = 100
    state.window_accepted[:] = [80, 44, 10, 44]

    adapt_scales(state, target=0.44)
    np.testing.assert_allclose(
        state.proposal_sd / before, [math.exp(0.1), 1.0, math.exp(-0.1), 1.0], rtol=1e-12
    )
    assert state.windows == 1
    assert not state.window_proposed.any()

    state.window_proposed[:] = 100
    state.window_accepted[:] = 80
    scaled = state.proposal_sd.copy()
    adapt_scales(state)
    np.testing.assert_allclose(state.proposal_sd / scaled, math.exp(0.1 / math.sqrt(2)), rtol=1e-12)


def test_counters_reset_after_burnin(toy_dataset):
    dm = build_design(toy_dataset, ModelSpec(crash_type=CrashType.REAR_END, covariates=()))
    config = SamplerConfig(n_chains=1, n_iterations=30, n_burnin=20, n_workers=1)
    trace = run_chains(dm, PriorSpec(), config)[0]
    # every rate is measured over the 10 post-burn-in sweeps only
    for rate in trace.acceptance.values():
        assert round(rate * 10, 9) == int(round(rate * 10, 9))


def test_overflowing_proposal_raises_divergence():
    dm = DesignMatrix.from_arrays([[1.0, 0.0], [1.0, 1000.0]], y=[0, 3])
    config = SamplerConfig(n_chains=1, n_iterations=10, n_burnin=0, random_effects=False)
    state = MarkovChain(dm, PriorSpec(), config).initial_state()
    with pytest.raises(DivergenceError) as err:
        mh_update_scalar(Coordinate("beta", 1), state, dm, PriorSpec(), rng=FixedStepRng(2.0, 0.5))
    assert "beta" in err.value.state


def test_non_finite_state_raises_chain_error():
    dm = _intercept_design()
    config = SamplerConfig(n_chains=1, n_iterations=10, n_burnin=0)
    state = MarkovChain(dm, PriorSpec(), config).initial_state()
    state.row_log_lik[0] = np.nan
    with pytest.raises(ChainError):
        mh_update_scalar(Coordinate("log_r"), state, dm, PriorSpec())


def test_seeds_are_distinct_and_stable():
    config = SamplerConfig(n_chains=4, seed=17)
    seeds = config.resolved_seeds()
    assert len(set(seeds)) == 4
    assert seeds == SamplerConfig(n_chains=4, seed=17).resolved_seeds()
    assert SamplerConfig(n_chains=2, chain_seeds=(5, 9)).resolved_seeds() == (5, 9)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"n_iterations": 100, "n_burnin": 100},
        {"n_chains": 2, "chain_seeds": (1, 1)},
        {"n_chains": 3, "chain_seeds": (1, 2)},
        {"thinning": 0},
        {"unknown": 1},
    ],
)
def test_invalid_sampler_config(kwargs):
    with pytest.raises(ValidationError):
        SamplerConfig(**kwargs)


def test_traces_survive_a_round_trip(tmp_path, toy_dataset, short_sampler):
    dm = build_design(toy_dataset, ModelSpec(crash_type=CrashType.REAR_END, covariates=()))
    traces = run_chains(dm, PriorSpec(), short_sampler)
    paths = write_traces(traces, tmp_path / "traces", short_sampler)
    assert [p.name for p in paths] == ["chain_0.csv", "chain_1.csv"]
    reloaded = read_traces(tmp_path / "traces")
    for original, loaded in zip(traces, reloaded):
        assert loaded.names == original.names
        assert loaded.seed == original.seed
        np.testing.assert_array_equal(loaded.samples, original.samples)
        assert loaded.acceptance == original.acceptance


def test_missing_trace_index(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_traces(tmp_path)


def _quadrature(grid: np.ndarray, log_density: np.ndarray) -> np.ndarray:
    weights = np.exp(log_density - log_density.max())
    return weights / weights.sum()


def _grid_quantiles(grid: np.ndarray, weights: np.ndarray, levels) -> np.ndarray:
    return np.interp(levels, np.cumsum(weights), grid)


@pytest.fixture(scope="module")
def frozen_intercept_chain():
    """Intercept draws under a never-adapted proposal, with the exact posterior on a grid"""
    dm = _intercept_design()
    config = SamplerConfig(n_chains=1, n_iterations=10, n_burnin=0, fixed_r=1.0, random_effects=False)
    state = MarkovChain(dm, PriorSpec(), config).initial_state()
    rng = np.random.default_rng(2718)
    coord = Coordinate("beta", 0)
    for _ in range(1000):
        mh_update_scalar(coord, state, dm, PriorSpec(), rng=rng)
    draws = np.empty(200000)
    for t in range(draws.size):
        mh_update_scalar(coord, state, dm, PriorSpec(), rng=rng)
        draws[t] = state.params.beta[0]

    y = np.array(COUNTS_12)
    grid = np.linspace(-2.0, 4.0, 4001)
    log_density = np.array(
        [np.sum(stats.nbinom.logpmf(y, 1.0, 1.0 / (1.0 + math.exp(b)))) for b in grid]
    ) + stats.norm.logpdf(grid, 0.0, math.sqrt(1e5))
    return draws, grid, _quadrature(grid, log_density)


def test_two_halves_of_the_posterior_are_visited_equally(frozen_intercept_chain):
    draws, grid, weights = frozen_intercept_chain
    median = _grid_quantiles(grid, weights, [0.5])[0]
    below = float(np.mean(draws < median))
    # total variation distance between two-point laws
    assert abs(below - 0.5) < 0.01


def test_transitions_between_three_states_are_balanced(frozen_intercept_chain):
    draws, grid, weights = frozen_intercept_chain
    cuts = _grid_quantiles(grid, weights, [1 / 3, 2 / 3])
    states = np.digitize(draws, cuts)
    np.testing.assert_allclose(np.bincount(states, minlength=3) / states.size, 1 / 3, atol=0.02)

    flows = np.zeros((3, 3))
    np.add.at(flows, (states[:-1], states[1:]), 1)
    for x, y in ((0, 1), (0, 2), (1, 2)):
        assert abs(flows[x, y] - flows[y, x]) <= 4.0 * math.sqrt(flows[x, y] + flows[y, x]) + 1.0


def test_tiny_proposals_are_almost_always_accepted():
    dm = _intercept_design()
    config = SamplerConfig(n_chains=1, n_iterations=10, n_burnin=0, fixed_r=1.0, random_effects=False)
    state = MarkovChain(dm, PriorSpec(), config).initial_state()
    state.proposal_sd[0] = 1e-9
    start = state.params.beta[0]
    rng = np.random.default_rng(4)
    for _ in range(2000):
        mh_update_scalar(Coordinate("beta", 0), state, dm, PriorSpec(), rng=rng)
    assert state.acceptance_rates()[0] > 0.99
    assert state.params.beta[0] == pytest.approx(start, abs=1e-6)


def test_scalar_and_block_random_effect_updates_share_the_target():
    dm = DesignMatrix.from_arrays(np.ones((5, 1)), y=[4, 2, 0, 1, 0], group=[0, 0, 1, 1, 1])
    config = SamplerConfig(n_chains=1, n_iterations=10, n_burnin=0)
    chain = MarkovChain(dm, PriorSpec(), config)
    scalar_state, block_state = chain.initial_state(), chain.initial_state()
    params = scalar_state.params

    n_sweeps = 30000
    scalar_draws, block_draws = np.empty((n_sweeps, 2)), np.empty((n_sweeps, 2))
    scalar_rng, block_rng = np.random.default_rng(8), np.random.default_rng(9)
    for t in range(n_sweeps):
        for i in range(2):
            mh_update_scalar(Coordinate("phi", i), scalar_state, dm, PriorSpec(), rng=scalar_rng)
        mh_update_phi_block(block_state, dm, PriorSpec(), rng=block_rng)
        scalar_draws[t] = scalar_state.params.phi
        block_draws[t] = block_state.params.phi
    np.testing.assert_array_equal(scalar_state.proposed[1:3], n_sweeps)

    grid = np.linspace(-2.0, 2.0, 4001)
    for i, rows in enumerate((slice(0, 2), slice(2, 5))):
        y = dm.y[rows]
        theta = np.exp(params.beta[0] + grid)
        log_density = np.array(
            [np.sum(stats.nbinom.logpmf(y, params.r, params.r / (params.r + t))) for t in theta]
        ) + stats.norm.logpdf(grid, 0.0, math.sqrt(params.sigma2_phi))
        weights = _quadrature(grid, log_density)
        mean = float(np.sum(weights * grid))
        sd = math.sqrt(float(np.sum(weights * (grid - mean) ** 2)))
        for draws in (scalar_draws[1000:, i], block_draws[1000:, i]):
            assert abs(draws.mean() - mean) < 0.1 * sd
            assert draws.std(ddof=1) == pytest.approx(sd, rel=0.05)
