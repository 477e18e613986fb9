import math

import numpy as np
import pytest

from crashtype_bayes.diagnostics import (
    DiagnosticsReport,
    autocorrelation,
    diagnose,
    effective_sample_size,
    gelman_rubin,
    pooled_effective_sample_size,
)
from crashtype_bayes.exceptions import DegenerateChainError
from crashtype_bayes.sampler import Trace


def _ar1(rng, n, rho):
    x = np.empty(n)
    x[0] = rng.normal()
    noise = rng.normal(scale=math.sqrt(1 - rho**2), size=n)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + noise[t]
    return x


def _trace(chain, columns, acceptance=None):
    names = tuple(columns)
    return Trace(
        names=names,
        samples=np.column_stack([columns[name] for name in names]),
        chain=chain,
        seed=chain,
        acceptance=acceptance or {},
    )


def test_identical_chains_give_classic_lower_value():
    assert gelman_rubin([[1, 2, 3, 4], [1, 2, 3, 4]]) == pytest.approx(math.sqrt(3 / 4), abs=1e-12)


def test_constant_chains_are_degenerate():
    with pytest.raises(DegenerateChainError):
        gelman_rubin([[2.0] * 5, [2.0] * 5])


@pytest.mark.parametrize("chains", [[[1, 2, 3, 4]], [[1, 2, 3, 4], [1, 2, 3]], [[1, 2, 3], [3, 2, 1]]])
def test_gelman_rubin_input_checks(chains):
    with pytest.raises(ValueError):
        gelman_rubin(chains)


def test_independent_chains_are_close_to_one(rng):
    chains = [rng.normal(size=5000) for _ in range(2)]
    assert 0.99 <= gelman_rubin(chains) <= 1.01


def test_separated_chains_are_flagged(rng):
    assert gelman_rubin([rng.normal(size=500), rng.normal(loc=5.0, size=500)]) > 1.1


def test_split_detects_drift_inside_chains():
    trend = np.linspace(0.0, 1.0, 200)
    assert gelman_rubin([trend, trend]) < 1.1
    assert gelman_rubin([trend, trend], split=True) > 1.1


def test_autocorrelation_lag_zero(rng):
    rho = autocorrelation(rng.normal(size=300))
    assert rho[0] == pytest.approx(1.0)
    assert rho.size == 300


def test_ess_of_independent_draws(rng):
    estimate = effective_sample_size(rng.normal(size=4000))
    assert 0.8 * 4000 <= estimate.value <= 4000


def test_ess_of_autoregressive_chain(rng):
    n, rho = 20000, 0.9
    expected = n * (1 - rho) / (1 + rho)
    assert effective_sample_size(_ar1(rng, n, rho)).value == pytest.approx(expected, rel=0.25)


def test_antithetic_trace_is_capped():
    estimate = effective_sample_size(np.tile([1.0, -1.0], 50))
    assert estimate.capped
    assert estimate.value == 100.0
    assert estimate.raw > 100.0


def test_ess_is_affine_invariant(rng):
    x = _ar1(rng, 2000, 0.5)
    assert effective_sample_size(3.0 * x + 2.0).value == pytest.approx(
        effective_sample_size(x).value, rel=1e-9
    )


def test_ess_input_checks():
    with pytest.raises(ValueError):
        effective_sample_size(np.arange(9.0))
    with pytest.raises(DegenerateChainError):
        effective_sample_size(np.ones(50))


def test_pooled_ess_sums_chains(rng):
    chains = [_ar1(rng, 3000, 0.7) for _ in range(3)]
    pooled = pooled_effective_sample_size(chains)
    assert pooled.value == pytest.approx(sum(effective_sample_size(c).value for c in chains))
    assert pooled.value <= 9000


def test_diagnose_flags(rng):
    n = 600
    traces = [
        _trace(
            chain,
            {
                "intercept": rng.normal(size=n),
                "slope": _ar1(rng, n, 0.98),
                "shifted": rng.normal(loc=4.0 * chain, size=n),
                "r": np.full(n, 1.5),
                "sigma2_phi": rng.gamma(2.0, size=n),
                "mean_phi": rng.normal(loc=3.0, scale=0.1, size=n),
                "phi[A]": rng.normal(size=n),
            },
            acceptance={"intercept": 0.4 + 0.02 * chain, "log_r": 0.5},
        )
        for chain in range(2)
    ]
    report = diagnose(traces)
    assert [p.name for p in report.parameters] == ["intercept", "slope", "shifted", "r", "sigma2_phi"]
    assert report.parameter("intercept").flags == []
    assert "ess" in report.parameter("slope").flags
    assert "r_hat" in report.parameter("shifted").flags
    assert report.parameter("r").flags == ["fixed"]
    assert report.parameter("r").r_hat is None
    assert report.mean_phi.flagged
    assert report.acceptance["intercept"] == pytest.approx(0.41)
    assert not report.converged
    assert any("shifted" in w for w in report.warnings)
    assert "phi[A]" in [p.name for p in diagnose(traces, include_phi=True).parameters]


def test_diagnose_stuck_chain_is_degenerate(rng):
    traces = [
        _trace(0, {"beta": np.full(50, 1.0)}),
        _trace(1, {"beta": np.full(50, 2.0)}),
    ]
    report = diagnose(traces)
    assert report.parameter("beta").flags == ["degenerate"]
    assert not report.converged


def test_report_text_and_json(tmp_path, rng):
    traces = [_trace(k, {"intercept": rng.normal(size=500)}, {"intercept": 0.45}) for k in range(2)]
    report = diagnose(traces)
    assert report.converged
    text = report.to_text()
    assert "intercept" in text
    assert "acceptance" in text
    path = tmp_path / "diagnostics.json"
    report.to_json(path)
    assert DiagnosticsReport.model_validate_json(path.read_text()) == report


def test_single_chain_reports_ess_only(rng):
    report = diagnose([_trace(0, {"intercept": rng.normal(size=500)})])
    assert report.parameter("intercept").r_hat is None
    assert report.parameter("intercept").ess is not None
    assert diagnose([_trace(0, {"intercept": rng.normal(size=500)})], split=True).parameter("intercept").r_hat


def test_rhat_is_invariant_under_a_common_affine_map(rng):
    chains = [_ar1(rng, 800, 0.6) + shift for shift in (0.0, 0.3)]
    moved = [-2.5 * chain + 7.0 for chain in chains]
    assert gelman_rubin(moved) == pytest.approx(gelman_rubin(chains), rel=1e-10)
    assert gelman_rubin(moved, split=True) == pytest.approx(gelman_rubin(chains, split=True), rel=1e-10)


@pytest.mark.parametrize("copied", [0, 1])
def test_duplicating_a_chain_does_not_raise_rhat(rng, copied):
    chains = [rng.normal(size=300), rng.normal(loc=0.4, scale=2.0, size=300)]
    assert gelman_rubin(chains + [chains[copied].copy()]) <= gelman_rubin(chains) + 1e-12


def test_short_chains_are_flagged_not_fatal(rng):
    draws = np.linspace(-1.0, 1.0, 8)
    traces = [_trace(k, {"intercept": draws[::1 - 2 * k], "r": np.full(8, 2.0)}) for k in range(2)]
    report = diagnose(traces)
    intercept = report.parameter("intercept")
    assert intercept.r_hat is not None
    assert intercept.ess is None
    assert intercept.flags == ["short"]
    assert report.parameter("r").flags == ["fixed"]
    assert report.converged
    assert any("too few draws" in w for w in report.warnings)

    tiny = diagnose([_trace(k, {"intercept": rng.normal(size=3)}) for k in range(2)], split=True)
    assert tiny.parameter("intercept").r_hat is None
    assert "short" in tiny.to_text()
