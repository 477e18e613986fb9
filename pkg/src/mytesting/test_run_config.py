import json

import pytest

from crashtype_bayes.data_model import CrashType
from crashtype_bayes.exceptions import ConfigError
from crashtype_bayes.run_config import RunConfig, crash_types, load_run_config, parse_run_config


def test_no_file_gives_defaults():
    config = load_run_config()
    assert config == RunConfig()
    assert config.sampler.n_chains == 2
    assert config.sampler.n_iterations == 20000
    assert config.sampler.n_burnin == 2000
    assert config.predict.threshold == 5
    assert config.model.crash_type == CrashType.REAR_END
    assert config.model.priors.beta.variance == 1e5
    assert config.model.priors.r.shape == 1e-3


def test_empty_toml_gives_defaults(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("")
    assert load_run_config(path) == RunConfig()


def test_toml_tables(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(
        "\n".join(
            [
                "[model]",
                'crash_type = "sideswipe"',
                'covariates = ["friction", "speed_limit"]',
                "[model.priors.beta]",
                "variance = 100.0",
                "[sampler]",
                "n_chains = 3",
                "n_iterations = 500",
                "n_burnin = 100",
                "[columns]",
                'aadt_total = "AADT"',
                "[predict]",
                "threshold = 2",
            ]
        )
    )
    config = load_run_config(path)
    assert config.model.crash_type == CrashType.SIDESWIPE
    assert config.model.covariates == ("friction", "speed_limit")
    assert config.model.priors.beta.variance == 100.0
    assert config.sampler.n_chains == 3
    assert config.columns.column_for("aadt_total") == "AADT"
    assert config.predict.threshold == 2


@pytest.mark.parametrize(
    "text",
    [
        "[sampler]\nchains = 2\n",
        "[sampler]\nn_iterations = 100\nn_burnin = 200\n",
        "[model]\ncrash_type = \"head_on\"\n",
        "unknown_table = 1\n",
        "[sampler\n",
    ],
)
def test_invalid_config_is_a_config_error(tmp_path, text):
    path = tmp_path / "bad.toml"
    path.write_text(text)
    with pytest.raises(ConfigError) as err:
        load_run_config(path)
    assert err.value.exit_code == 2
    assert str(path) in str(err.value)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_run_config(tmp_path / "absent.toml")


def test_overrides_revalidate():
    config = RunConfig().with_overrides(seed=9, chains=4, iterations=300, burnin=100, crash_type="right_angle")
    assert config.sampler.seed == 9
    assert config.simulate.seed == 9
    assert config.sampler.n_chains == 4
    assert config.model.crash_type == CrashType.RIGHT_ANGLE
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(iterations=10, burnin=50)


def test_chain_override_drops_explicit_seeds():
    config = parse_run_config({"sampler": {"n_chains": 2, "chain_seeds": [3, 4]}})
    assert config.with_overrides(chains=3).sampler.resolved_seeds() != (3, 4)
    assert len(config.with_overrides(chains=3).sampler.resolved_seeds()) == 3


def test_manifest_config_reloads(tmp_path):
    config = RunConfig().with_overrides(seed=3, iterations=400, burnin=100)
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"command": "fit", "config": config.model_dump(mode="json")}))
    assert load_run_config(path) == config


def test_crash_type_selection():
    assert crash_types("all") == list(CrashType)
    assert crash_types("rear_end") == [CrashType.REAR_END]
    with pytest.raises(ConfigError, match="rear_end"):
        crash_types("head_on")
