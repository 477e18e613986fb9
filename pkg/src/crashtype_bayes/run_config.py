"""Run configuration: one TOML file (or a previous run manifest) per run."""

import json
import logging
import tomllib
from pathlib import Path
from typing import Annotated, Any, Dict, Optional

from pydantic import BaseModel, Field, NonNegativeInt, ValidationError, field_validator

from crashtype_bayes.data_model import CrashType, SchemaMap
from crashtype_bayes.design import ModelSpec
from crashtype_bayes.exceptions import ConfigError
from crashtype_bayes.sampler import SamplerConfig
from crashtype_bayes.simulate_predict import DEFAULT_THRESHOLD, GeneratorSpec

logger = logging.getLogger(__name__)


class PredictSettings(BaseModel):
    """Posterior prediction and hotspot screening settings"""

    threshold: Annotated[NonNegativeInt, Field(default=DEFAULT_THRESHOLD, description="Exceedance threshold")]
    level: Annotated[float, Field(default=0.95, gt=0, lt=1, description="Predictive interval level")]
    replicates_per_draw: Annotated[int, Field(default=1, ge=1)]
    seed: Annotated[int, Field(default=0, ge=0, description="Prediction seed")]

    model_config = {"frozen": True, "extra": "forbid"}


class RunConfig(BaseModel):
    """Everything a run depends on; every default reproduces the published protocol"""

    model: ModelSpec = Field(default_factory=ModelSpec)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    columns: SchemaMap = Field(default_factory=SchemaMap)
    predict: PredictSettings = Field(default_factory=PredictSettings)
    simulate: GeneratorSpec = Field(default_factory=GeneratorSpec)

    model_config = {"frozen": True, "extra": "forbid"}

    @field_validator("columns", mode="before")
    @classmethod
    def wrap_columns(cls, v: Any) -> Any:
        # a [columns] table lists field = "column" pairs directly
        if isinstance(v, dict) and "columns" not in v:
            return {"columns": v}
        return v

    def with_overrides(
        self,
        seed: Optional[int] = None,
        chains: Optional[int] = None,
        iterations: Optional[int] = None,
        burnin: Optional[int] = None,
        crash_type: Optional[str] = None,
        threshold: Optional[int] = None,
    ) -> "RunConfig":
        """
        Apply command-line overrides and revalidate

        Raises:
            ConfigError: the overridden configuration is invalid
        """
        data = self.model_dump(mode="json")
        updates = {
            ("sampler", "seed"): seed,
            ("sampler", "n_chains"): chains,
            ("sampler", "n_iterations"): iterations,
            ("sampler", "n_burnin"): burnin,
            ("model", "crash_type"): crash_type,
            ("predict", "threshold"): threshold,
        }
        for (section, key), value in updates.items():
            if value is not None:
                data[section][key] = value
        if seed is not None:
            data["sampler"]["chain_seeds"] = None
            data["simulate"]["seed"] = seed
        if chains is not None and data["sampler"]["chain_seeds"] is not None:
            data["sampler"]["chain_seeds"] = None
        return parse_run_config(data, source="command line")


def parse_run_config(data: Dict[str, Any], source: str = "configuration") -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as err:
        first = err.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"{source}: {location}: {first['msg']}") from err


def load_run_config(path: Optional[Path] = None) -> RunConfig:
    """
    Load a run configuration from TOML or from a previous run's manifest.json

    No path yields the default configuration.

    Raises:
        ConfigError: the file is missing, unreadable or invalid
    """
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file not found: {path}")
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(path.read_text(encoding="utf-8"))
            # a run manifest embeds the effective configuration
            data = data.get("config", data)
        else:
            with open(path, "rb") as handle:
                data = tomllib.load(handle)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError, UnicodeDecodeError) as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err
    config = parse_run_config(data, source=str(path))
    logger.info(
        f"loaded {path}: {config.model.crash_type.value} model, {config.sampler.n_chains} chain(s) "
        f"x {config.sampler.n_iterations} iterations"
    )
    return config


def crash_types(selection: str) -> list:
    """'all' or a single crash type value"""
    if selection == "all":
        return list(CrashType)
    try:
        return [CrashType(selection)]
    except ValueError:
        raise ConfigError(
            f"unknown crash type {selection!r}, expected 'all' or one of "
            f"{', '.join(c.value for c in CrashType)}"
        ) from None
