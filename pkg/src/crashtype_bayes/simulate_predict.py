"""Synthetic data generation, posterior prediction and hotspot ranking."""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, NonNegativeFloat, PositiveFloat, model_validator
from scipy.stats import nbinom

from crashtype_bayes.data_model import (
    OBSERVED_RANGES,
    ApproachRecord,
    CrashType,
    Dataset,
    Orientation,
    ValidationReport,
    derive_partner_volumes,
)
from crashtype_bayes.design import DesignMatrix, ModelSpec, build_design
from crashtype_bayes.exceptions import SpecError
from crashtype_bayes.negbin import nb_sample_array
from crashtype_bayes.reference_models import REFERENCE_MODELS
from crashtype_bayes.sampler import Trace, phi_name

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 5
_PREDICT_CHUNK = 64


class TrueModel(BaseModel):
    """True parameters of one crash type model

    Attributes:
        covariates: covariate selection, as in ModelSpec
        coefficients: design column name -> true coefficient, every column required
        r: NB dispersion
        sigma2_phi: random-effect variance, 0 disables the random effect
    """

    covariates: Tuple[str, ...]
    coefficients: Dict[str, float]
    r: PositiveFloat
    sigma2_phi: NonNegativeFloat

    model_config = {"frozen": True, "extra": "forbid"}

    @classmethod
    def from_reference(cls, crash_type: CrashType) -> "TrueModel":
        reference = REFERENCE_MODELS[CrashType(crash_type)]
        return cls(
            covariates=reference.covariates,
            coefficients=reference.true_coefficients(),
            r=reference.r[0],
            sigma2_phi=reference.sigma2_phi[0],
        )

    def beta(self, crash_type: CrashType) -> np.ndarray:
        columns = ModelSpec(crash_type=crash_type, covariates=self.covariates).column_names()
        return np.array([self.coefficients[name] for name in columns])


def _reference_truths() -> Dict[CrashType, TrueModel]:
    return {crash_type: TrueModel.from_reference(crash_type) for crash_type in CrashType}


class GeneratorSpec(BaseModel):
    """Synthetic dataset recipe

    Continuous covariates are uniform over their observed ranges, categorical
    ones uniform over their codes. Crash types absent from ``models`` get zero
    counts.
    """

    n_intersections: Annotated[int, Field(default=177, gt=0, description="Number of intersections")]
    approaches_per_intersection: Annotated[int, Field(default=4, ge=1, le=4)]
    models: Dict[CrashType, TrueModel] = Field(default_factory=_reference_truths)
    ranges: Dict[str, Tuple[float, float]] = Field(default_factory=dict)
    left_hand_traffic: bool = False
    seed: Annotated[int, Field(default=1, ge=0, description="Generator seed")]

    model_config = {"frozen": True, "extra": "forbid"}

    @model_validator(mode="after")
    def validate_models(self):
        for crash_type, truth in self.models.items():
            columns = ModelSpec(crash_type=crash_type, covariates=truth.covariates).column_names()
            missing = [name for name in columns if name not in truth.coefficients]
            extra = [name for name in truth.coefficients if name not in columns]
            if missing or extra:
                raise ValueError(
                    f"{crash_type.value}: coefficients missing {missing}, unexpected {extra}"
                )
        unknown = [name for name in self.ranges if name not in OBSERVED_RANGES]
        if unknown:
            raise ValueError(f"no covariate recipe for {unknown}")
        return self

    def range_of(self, name: str) -> Tuple[float, float]:
        return self.ranges.get(name, OBSERVED_RANGES[name])


@dataclass(frozen=True)
class SimulationResult:
    dataset: Dataset
    # crash type -> φ of every intersection, in group order
    random_effects: Dict[CrashType, np.ndarray]


def _uniform(rng: np.random.Generator, spec: GeneratorSpec, name: str, digits: int = 2) -> float:
    low, high = spec.range_of(name)
    return round(float(rng.uniform(low, high)), digits)


def _integer(rng: np.random.Generator, spec: GeneratorSpec, name: str, high: Optional[int] = None) -> int:
    low, top = spec.range_of(name)
    top = int(top) if high is None else min(int(top), high)
    return int(rng.integers(int(low), max(top, int(low)) + 1))


def _draw_records(spec: GeneratorSpec, rng: np.random.Generator) -> List[ApproachRecord]:
    zero_counts = {crash_type: 0 for crash_type in CrashType}
    legs = [o.name[0] for o in Orientation][: spec.approaches_per_intersection]
    records = []
    width = len(str(spec.n_intersections))
    for i in range(spec.n_intersections):
        intersection = {
            "intersection_id": f"I{i + 1:0{width}d}",
            "intersection_angle": _uniform(rng, spec, "intersection_angle", 1),
            "coordinated": _integer(rng, spec, "coordinated"),
            "flashing_mode": _integer(rng, spec, "flashing_mode"),
            "county": _integer(rng, spec, "county"),
        }
        for leg in legs:
            through = _integer(rng, spec, "aadt_through")
            left = _integer(rng, spec, "aadt_left")
            right = _integer(rng, spec, "aadt_right")
            lanes_left = _integer(rng, spec, "lanes_left")
            lanes_right = _integer(rng, spec, "lanes_right")
            lanes_cap = int(spec.range_of("lanes_total")[1]) - lanes_left - lanes_right
            lanes_through = _integer(rng, spec, "lanes_through", high=lanes_cap)
            records.append(
                ApproachRecord(
                    approach_id=leg,
                    aadt_total=through + left + right,
                    aadt_through=through,
                    aadt_left=left,
                    aadt_right=right,
                    lanes_total=lanes_through + lanes_left + lanes_right,
                    lanes_through=lanes_through,
                    lanes_left=lanes_left,
                    lanes_right=lanes_right,
                    median_present=_integer(rng, spec, "median_present"),
                    left_turn_offset=_integer(rng, spec, "left_turn_offset"),
                    friction=_uniform(rng, spec, "friction"),
                    left_turn_control=_integer(rng, spec, "left_turn_control"),
                    yellow_minus_standard=_uniform(rng, spec, "yellow_minus_standard"),
                    all_red_minus_standard=_uniform(rng, spec, "all_red_minus_standard"),
                    speed_limit=_uniform(rng, spec, "speed_limit", 0),
                    crash_counts=zero_counts,
                    **intersection,
                )
            )
    return records


def simulate(spec: GeneratorSpec) -> SimulationResult:
    """
    Draw covariates, random effects and crash counts from the generative model

    For each modeled crash type: φ_i ~ N(0, σ_φ²) per intersection,
    log θ = β·x + φ_i, y ~ NB(θ, r). Random effects are drawn independently
    per crash type.
    """
    rng = np.random.default_rng(spec.seed)
    base = Dataset(records=tuple(_draw_records(spec, rng)))
    base = derive_partner_volumes(base, left_hand_traffic=spec.left_hand_traffic)

    counts = [dict.fromkeys(CrashType, 0) for _ in base.records]
    positions = {record.label: k for k, record in enumerate(base.records)}
    effects: Dict[CrashType, np.ndarray] = {}
    for crash_type in CrashType:
        truth = spec.models.get(crash_type)
        if truth is None:
            continue
        dm = build_design(base, ModelSpec(crash_type=crash_type, covariates=truth.covariates))
        phi = rng.normal(0.0, math.sqrt(truth.sigma2_phi), size=dm.n_groups)
        theta = np.exp(dm.X @ truth.beta(crash_type) + phi[dm.group])
        draws = nb_sample_array(theta, truth.r, rng)
        for label, y in zip(dm.record_labels, draws):
            counts[positions[label]][crash_type] = int(y)
        effects[crash_type] = phi

    records = tuple(
        record.model_copy(update={"crash_counts": count}) for record, count in zip(base.records, counts)
    )
    report = ValidationReport(
        source=f"generator(seed={spec.seed})",
        n_records=len(records),
        n_intersections=base.n_groups,
        flagged_records=base.report.flagged_records,
    )
    dataset = Dataset(records=records, partner_flags=base.partner_flags, report=report)
    logger.info(
        f"generated {len(records)} approaches at {dataset.n_groups} intersections "
        f"for {len(effects)} crash type(s)"
    )
    return SimulationResult(dataset=dataset, random_effects=effects)


def generate(spec: GeneratorSpec) -> Dataset:
    return simulate(spec).dataset


def write_truth(spec: GeneratorSpec, path: Path, result: Optional[SimulationResult] = None) -> None:
    """Write the true parameters (and realized random effects) as JSON for recovery scoring"""
    truth = {"generator": spec.model_dump(mode="json")}
    if result is not None:
        ids = result.dataset.intersection_ids
        truth["random_effects"] = {
            crash_type.value: {gid: float(v) for gid, v in zip(ids, phi)}
            for crash_type, phi in result.random_effects.items()
        }
    Path(path).write_text(json.dumps(truth, indent=2), encoding="utf-8")


class PredictiveSummary(BaseModel):
    """Posterior predictive summary of one design row"""

    record: str
    intersection_id: str
    mean: float
    lower: float
    upper: float
    exceedance: Dict[int, float]
    out_of_sample: bool = False

    model_config = {"frozen": True}


def _pooled(traces: Sequence[Trace], name: str) -> np.ndarray:
    return np.concatenate([t[name] for t in traces])


def posterior_predict(
    traces: Sequence[Trace],
    dm: DesignMatrix,
    thresholds: Sequence[int] = (DEFAULT_THRESHOLD,),
    level: float = 0.95,
    replicates_per_draw: int = 1,
    seed: int = 0,
) -> List[PredictiveSummary]:
    """
    Posterior predictive distribution of every row of a design

    The predictive mean is the posterior mean of θ and each exceedance
    probability P(y > t) averages the NB survival function over the draws.
    The interval comes from simulated counts, replicates_per_draw per draw.
    Intersections without a traced φ draw φ_new ~ N(0, σ_φ²) per posterior
    draw and are flagged out-of-sample.

    Raises:
        SpecError: the traces lack a design column
    """
    if not traces:
        raise SpecError("no traces to predict from")
    names = traces[0].names
    missing = [name for name in dm.column_names if name not in names]
    if missing:
        raise SpecError(f"traces lack design column(s) {missing}")
    if not 0 < level < 1:
        raise ValueError(f"interval level must lie in (0, 1), got {level}")

    beta = np.column_stack([_pooled(traces, name) for name in dm.column_names])
    r = _pooled(traces, "r")
    n_draws = r.size
    random_effects = "sigma2_phi" in names
    sigma2 = _pooled(traces, "sigma2_phi") if random_effects else None

    seeds = np.random.SeedSequence(seed)
    phi_rng = np.random.default_rng(seeds.spawn(1)[0])
    phi = np.zeros((n_draws, dm.n_groups))
    out_of_sample = np.zeros(dm.n_groups, dtype=bool)
    if random_effects:
        for g, gid in enumerate(dm.group_ids):
            if phi_name(gid) in names:
                phi[:, g] = _pooled(traces, phi_name(gid))
            else:
                phi[:, g] = phi_rng.normal(0.0, np.sqrt(sigma2))
                out_of_sample[g] = True
        if out_of_sample.any():
            logger.warning(
                f"{int(out_of_sample.sum())} intersection(s) have no traced random effect, "
                f"predicted out-of-sample"
            )

    tail = (1.0 - level) / 2.0
    starts = range(0, dm.n_rows, _PREDICT_CHUNK)
    chunk_seeds = seeds.spawn(len(starts))
    results: List[PredictiveSummary] = []
    for start, chunk_seed in zip(starts, chunk_seeds):
        rows = slice(start, min(start + _PREDICT_CHUNK, dm.n_rows))
        rng = np.random.default_rng(chunk_seed)
        theta = np.exp(beta @ dm.X[rows].T + phi[:, dm.group[rows]])
        size = r[:, None]
        probability = size / (size + theta)
        exceedance = {
            int(t): nbinom.sf(int(t), size, probability).mean(axis=0) for t in thresholds
        }
        replicates = np.concatenate(
            [nb_sample_array(theta, size, rng) for _ in range(replicates_per_draw)], axis=0
        )
        lower, upper = np.quantile(replicates, [tail, 1.0 - tail], axis=0, method="inverted_cdf")
        means = theta.mean(axis=0)
        for j, i in enumerate(range(rows.start, rows.stop)):
            group = int(dm.group[i])
            results.append(
                PredictiveSummary(
                    record=dm.record_labels[i] if dm.record_labels else str(i),
                    intersection_id=dm.group_ids[group],
                    mean=float(means[j]),
                    lower=float(lower[j]),
                    upper=float(upper[j]),
                    exceedance={t: float(p[j]) for t, p in exceedance.items()},
                    out_of_sample=bool(out_of_sample[group]),
                )
            )
    return results


class HotspotEntry(BaseModel):
    rank: int
    record: str
    intersection_id: str
    mean: float
    exceedance: float
    out_of_sample: bool = False

    model_config = {"frozen": True}


class HotspotRanking(BaseModel):
    """Rows ranked by P(y > threshold), ties by predictive mean then record order"""

    threshold: int
    entries: Tuple[HotspotEntry, ...]

    model_config = {"frozen": True}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [entry.model_dump() for entry in self.entries],
            columns=list(HotspotEntry.model_fields),
        )

    def top(self, k: int) -> Tuple[HotspotEntry, ...]:
        return self.entries[:k]


def rank_hotspots(predictions: Sequence[PredictiveSummary], threshold: int = DEFAULT_THRESHOLD) -> HotspotRanking:
    """
    Rank approaches by exceedance probability

    Raises:
        ValueError: no predictions, or predictions computed without this threshold
    """
    if not predictions:
        raise ValueError("no predictions to rank")
    threshold = int(threshold)
    if any(threshold not in p.exceedance for p in predictions):
        raise ValueError(f"predictions carry no exceedance probability for threshold {threshold}")
    order = sorted(
        range(len(predictions)),
        key=lambda k: (-predictions[k].exceedance[threshold], -predictions[k].mean, k),
    )
    entries = tuple(
        HotspotEntry(
            rank=rank,
            record=predictions[k].record,
            intersection_id=predictions[k].intersection_id,
            mean=predictions[k].mean,
            exceedance=predictions[k].exceedance[threshold],
            out_of_sample=predictions[k].out_of_sample,
        )
        for rank, k in enumerate(order, start=1)
    )
    return HotspotRanking(threshold=threshold, entries=entries)
