"""Design matrix construction: conflicting-volume exposure, dummy coding, covariate selection."""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Annotated, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from crashtype_bayes.data_model import ApproachRecord, CrashType, Dataset, LeftTurnControl
from crashtype_bayes.exceptions import EmptyDesignError, ExposureError, SpecError
from crashtype_bayes.priors import PriorSpec
from crashtype_bayes.reference_models import REFERENCE_MODELS

logger = logging.getLogger(__name__)

INTERCEPT = "intercept"
LOG_EXPOSURE = "log_exposure"
LT_PROTECTED = "left_turn_protected"
LT_PROTECTED_PERMISSIVE = "left_turn_protected_permissive"

# ApproachRecord fields usable as covariates
COVARIATES = (
    "lanes_total",
    "lanes_through",
    "lanes_left",
    "lanes_right",
    "opposing_lanes_through",
    "median_present",
    "left_turn_offset",
    "intersection_angle",
    "friction",
    "coordinated",
    "left_turn_control",
    "yellow_minus_standard",
    "all_red_minus_standard",
    "flashing_mode",
    "speed_limit",
    "near_cross_speed_limit",
    "county",
)


class ExposureFormula(Enum):
    SINGLE_VOLUME = "single-volume"
    PRODUCT_OF_TWO_VOLUMES = "product-of-two-volumes"


class ExposureRule(BaseModel):
    """Conflicting-volume construction for one crash type"""

    crash_type: CrashType
    formula: ExposureFormula
    operands: Tuple[str, ...]

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def validate_arity(self):
        expected = 1 if self.formula == ExposureFormula.SINGLE_VOLUME else 2
        if len(self.operands) != expected:
            raise ValueError(f"{self.formula.value} takes {expected} operand(s), got {self.operands}")
        return self


EXPOSURE_RULES: Dict[CrashType, ExposureRule] = {
    CrashType.REAR_END: ExposureRule(
        crash_type=CrashType.REAR_END,
        formula=ExposureFormula.SINGLE_VOLUME,
        operands=("aadt_total",),
    ),
    CrashType.SIDESWIPE: ExposureRule(
        crash_type=CrashType.SIDESWIPE,
        formula=ExposureFormula.SINGLE_VOLUME,
        operands=("aadt_total",),
    ),
    CrashType.OPPOSING_LEFT_TURN: ExposureRule(
        crash_type=CrashType.OPPOSING_LEFT_TURN,
        formula=ExposureFormula.PRODUCT_OF_TWO_VOLUMES,
        operands=("aadt_through", "opposing_aadt_left"),
    ),
    CrashType.CROSSING_LEFT_TURN: ExposureRule(
        crash_type=CrashType.CROSSING_LEFT_TURN,
        formula=ExposureFormula.PRODUCT_OF_TWO_VOLUMES,
        operands=("aadt_left", "near_cross_aadt_through"),
    ),
    CrashType.RIGHT_ANGLE: ExposureRule(
        crash_type=CrashType.RIGHT_ANGLE,
        formula=ExposureFormula.PRODUCT_OF_TWO_VOLUMES,
        operands=("aadt_through", "near_cross_aadt_through"),
    ),
}


def exposure_rule_for(crash_type: CrashType) -> ExposureRule:
    return EXPOSURE_RULES[CrashType(crash_type)]


class ModelSpec(BaseModel):
    """Crash type, covariate selection, priors and exposure rule of one model

    Attributes:
        crash_type: modeled crash type, selects the response and default exposure
        covariates: covariate names in column order; None selects the published model's
        priors: prior hyperparameters
        exposure: exposure rule, None selects the rule of crash_type
        center: subtract column means from every non-intercept column
    """

    crash_type: CrashType = CrashType.REAR_END
    covariates: Optional[Tuple[str, ...]] = None
    priors: PriorSpec = Field(default_factory=PriorSpec)
    exposure: Optional[ExposureRule] = None
    center: Annotated[
        bool, Field(default=False, description="Center covariates (changes reported intercept)")
    ]

    model_config = {"frozen": True, "extra": "forbid"}

    @property
    def selected_covariates(self) -> Tuple[str, ...]:
        if self.covariates is None:
            return REFERENCE_MODELS[self.crash_type].covariates
        return self.covariates

    @property
    def exposure_rule(self) -> ExposureRule:
        return self.exposure or exposure_rule_for(self.crash_type)

    def column_names(self) -> Tuple[str, ...]:
        names = [INTERCEPT, LOG_EXPOSURE]
        for covariate in self.selected_covariates:
            if covariate == "left_turn_control":
                names.extend([LT_PROTECTED, LT_PROTECTED_PERMISSIVE])
            else:
                names.append(covariate)
        return tuple(names)


@dataclass(frozen=True)
class DesignRow:
    """One design row; ``values`` is the full row in column order"""

    group_index: int
    response: int
    log_exposure: float
    covariates: Dict[str, float]
    values: Tuple[float, ...] = ()


@dataclass(frozen=True)
class DesignMatrix:
    """Numeric design for one crash type

    X holds the intercept column, the log-exposure column and the covariate
    columns in that order; ``group`` maps each row to its intersection index.
    """

    crash_type: CrashType
    column_names: Tuple[str, ...]
    X: np.ndarray
    y: np.ndarray
    group: np.ndarray
    n_groups: int
    group_ids: Tuple[str, ...]
    record_labels: Tuple[str, ...] = ()
    column_means: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def from_arrays(
        cls,
        X: np.ndarray,
        y: Sequence[int],
        group: Optional[Sequence[int]] = None,
        column_names: Optional[Sequence[str]] = None,
        crash_type: CrashType = CrashType.REAR_END,
    ) -> "DesignMatrix":
        """Build a design directly from arrays (one group per row when group is omitted)"""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n_rows = X.shape[0]
        group = np.arange(n_rows) if group is None else np.asarray(group, dtype=np.int64)
        n_groups = int(group.max()) + 1 if n_rows else 0
        if column_names is None:
            column_names = [INTERCEPT] + [f"x{k}" for k in range(1, X.shape[1])]
        return cls(
            crash_type=crash_type,
            column_names=tuple(column_names),
            X=X,
            y=np.asarray(y, dtype=np.int64),
            group=np.asarray(group, dtype=np.int64),
            n_groups=n_groups,
            group_ids=tuple(str(g) for g in range(n_groups)),
            record_labels=tuple(str(i) for i in range(n_rows)),
        )

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_columns(self) -> int:
        return self.X.shape[1]

    def row(self, i: int) -> DesignRow:
        log_exposure = 0.0
        covariates: Dict[str, float] = {}
        for k, name in enumerate(self.column_names):
            if name == LOG_EXPOSURE:
                log_exposure = float(self.X[i, k])
            elif name != INTERCEPT:
                covariates[name] = float(self.X[i, k])
        return DesignRow(
            group_index=int(self.group[i]),
            response=int(self.y[i]),
            log_exposure=log_exposure,
            covariates=covariates,
            values=tuple(float(v) for v in self.X[i]),
        )

    @property
    def rows(self) -> List[DesignRow]:
        return [self.row(i) for i in range(self.n_rows)]


def conflicting_volume(rec: ApproachRecord, rule: ExposureRule) -> int:
    """
    Conflicting traffic volume of a record under an exposure rule

    Single-volume rules return the field, product rules the exact integer product.

    Raises:
        ExposureError: an operand is missing or not positive
    """
    volume = 1
    for name in rule.operands:
        value = getattr(rec, name)
        if value is None or value <= 0:
            raise ExposureError(rec.label, name, value)
        volume *= value
    return volume


def _covariate_values(record: ApproachRecord, covariates: Sequence[str]) -> Optional[List[float]]:
    values: List[float] = []
    for covariate in covariates:
        value = getattr(record, covariate)
        if value is None:
            return None
        if covariate == "left_turn_control":
            values.append(1.0 if value == LeftTurnControl.PROTECTED else 0.0)
            values.append(1.0 if value == LeftTurnControl.PROTECTED_PERMISSIVE else 0.0)
        else:
            values.append(float(value))
    return values


def build_design(ds: Dataset, spec: ModelSpec, column_means: Optional[Sequence[float]] = None) -> DesignMatrix:
    """
    Build the design matrix of spec.crash_type from a dataset

    With spec.center, non-intercept columns are centered at their sample means,
    or at column_means when given (the means of the fitted design, for prediction).

    Records missing any selected covariate or exposure operand are excluded and
    counted in the log. Left-turn control is expanded to protected and
    protected-permissive indicators against the permissive baseline.

    Raises:
        SpecError: unknown covariate, or exposure rule of another crash type
        ExposureError: a present exposure operand is not positive
        EmptyDesignError: no usable record remains
    """
    covariates = spec.selected_covariates
    unknown = [name for name in covariates if name not in COVARIATES]
    if unknown:
        raise SpecError(f"unknown covariate(s) {unknown}; known: {', '.join(COVARIATES)}")
    if len(set(covariates)) != len(covariates):
        raise SpecError(f"covariate listed twice in {list(covariates)}")
    rule = spec.exposure_rule
    if rule.crash_type != spec.crash_type:
        raise SpecError(
            f"exposure rule is for {rule.crash_type.value}, model is {spec.crash_type.value}"
        )

    rows: List[List[float]] = []
    responses: List[int] = []
    groups: List[int] = []
    labels: List[str] = []
    excluded = 0
    record_groups = ds.record_groups
    for position, record in enumerate(ds.records):
        values = _covariate_values(record, covariates)
        if values is None or any(getattr(record, name) is None for name in rule.operands):
            excluded += 1
            continue
        volume = conflicting_volume(record, rule)
        rows.append([1.0, math.log(volume)] + values)
        responses.append(record.crash_counts[spec.crash_type])
        groups.append(record_groups[position])
        labels.append(record.label)

    if excluded:
        logger.warning(
            f"{excluded} of {len(ds)} record(s) excluded from the {spec.crash_type.value} "
            f"model for missing covariates or exposure volumes"
        )
    if not rows:
        raise EmptyDesignError(f"no usable record for the {spec.crash_type.value} model")

    X = np.asarray(rows, dtype=float)
    means = None
    if spec.center:
        if column_means is not None:
            means = np.asarray(column_means, dtype=float)
            if means.shape != (X.shape[1],):
                raise SpecError(f"{means.size} column means for {X.shape[1]} design columns")
        else:
            means = X.mean(axis=0)
            means[0] = 0.0
        X = X - means

    return DesignMatrix(
        crash_type=spec.crash_type,
        column_names=spec.column_names(),
        X=X,
        y=np.asarray(responses, dtype=np.int64),
        group=np.asarray(groups, dtype=np.int64),
        n_groups=ds.n_groups,
        group_ids=ds.intersection_ids,
        record_labels=tuple(labels),
        column_means=means,
    )
