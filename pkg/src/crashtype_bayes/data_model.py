"""Approach-level dataset schema, CSV loading and partner-approach derivation."""

import logging
import math
import tomllib
from enum import Enum, IntEnum
from pathlib import Path
from types import MappingProxyType
from typing import Annotated, Any, Dict, List, Literal, Mapping, Optional, Tuple

import pandas as pd
from pydantic import (
    BaseModel,
    Field,
    NonNegativeInt,
    PrivateAttr,
    ValidationError,
    field_validator,
    model_validator,
)

from crashtype_bayes.exceptions import (
    DataParseError,
    DataValidationError,
    OrientationError,
    SchemaError,
)

logger = logging.getLogger(__name__)


class CrashType(str, Enum):
    "The five modeled crash types"
    REAR_END = "rear_end"
    OPPOSING_LEFT_TURN = "opposing_left_turn"
    CROSSING_LEFT_TURN = "crossing_left_turn"
    RIGHT_ANGLE = "right_angle"
    SIDESWIPE = "sideswipe"

    @property
    def count_field(self) -> str:
        return f"crashes_{self.value}"


class Orientation(IntEnum):
    """Approach legs in clockwise order"""

    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3

    @classmethod
    def parse(cls, label: str) -> "Orientation":
        text = label.strip().upper()
        letters = {"N": cls.NORTH, "E": cls.EAST, "S": cls.SOUTH, "W": cls.WEST}
        if text in letters:
            return letters[text]
        if text in {"0", "1", "2", "3"}:
            return cls(int(text))
        raise ValueError(f"unknown approach label {label!r}")

    def opposite(self) -> "Orientation":
        return Orientation((self + 2) % 4)

    def near_cross(self, left_hand_traffic: bool = False) -> "Orientation":
        """Approach whose traffic crosses in front of this stop line first.

        Right-hand traffic: the approach on the driver's right. Left-hand
        traffic: the approach on the driver's left.
        """
        step = 1 if left_hand_traffic else -1
        return Orientation((self + step) % 4)


class LeftTurnControl(IntEnum):
    PERMISSIVE = 0
    PROTECTED_PERMISSIVE = 1
    PROTECTED = 2


ID_FIELDS = ("intersection_id", "approach_id")
VOLUME_FIELDS = ("aadt_total", "aadt_through", "aadt_left", "aadt_right")
PARTNER_FIELDS = (
    "opposing_aadt_left",
    "opposing_aadt_through",
    "near_cross_aadt_through",
    "opposing_lanes_through",
    "near_cross_speed_limit",
)
REAL_FIELDS = (
    "intersection_angle",
    "friction",
    "yellow_minus_standard",
    "all_red_minus_standard",
    "speed_limit",
    "near_cross_speed_limit",
)
CRASH_FIELDS = tuple(crash_type.count_field for crash_type in CrashType)

# column order of serialized datasets
RECORD_FIELDS = (
    ID_FIELDS
    + VOLUME_FIELDS
    + (
        "opposing_aadt_left",
        "opposing_aadt_through",
        "near_cross_aadt_through",
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
)
ALL_FIELDS = RECORD_FIELDS + CRASH_FIELDS
MANDATORY_FIELDS = ID_FIELDS + VOLUME_FIELDS + CRASH_FIELDS

# Observed (min, max) of the approach-level variables in the source study.
OBSERVED_RANGES: Dict[str, Tuple[float, float]] = {
    "aadt_total": (51, 50763),
    "aadt_through": (10, 50464),
    "aadt_left": (10, 13005),
    "aadt_right": (3, 11653),
    "lanes_total": (1, 7),
    "lanes_through": (1, 5),
    "lanes_left": (0, 2),
    "lanes_right": (0, 2),
    "median_present": (0, 1),
    "left_turn_offset": (-1, 1),
    "intersection_angle": (36, 144),
    "friction": (24.19, 46.07),
    "coordinated": (0, 1),
    "left_turn_control": (0, 2),
    "yellow_minus_standard": (0, 5.5),
    "all_red_minus_standard": (0.5, 5.1),
    "flashing_mode": (0, 1),
    "speed_limit": (15, 60),
    "county": (0, 1),
}
LANE_FIELDS = ("lanes_total", "lanes_through", "lanes_left", "lanes_right", "opposing_lanes_through")


class ApproachRecord(BaseModel):
    """One intersection approach with its covariates and 6-year crash counts

    Optional covariates are None when the source file leaves them blank;
    models that use such a covariate exclude the record.
    """

    intersection_id: Annotated[str, Field(min_length=1)]
    approach_id: Annotated[str, Field(min_length=1)]

    aadt_total: NonNegativeInt
    aadt_through: NonNegativeInt
    aadt_left: NonNegativeInt
    aadt_right: NonNegativeInt
    opposing_aadt_left: Optional[NonNegativeInt] = None
    opposing_aadt_through: Optional[NonNegativeInt] = None
    near_cross_aadt_through: Optional[NonNegativeInt] = None

    lanes_total: Optional[NonNegativeInt] = None
    lanes_through: Optional[NonNegativeInt] = None
    lanes_left: Optional[NonNegativeInt] = None
    lanes_right: Optional[NonNegativeInt] = None
    opposing_lanes_through: Optional[NonNegativeInt] = None

    median_present: Optional[Literal[0, 1]] = None
    left_turn_offset: Optional[Literal[-1, 0, 1]] = None
    intersection_angle: Optional[Annotated[float, Field(gt=0, lt=180)]] = None
    friction: Optional[Annotated[float, Field(ge=0)]] = None

    coordinated: Optional[Literal[0, 1]] = None
    left_turn_control: Optional[Literal[0, 1, 2]] = None
    yellow_minus_standard: Optional[float] = None
    all_red_minus_standard: Optional[float] = None
    flashing_mode: Optional[Literal[0, 1]] = None

    speed_limit: Optional[Annotated[float, Field(gt=0)]] = None
    near_cross_speed_limit: Optional[Annotated[float, Field(gt=0)]] = None
    county: Optional[Literal[0, 1]] = None

    crash_counts: Dict[CrashType, NonNegativeInt]

    model_config = {"frozen": True, "extra": "forbid", "allow_inf_nan": False}

    @field_validator("crash_counts")
    @classmethod
    def validate_crash_counts(cls, v: Dict[CrashType, int]) -> Dict[CrashType, int]:
        missing = [crash_type.value for crash_type in CrashType if crash_type not in v]
        if missing:
            raise ValueError(f"crash counts missing for {missing}")
        return v

    @property
    def label(self) -> str:
        return f"{self.intersection_id}/{self.approach_id}"

    def field_value(self, name: str) -> Any:
        """Value of a flat field, crash count columns included"""
        if name.startswith("crashes_"):
            return self.crash_counts[CrashType(name[len("crashes_"):])]
        return getattr(self, name)


class ValidationReport(BaseModel):
    """Findings collected while loading or deriving a dataset"""

    source: str = ""
    n_records: int = 0
    n_intersections: int = 0
    warnings: List[str] = Field(default_factory=list)
    flagged_records: List[str] = Field(default_factory=list)

    def log(self) -> None:
        logger.info(
            f"{self.source or 'dataset'}: {self.n_records} records, "
            f"{self.n_intersections} intersections"
        )
        for message in self.warnings:
            logger.warning(message)
        if self.flagged_records:
            logger.warning(
                f"{len(self.flagged_records)} record(s) lack a partner approach: "
                f"{', '.join(self.flagged_records[:10])}"
                f"{' ...' if len(self.flagged_records) > 10 else ''}"
            )

    def to_json(self, path: Path) -> None:
        Path(path).write_text(self.model_dump_json(indent=2), encoding="utf-8")


class Dataset(BaseModel):
    """Immutable ordered collection of approach records

    Group indices are assigned by first appearance of intersection_id, so they
    are a pure function of record order.
    """

    records: Tuple[ApproachRecord, ...]
    partner_flags: frozenset = Field(default_factory=frozenset)
    report: ValidationReport = Field(default_factory=ValidationReport)

    model_config = {"frozen": True, "arbitrary_types_allowed": True}

    _group_index: Dict[str, int] = PrivateAttr(default_factory=dict)
    _record_groups: Tuple[int, ...] = PrivateAttr(default=())

    @model_validator(mode="after")
    def assign_groups(self) -> "Dataset":
        group_index: Dict[str, int] = {}
        labels: Dict[str, set] = {}
        record_groups = []
        for position, record in enumerate(self.records):
            group = group_index.setdefault(record.intersection_id, len(group_index))
            record_groups.append(group)
            seen = labels.setdefault(record.intersection_id, set())
            if record.approach_id in seen:
                raise DataValidationError(
                    f"duplicate approach '{record.approach_id}' "
                    f"at intersection '{record.intersection_id}'",
                    row=position + 1,
                    field="approach_id",
                )
            seen.add(record.approach_id)
            if len(seen) > 4:
                raise DataValidationError(
                    f"intersection '{record.intersection_id}' has more than 4 approaches",
                    row=position + 1,
                    field="approach_id",
                )
        self._group_index = group_index
        self._record_groups = tuple(record_groups)
        return self

    def __len__(self) -> int:
        return len(self.records)

    @property
    def group_index(self) -> Mapping[str, int]:
        return MappingProxyType(self._group_index)

    @property
    def record_groups(self) -> Tuple[int, ...]:
        """Group index of every record, in record order"""
        return self._record_groups

    @property
    def n_groups(self) -> int:
        return len(self._group_index)

    @property
    def intersection_ids(self) -> Tuple[str, ...]:
        """Intersection ids ordered by group index"""
        return tuple(self._group_index)


class SchemaMap(BaseModel):
    """Binding of logical field names to CSV column names

    Fields not listed keep their own name as column name.
    """

    columns: Dict[str, str] = Field(default_factory=dict)

    model_config = {"frozen": True}

    @field_validator("columns")
    @classmethod
    def validate_fields(cls, v: Dict[str, str]) -> Dict[str, str]:
        unknown = sorted(set(v) - set(ALL_FIELDS))
        if unknown:
            raise ValueError(f"unknown field(s) in schema map: {unknown}")
        targets = list(v.values())
        if len(set(targets)) != len(targets):
            raise ValueError("two fields are mapped to the same column")
        return v

    def column_for(self, field: str) -> str:
        return self.columns.get(field, field)


def load_schema_map(path: Path) -> SchemaMap:
    """Read a TOML file of ``field = "column"`` pairs (optionally under [columns])"""
    try:
        with open(path, "rb") as handle:
            content = tomllib.load(handle)
    except tomllib.TOMLDecodeError as err:
        raise SchemaError(f"cannot parse schema map {path}: {err}") from err
    columns = content.get("columns", content)
    try:
        return SchemaMap(columns=columns)
    except ValidationError as err:
        raise SchemaError(f"invalid schema map {path}: {err.errors()[0]['msg']}") from err


def _parse_cell(text: str, field: str, row: int, column: str) -> Any:
    text = text.strip()
    if text == "":
        return None
    if field in ID_FIELDS:
        return text
    try:
        if field in REAL_FIELDS:
            value = float(text)
            if not math.isfinite(value):
                raise ValueError(text)
            return value
        try:
            return int(text)
        except ValueError:
            value = float(text)
            if not value.is_integer():
                raise ValueError(text)
            return int(value)
    except ValueError:
        raise DataParseError(row=row, column=column, value=text) from None


def _record_from_values(values: Dict[str, Any], row: int) -> ApproachRecord:
    for field in MANDATORY_FIELDS:
        if values.get(field) is None:
            raise DataValidationError(f"missing value for '{field}'", row=row, field=field)
    crash_counts = {crash_type: values.pop(crash_type.count_field) for crash_type in CrashType}
    negative = [
        f"{crash_type.count_field}={count}" for crash_type, count in crash_counts.items() if count < 0
    ]
    if negative:
        raise DataValidationError(
            f"negative crash count ({', '.join(negative)})", row=row, field="crash_counts"
        )
    try:
        return ApproachRecord(crash_counts=crash_counts, **values)
    except ValidationError as err:
        first = err.errors()[0]
        field = str(first["loc"][0]) if first["loc"] else None
        raise DataValidationError(
            f"invalid value for '{field}': {first['msg']}", row=row, field=field
        ) from err


def _range_warnings(record: ApproachRecord, row: int) -> List[str]:
    messages = []
    for field in LANE_FIELDS:
        value = getattr(record, field)
        low, high = OBSERVED_RANGES.get(field, OBSERVED_RANGES.get("lanes_through"))
        if value is not None and not low <= value <= high:
            messages.append(f"row {row}: {field}={value} outside observed range [{low}, {high}]")
    return messages


def load_dataset(
    path: Path,
    schema: Optional[SchemaMap] = None,
    report_path: Optional[Path] = None,
) -> Dataset:
    """
    Load and validate approach records from a headered comma-delimited file

    Args:
        path: CSV file, one row per approach
        schema: column-name binding, identity when omitted
        report_path: optional JSON file receiving the validation report

    Returns:
        Dataset: validated records in file order

    Raises:
        FileNotFoundError: the file does not exist
        SchemaError: header missing or a mandatory column is not present
        DataParseError: a cell is not numeric where a number is required
        DataValidationError: a value violates its field's codomain
    """
    path = Path(path)
    schema = schema or SchemaMap()
    if not path.is_file():
        raise FileNotFoundError(f"data file not found: {path}")

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError as err:
        raise SchemaError(f"{path}: no header row") from err

    header = [str(column).strip() for column in frame.columns]
    frame.columns = header
    missing = [
        schema.column_for(field)
        for field in MANDATORY_FIELDS
        if schema.column_for(field) not in header
    ]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
    present = [field for field in ALL_FIELDS if schema.column_for(field) in header]

    records = []
    warnings: List[str] = []
    for row, cells in enumerate(frame.itertuples(index=False, name=None), start=1):
        by_column = dict(zip(header, cells))
        values = {
            field: _parse_cell(by_column[schema.column_for(field)], field, row, schema.column_for(field))
            for field in present
        }
        record = _record_from_values(values, row)
        warnings.extend(_range_warnings(record, row))
        records.append(record)

    report = ValidationReport(source=str(path), n_records=len(records), warnings=warnings)
    dataset = Dataset(records=tuple(records), report=report)
    report.n_intersections = dataset.n_groups
    report.log()
    if report_path is not None:
        report.to_json(report_path)
    return dataset


def write_dataset(ds: Dataset, path: Path, schema: Optional[SchemaMap] = None) -> None:
    """Serialize a dataset to CSV; load_dataset reads it back unchanged"""
    schema = schema or SchemaMap()
    rows = [[record.field_value(field) for field in ALL_FIELDS] for record in ds.records]
    frame = pd.DataFrame(rows, columns=[schema.column_for(field) for field in ALL_FIELDS], dtype=object)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, na_rep="", lineterminator="\n")
    logger.info(f"wrote {len(ds)} records to {path}")


def derive_partner_volumes(ds: Dataset, left_hand_traffic: bool = False) -> Dataset:
    """
    Fill the cross-approach fields of every record from its partner approaches

    The opposite approach supplies opposing_aadt_left, opposing_aadt_through and
    opposing_lanes_through; the near-side crossing approach supplies
    near_cross_aadt_through and near_cross_speed_limit. Records whose partner is
    absent keep their loaded values and are flagged.

    Raises:
        OrientationError: labels that are unknown or map two records of one
            intersection onto the same leg
    """
    legs: Dict[str, Dict[Orientation, int]] = {}
    bad: List[str] = []
    orientations: List[Optional[Orientation]] = []
    for position, record in enumerate(ds.records):
        try:
            orientation = Orientation.parse(record.approach_id)
        except ValueError:
            bad.append(record.intersection_id)
            orientations.append(None)
            continue
        by_leg = legs.setdefault(record.intersection_id, {})
        if orientation in by_leg:
            bad.append(record.intersection_id)
        by_leg[orientation] = position
        orientations.append(orientation)
    if bad:
        raise OrientationError(bad)

    records = []
    flags = set()
    flagged_labels = []
    for position, (record, orientation) in enumerate(zip(ds.records, orientations)):
        by_leg = legs[record.intersection_id]
        update: Dict[str, Any] = {}
        opposite = by_leg.get(orientation.opposite())
        near = by_leg.get(orientation.near_cross(left_hand_traffic))
        if opposite is not None:
            partner = ds.records[opposite]
            update["opposing_aadt_left"] = partner.aadt_left
            update["opposing_aadt_through"] = partner.aadt_through
            update["opposing_lanes_through"] = partner.lanes_through
        if near is not None:
            partner = ds.records[near]
            update["near_cross_aadt_through"] = partner.aadt_through
            update["near_cross_speed_limit"] = partner.speed_limit
        if opposite is None or near is None:
            flags.add(position)
            flagged_labels.append(record.label)
        records.append(record.model_copy(update=update))

    report = ds.report.model_copy(update={"flagged_records": flagged_labels})
    if flagged_labels:
        logger.warning(f"{len(flagged_labels)} record(s) flagged for missing partner approaches")
    return Dataset(records=tuple(records), partner_flags=frozenset(flags), report=report)
