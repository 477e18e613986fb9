from pathlib import Path
from typing import Dict, Optional

import numpy as np
import pytest

from crashtype_bayes.data_model import ApproachRecord, CrashType, Dataset, write_dataset
from crashtype_bayes.sampler import SamplerConfig

LEGS = ("N", "E", "S", "W")


def make_record(
    intersection_id: str = "A",
    approach_id: str = "N",
    counts: Optional[Dict[CrashType, int]] = None,
    **fields,
) -> ApproachRecord:
    values = dict(
        aadt_total=12000,
        aadt_through=9000,
        aadt_left=2000,
        aadt_right=1000,
        lanes_total=4,
        lanes_through=2,
        lanes_left=1,
        lanes_right=1,
        median_present=1,
        left_turn_offset=0,
        intersection_angle=90.0,
        friction=35.5,
        coordinated=1,
        left_turn_control=2,
        yellow_minus_standard=0.5,
        all_red_minus_standard=1.0,
        flashing_mode=0,
        speed_limit=45.0,
        county=0,
    )
    values.update(fields)
    crash_counts = {crash_type: 0 for crash_type in CrashType}
    crash_counts.update(counts or {})
    return ApproachRecord(
        intersection_id=intersection_id,
        approach_id=approach_id,
        crash_counts=crash_counts,
        **values,
    )


REAR_END_COUNTS = (3, 1, 0, 5, 2, 4, 1, 0, 7, 2, 3, 1)


@pytest.fixture
def toy_dataset() -> Dataset:
    """3 intersections x 4 approaches with varied volumes and counts"""
    records = []
    for k in range(12):
        through, left, right = 5000 + 1000 * k, 800 + 100 * k, 400 + 50 * k
        records.append(
            make_record(
                intersection_id="ABC"[k // 4],
                approach_id=LEGS[k % 4],
                counts={
                    CrashType.REAR_END: REAR_END_COUNTS[k],
                    CrashType.SIDESWIPE: k % 3,
                    CrashType.RIGHT_ANGLE: (k * 7) % 4,
                    CrashType.OPPOSING_LEFT_TURN: k % 2,
                    CrashType.CROSSING_LEFT_TURN: (k + 1) % 3,
                },
                aadt_total=through + left + right,
                aadt_through=through,
                aadt_left=left,
                aadt_right=right,
                lanes_right=k % 2,
                lanes_total=3 + k % 2,
                left_turn_control=k % 3,
                coordinated=(k // 4) % 2,
                friction=30.0 + 0.75 * k,
                speed_limit=35.0 + 5 * (k % 3),
                yellow_minus_standard=0.25 * (k % 4),
                flashing_mode=k % 2,
            )
        )
    return Dataset(records=tuple(records))


@pytest.fixture
def toy_csv(tmp_path: Path, toy_dataset: Dataset) -> Path:
    path = tmp_path / "toy.csv"
    write_dataset(toy_dataset, path)
    return path


@pytest.fixture
def short_sampler() -> SamplerConfig:
    return SamplerConfig(n_chains=2, n_iterations=300, n_burnin=100, seed=11, n_workers=1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)
