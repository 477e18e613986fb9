"""Published posterior summaries of the five approach-level crash type models.

Each entry lists the covariates retained in the published model and the
posterior mean and standard deviation of every parameter. They serve as default
covariate selections, as default true values of the synthetic generator, and as
reference columns in reports.
"""

from typing import Dict, Tuple

from pydantic import BaseModel

from crashtype_bayes.data_model import CrashType


class ReferenceModel(BaseModel):
    crash_type: CrashType
    covariates: Tuple[str, ...]
    # design column name -> (posterior mean, posterior sd)
    coefficients: Dict[str, Tuple[float, float]]
    r: Tuple[float, float]
    sigma2_phi: Tuple[float, float]

    model_config = {"frozen": True}

    def true_coefficients(self) -> Dict[str, float]:
        return {name: mean for name, (mean, _) in self.coefficients.items()}

    def reference_values(self) -> Dict[str, Tuple[float, float]]:
        """Every published parameter, dispersion and random-effect variance included"""
        values = dict(self.coefficients)
        values["r"] = self.r
        values["sigma2_phi"] = self.sigma2_phi
        return values


REFERENCE_MODELS: Dict[CrashType, ReferenceModel] = {
    CrashType.REAR_END: ReferenceModel(
        crash_type=CrashType.REAR_END,
        covariates=("lanes_right", "friction", "coordinated", "left_turn_control", "speed_limit"),
        coefficients={
            "intercept": (-4.51, 0.4755),
            "log_exposure": (0.658, 0.0436),
            "lanes_right": (0.2522, 0.0627),
            "friction": (-0.0127, 0.0104),
            "coordinated": (0.2394, 0.0738),
            "left_turn_protected": (0.681, 0.1014),
            "left_turn_protected_permissive": (0.3728, 0.0912),
            "speed_limit": (0.01, 0.0053),
        },
        r=(0.2319, 0.0257),
        sigma2_phi=(0.2816, 0.0464),
    ),
    CrashType.OPPOSING_LEFT_TURN: ReferenceModel(
        crash_type=CrashType.OPPOSING_LEFT_TURN,
        covariates=("lanes_through", "median_present", "left_turn_control", "speed_limit"),
        coefficients={
            "intercept": (-5.99, 0.7025),
            "log_exposure": (0.2829, 0.0457),
            "lanes_through": (0.1906, 0.0853),
            "median_present": (0.4062, 0.1401),
            "left_turn_protected": (-0.5272, 0.1716),
            "left_turn_protected_permissive": (0.4506, 0.1458),
            "speed_limit": (0.0434, 0.0087),
        },
        r=(0.7083, 0.0851),
        sigma2_phi=(0.4600, 0.1020),
    ),
    CrashType.CROSSING_LEFT_TURN: ReferenceModel(
        crash_type=CrashType.CROSSING_LEFT_TURN,
        covariates=(
            "opposing_lanes_through",
            "median_present",
            "left_turn_control",
            "near_cross_speed_limit",
        ),
        coefficients={
            "intercept": (-6.88, 0.8952),
            "log_exposure": (0.3828, 0.0463),
            "opposing_lanes_through": (-0.5972, 0.1518),
            "median_present": (-0.1748, 0.2041),
            "left_turn_protected": (0.2788, 0.2368),
            "left_turn_protected_permissive": (0.2033, 0.1953),
            "near_cross_speed_limit": (0.0228, 0.0128),
        },
        r=(0.5690, 0.1934),
        sigma2_phi=(0.3341, 0.1408),
    ),
    CrashType.RIGHT_ANGLE: ReferenceModel(
        crash_type=CrashType.RIGHT_ANGLE,
        covariates=(
            "lanes_through",
            "yellow_minus_standard",
            "all_red_minus_standard",
            "flashing_mode",
        ),
        coefficients={
            "intercept": (-2.416, 0.4293),
            "log_exposure": (0.1748, 0.0266),
            "lanes_through": (-0.1, 0.0557),
            "yellow_minus_standard": (-0.3945, 0.1287),
            "all_red_minus_standard": (-0.1137, 0.0754),
            "flashing_mode": (0.5, 0.1999),
        },
        r=(0.1238, 0.0657),
        sigma2_phi=(0.2908, 0.0681),
    ),
    CrashType.SIDESWIPE: ReferenceModel(
        crash_type=CrashType.SIDESWIPE,
        covariates=("lanes_left", "lanes_through", "lanes_right", "left_turn_control"),
        coefficients={
            "intercept": (-7.535, 0.7538),
            "log_exposure": (0.6466, 0.0906),
            "lanes_left": (0.3842, 0.1158),
            "lanes_through": (0.1975, 0.0874),
            "lanes_right": (0.2615, 0.1025),
            "left_turn_protected": (0.5328, 0.1728),
            "left_turn_protected_permissive": (0.4613, 0.1537),
        },
        r=(0.064, 0.0518),
        sigma2_phi=(0.3677, 0.0879),
    ),
}
