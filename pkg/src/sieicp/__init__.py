"""Rigid point-cloud registration with statistical inlier estimation."""

from .costs import CostKind, WeightFunction
from .geometry import (Correspondences, PointCloud, ResidualMatrix, ResidualMode, RigidTransform,
                       match_nearest, solve_weighted_transform)
from .registration import RegistrationConfig, RegistrationResult, register
from .sie import InlierModel, NoiseModel, SIEConfig, fit_inlier_model

__all__ = [
    "CostKind", "WeightFunction", "Correspondences", "PointCloud", "ResidualMatrix", "ResidualMode",
    "RigidTransform", "match_nearest", "solve_weighted_transform", "RegistrationConfig",
    "RegistrationResult", "register", "InlierModel", "NoiseModel", "SIEConfig", "fit_inlier_model",
]
