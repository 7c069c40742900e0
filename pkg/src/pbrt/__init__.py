"""Brake response time detection, mixed-model estimation and warning-threshold analysis."""
from .detect import BrtObservation, DetectorConfig, StimulusType, detect_all
from .estimator import (
    DriverEstimate,
    DriverStore,
    PbrtDistribution,
    estimate_driver,
    pbrt_distribution,
    population_distribution,
    update,
)
from .lmm import MixedModelParams, adjust_intercepts, build_design, fit, load_model, save_model
from .sim import SimConfig, simulate_kinematics, simulate_observations
from .trajectory import SignalPhaseEvent, VehicleTrack, load_signals, load_tracks
from .warning import ErrorModel, LognormalParams, PopulationModel, far_individual, far_population, threshold

__version__ = "0.1.0"

__all__ = [
    "BrtObservation", "DetectorConfig", "StimulusType", "detect_all",
    "DriverEstimate", "DriverStore", "PbrtDistribution", "estimate_driver", "pbrt_distribution",
    "population_distribution", "update",
    "MixedModelParams", "adjust_intercepts", "build_design", "fit", "load_model", "save_model",
    "SimConfig", "simulate_kinematics", "simulate_observations",
    "SignalPhaseEvent", "VehicleTrack", "load_signals", "load_tracks",
    "ErrorModel", "LognormalParams", "PopulationModel", "far_individual", "far_population", "threshold",
]
