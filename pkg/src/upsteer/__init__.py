"""Uncertainty-aware policy steering in a toy pick-and-place world."""

from upsteer.conformal import (
    InsufficientCalibrationData,
    ScoreFamily,
    Threshold,
    calibrate_quantile,
    prediction_set_aps,
    prediction_set_cp,
    prediction_set_simple,
)
from upsteer.harness import MetricsReport, RunConfig, build_calibration_set, evaluate, intervention_rate, report
from upsteer.residual import ResidualModel, collect_intervention, mixed_sample, recalibrate, train_residual
from upsteer.scenario import Category, ConfigurationError, InstructionSpec, Scenario, generate_scenario
from upsteer.steering import Method, Strategy, clarify, decide, parse_method, run_episode
from upsteer.verifier import MiscalibrationProfile, Shaping, VerifierConfig, bayesian_intent_scores
from upsteer.world import Mode, Narration, Phase, PolicyParams, SimState, imagine_rollout, sample_rollouts

__version__ = "0.1.0"


__all__ = [
    "Category",
    "ConfigurationError",
    "InstructionSpec",
    "InsufficientCalibrationData",
    "Method",
    "MetricsReport",
    "MiscalibrationProfile",
    "Mode",
    "Narration",
    "Phase",
    "PolicyParams",
    "ResidualModel",
    "RunConfig",
    "Scenario",
    "ScoreFamily",
    "Shaping",
    "SimState",
    "Strategy",
    "Threshold",
    "VerifierConfig",
    "bayesian_intent_scores",
    "build_calibration_set",
    "calibrate_quantile",
    "clarify",
    "collect_intervention",
    "decide",
    "evaluate",
    "generate_scenario",
    "imagine_rollout",
    "intervention_rate",
    "mixed_sample",
    "parse_method",
    "prediction_set_aps",
    "prediction_set_cp",
    "prediction_set_simple",
    "recalibrate",
    "report",
    "run_episode",
    "sample_rollouts",
    "train_residual",
]
