"""Labeled sequence generation, calibration and per-sequence UQ evaluation.

Simulation (sampling rollouts and grouping narrations) is separated from
verification so several verifiers can score the very same option sets.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from upsteer.conformal import SCORE_FUNCTIONS, LabeledPhase, Threshold, calibrate_quantile
from upsteer.expert import drive_to_goal
from upsteer.scenario import Scenario
from upsteer.steering import PHASES, Method
from upsteer.verifier import Shaping, VerifierConfig, group_narrations, true_label_set
from upsteer.world import Narration, Phase, sample_rollouts

SAMPLE_STREAM = 101
SCORE_STREAM = 202
_SHAPING_TAG = {Shaping.VANILLA: 0, Shaping.BAYESIAN: 1}


def parallel_map(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """Order-preserving map; with ``workers > 1`` items run in worker processes."""
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


@dataclass(frozen=True)
class SimulatedSequence:
    """Grouped options and ground-truth label sets for every phase of one scenario."""

    scenario: Scenario
    options: tuple
    labels: tuple


def simulate_sequence(scenario: Scenario, K: int, sampler=sample_rollouts) -> SimulatedSequence:
    """Sample K rollouts per phase, advancing through a correct grasp between phases.

    If no sample grasps the object the expert completes the grasp so the
    placing phase still starts from a holding state.
    """
    rng = np.random.default_rng([scenario.seed, SAMPLE_STREAM])
    params = scenario.policy_params
    state = scenario.initial_state
    options, labels = [], []
    for phase in PHASES:
        state = state.with_phase(phase)
        samples = sampler(state, params, K, rng)
        opts = group_narrations([s.outcome for s in samples])
        options.append(opts)
        labels.append(true_label_set(opts, scenario.instruction))
        if phase is Phase.GRASP:
            good = [s for s in samples if s.outcome is Narration.GRASP_SUCCESS]
            if good:
                state = good[0].terminal
            else:
                done = drive_to_goal(state, scenario.hidden_intent, params.horizon)
                if done is None:
                    raise RuntimeError(f"expert failed to grasp in scenario {scenario.index}")
                state = done[0]
    return SimulatedSequence(scenario, tuple(options), tuple(labels))


def score_rng(scenario: Scenario, verifier: VerifierConfig) -> np.random.Generator:
    return np.random.default_rng([scenario.seed, SCORE_STREAM, _SHAPING_TAG[verifier.shaping]])


def score_sequence(seq: SimulatedSequence, verifier: VerifierConfig) -> tuple:
    rng = score_rng(seq.scenario, verifier)
    instruction = seq.scenario.instruction
    return tuple(
        LabeledPhase(verifier.score(opts, instruction, rng), lab)
        for opts, lab in zip(seq.options, seq.labels)
    )


def calibrate_method(method: Method, scored: Sequence, epsilon: float) -> Optional[Threshold]:
    """Threshold for conformal constructors; ``None`` for ones that need no calibration."""
    family = method.family
    if family is None:
        return None
    scores = [SCORE_FUNCTIONS[family](seq) for seq in scored]
    return calibrate_quantile(scores, epsilon, family)


@dataclass(frozen=True)
class SequenceResult:
    covered: bool
    phase_covered: tuple
    clarify: bool
    set_size: int


def evaluate_sequence(method: Method, thr, epsilon: float, phases) -> SequenceResult:
    """Coverage needs every true label in every phase's set; set size is the largest phase set."""
    sets = [method.prediction_set(ph.probs, thr, epsilon) for ph in phases]
    per_phase = tuple(ph.true_labels <= s for ph, s in zip(phases, sets))
    return SequenceResult(all(per_phase), per_phase, any(len(s) > 1 for s in sets), max(len(s) for s in sets))


def summarize(results: Sequence[SequenceResult]) -> dict:
    if not results:
        warnings.warn("summarizing an empty slice")
        return {"coverage": float("nan"), "clarification_rate": float("nan"), "set_size": float("nan")}
    return {
        "coverage": float(np.mean([r.covered for r in results])),
        "clarification_rate": float(np.mean([r.clarify for r in results])),
        "set_size": float(np.mean([r.set_size for r in results])),
    }


def phase_coverage(results: Sequence[SequenceResult]) -> np.ndarray:
    """Coverage rate of each phase separately."""
    return np.mean([r.phase_covered for r in results], axis=0)
