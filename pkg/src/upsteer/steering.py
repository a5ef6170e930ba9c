"""Mapping prediction sets to execute / clarify / intervene, and closed-loop episodes."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from upsteer.conformal import (
    ScoreFamily,
    Threshold,
    prediction_set_aps,
    prediction_set_cp,
    prediction_set_simple,
)
from upsteer.scenario import ConfigurationError, InstructionSpec, Scenario
from upsteer.verifier import OptionSet, Shaping, VerifierConfig, group_narrations
from upsteer.world import Mode, Narration, Phase, SimState, realizes, replay, sample_rollouts

PHASES = (Phase.GRASP, Phase.PLACE)
MAX_CLARIFICATIONS = 3


class Strategy(str, enum.Enum):
    EXECUTE = "Execute"
    CLARIFY = "Clarify"
    INTERVENE = "Intervene"


@dataclass(frozen=True)
class Resolution:
    strategy: Strategy
    option: Optional[int] = None

    def __str__(self):
        return f"Execute({self.option})" if self.strategy is Strategy.EXECUTE else self.strategy.value


class Confusion(str, enum.Enum):
    TP = "TP"
    TN = "TN"
    FP = "FP"
    FN = "FN"


def decide(pred_set, none_index: int) -> Resolution:
    """Singleton sample option -> execute; several options -> clarify; otherwise intervene.

    An empty set is treated like ``{none}``.
    """
    members = frozenset(pred_set)
    if len(members) > 1:
        return Resolution(Strategy.CLARIFY)
    if len(members) == 1:
        (only,) = members
        if only != none_index:
            return Resolution(Strategy.EXECUTE, only)
    return Resolution(Strategy.INTERVENE)


def clarify(instruction: InstructionSpec, pred_set, oracle_intent: Mode) -> InstructionSpec:
    """Ask the user which intent they meant; the answer replaces the instruction."""
    if len(pred_set) <= 1:
        raise ValueError("clarification needs a prediction set with more than one option")
    if instruction.clarified:
        raise ValueError("instruction is already clarified")
    if oracle_intent not in instruction.intent_support:
        raise ConfigurationError(f"oracle intent {oracle_intent} outside the instruction support")
    return InstructionSpec.straightforward(oracle_intent, clarified=True)


def classify_outcome(
    resolution: Resolution,
    hidden_intent: Mode,
    executed_outcome: Optional[Narration],
    any_sample_matched: bool,
) -> Confusion:
    if resolution.strategy is Strategy.EXECUTE:
        ok = executed_outcome is not None and realizes(executed_outcome, hidden_intent)
        return Confusion.TP if ok else Confusion.FP
    return Confusion.FN if any_sample_matched else Confusion.TN


class Constructor(str, enum.Enum):
    CP = "CP"
    SIMPLE = "SimpleSet"
    APS = "APS"
    ARGMAX = "Argmax"


@dataclass(frozen=True)
class Method:
    constructor: Constructor
    verifier: VerifierConfig = VerifierConfig()
    score_family: ScoreFamily = ScoreFamily.MIN_MIN

    @property
    def name(self) -> str:
        base = f"{self.constructor.value}:{self.verifier.shaping.value}"
        if self.constructor is Constructor.CP and self.score_family is not ScoreFamily.MIN_MIN:
            base += f":{self.score_family.value}"
        return base

    @property
    def family(self) -> Optional[ScoreFamily]:
        if self.constructor is Constructor.CP:
            return self.score_family
        if self.constructor is Constructor.APS:
            return ScoreFamily.APS
        return None

    def prediction_set(self, probs, thr: Optional[Threshold], epsilon: float) -> frozenset:
        if self.constructor is Constructor.CP:
            return prediction_set_cp(probs, thr)
        if self.constructor is Constructor.APS:
            return prediction_set_aps(probs, thr)
        if self.constructor is Constructor.SIMPLE:
            return prediction_set_simple(probs, epsilon)
        return frozenset({int(np.argmax(probs))})


def parse_method(spec: str, verifier: Optional[VerifierConfig] = None) -> Method:
    """Parse ``<constructor>:<shaping>[:<score family>]``, e.g. ``CP:BayesianIntent``."""
    try:
        parts = spec.split(":")
        if len(parts) not in (2, 3):
            raise ValueError("wrong number of fields")
        family = ScoreFamily(parts[2]) if len(parts) == 3 else ScoreFamily.MIN_MIN
        base = verifier or VerifierConfig()
        v = dataclasses.replace(base, shaping=Shaping(parts[1]))
        return Method(Constructor(parts[0]), v, family)
    except ValueError as exc:
        raise ValueError(f"bad method spec {spec!r}: expected <constructor>:<shaping>") from exc


@dataclass(frozen=True)
class PhaseRecord:
    phase: Phase
    options: OptionSet
    probs: tuple
    pred_set: tuple
    resolution: Resolution
    any_sample_matched: bool

    def to_dict(self) -> dict:
        return {
            "phase": self.phase.value,
            "options": [self.options.option_name(i) for i in range(self.options.n_options)],
            "probs": [round(p, 12) for p in self.probs],
            "set": list(self.pred_set),
            "resolution": str(self.resolution),
        }


@dataclass(frozen=True)
class EpisodeOutcome:
    confusion: Confusion
    clarification_count: int
    executed_outcome: Optional[Narration]
    success: bool
    phases: tuple = ()
    intervened_phase: Optional[Phase] = None
    intervene_state: Optional[SimState] = None
    instruction: Optional[InstructionSpec] = None
    samples: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        if self.success != (self.confusion is Confusion.TP):
            raise ValueError("success must coincide with a true positive")

    def to_record(self, scenario: Scenario, method_name: str) -> dict:
        return {
            "scenario": scenario.index,
            "seed": scenario.seed,
            "category": scenario.category.value,
            "method": method_name,
            "confusion": self.confusion.value,
            "clarifications": self.clarification_count,
            "executed_outcome": None if self.executed_outcome is None else self.executed_outcome.value,
            "success": self.success,
            "intervened_phase": None if self.intervened_phase is None else self.intervened_phase.value,
            "phases": [p.to_dict() for p in self.phases],
        }


Sampler = Callable[[SimState, object, int, np.random.Generator], list]


def run_episode(
    scenario: Scenario,
    method: Method,
    thr: Optional[Threshold],
    K: int,
    epsilon: float = 0.15,
    max_clarifications: int = MAX_CLARIFICATIONS,
    sampler: Sampler = sample_rollouts,
    rng: Optional[np.random.Generator] = None,
) -> EpisodeOutcome:
    """Closed-loop steering for one scenario, phase by phase.

    Per phase: sample K imagined rollouts, group their narrations, score,
    build the set and act. Clarification re-verifies the same samples under
    the updated instruction; an intervention ends the episode.
    """
    rng = np.random.default_rng(scenario.seed) if rng is None else rng
    sample_rng, verify_rng = rng.spawn(2)
    hidden = scenario.hidden_intent
    instruction = scenario.instruction
    state = scenario.initial_state
    records = []
    clarifications = 0
    executed = None

    def finish(confusion, **kw):
        return EpisodeOutcome(
            confusion,
            clarifications,
            kw.pop("executed", None),
            confusion is Confusion.TP,
            tuple(records),
            instruction=instruction,
            **kw,
        )

    for phase in PHASES:
        state = state.with_phase(phase)
        samples = sampler(state, scenario.policy_params, K, sample_rng)
        options = group_narrations([s.outcome for s in samples])
        matched = any(realizes(s.outcome, hidden) for s in samples)
        while True:
            probs = method.verifier.score(options, instruction, verify_rng)
            pred = method.prediction_set(probs, thr, epsilon)
            res = decide(pred, options.none_index)
            records.append(PhaseRecord(phase, options, tuple(map(float, probs)), tuple(sorted(pred)), res, matched))
            if res.strategy is not Strategy.CLARIFY:
                break
            if clarifications >= max_clarifications:
                return finish(Confusion.FN)
            clarifications += 1
            if not instruction.clarified:
                instruction = clarify(instruction, pred, hidden)

        if res.strategy is Strategy.INTERVENE:
            return finish(
                classify_outcome(res, hidden, None, matched),
                intervened_phase=phase,
                intervene_state=state,
                samples=tuple(samples),
            )

        chosen = samples[options.members[res.option][0]]
        state = replay(state, chosen.actions)[-1]
        executed = chosen.outcome
        if not realizes(executed, hidden):
            return finish(classify_outcome(res, hidden, executed, matched), executed=executed)

    return finish(classify_outcome(res, hidden, executed, matched), executed=executed)
