"""Episode setups: instructions, categories, mix configuration and generation."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from upsteer.world import INTENT_MODES, Mode, Phase, PolicyParams, SimState


class ConfigurationError(ValueError):
    pass


class Category(str, enum.Enum):
    CAPABLE = "StraightforwardCapable"
    INCAPABLE = "StraightforwardIncapable"
    AMBIGUOUS = "Ambiguous"


CATEGORIES = (Category.CAPABLE, Category.INCAPABLE, Category.AMBIGUOUS)


@dataclass(frozen=True)
class InstructionSpec:
    intent_support: tuple
    intent_prior: tuple
    clarified: bool = False

    def __post_init__(self):
        if not self.intent_support:
            raise ValueError("instruction needs a nonempty intent support")
        if len(set(self.intent_support)) != len(self.intent_support):
            raise ValueError("intent support has duplicates")
        if len(self.intent_prior) != len(self.intent_support):
            raise ValueError("prior and support lengths differ")
        if abs(sum(self.intent_prior) - 1.0) > 1e-9 or min(self.intent_prior) < 0:
            raise ValueError("intent prior must be a probability vector")
        if self.clarified and len(self.intent_support) != 1:
            raise ValueError("a clarified instruction has exactly one intent")

    @classmethod
    def ambiguous(cls) -> "InstructionSpec":
        return cls(INTENT_MODES, (0.5, 0.5))

    @classmethod
    def straightforward(cls, mode: Mode, clarified: bool = False) -> "InstructionSpec":
        return cls((mode,), (1.0,), clarified)

    @property
    def is_ambiguous(self) -> bool:
        return len(self.intent_support) > 1


@dataclass(frozen=True)
class MixConfig:
    """Mode-weight ranges per category, plus the shared policy knobs."""

    ambiguous_fail: tuple = (0.0, 0.1)
    ambiguous_left_share: tuple = (0.4, 0.6)
    capable_instructed: tuple = (0.5, 0.9)
    capable_fail: tuple = (0.0, 0.1)
    incapable_instructed: tuple = (0.0, 0.02)
    incapable_fail: tuple = (0.1, 0.3)
    incapable_mode: Mode = Mode.PLACE_LEFT
    waypoint_noise_sigma: float = 0.05
    grasp_success_prob: float = 0.95
    chunk_length: int = 4
    horizon: int = 16

    def __post_init__(self):
        ranges = {
            k: v for k, v in asdict(self).items() if isinstance(v, tuple)
        }
        for name, (lo, hi) in ranges.items():
            if not 0.0 <= lo <= hi <= 1.0:
                raise ConfigurationError(f"{name} range {(lo, hi)} must satisfy 0 <= lo <= hi <= 1")
        if self.incapable_instructed[1] > 0.02:
            raise ConfigurationError("incapable scenarios may give the instructed mode at most 0.02")
        if self.capable_instructed[0] <= 0.02:
            raise ConfigurationError("capable scenarios need instructed weight above 0.02")
        if self.incapable_mode not in INTENT_MODES:
            raise ConfigurationError("incapable_mode must be PlaceLeft or PlaceRight")


@dataclass(frozen=True)
class Scenario:
    instruction: InstructionSpec
    hidden_intent: Mode
    initial_state: SimState
    policy_params: PolicyParams
    seed: int
    category: Category
    index: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.hidden_intent not in self.instruction.intent_support:
            raise ConfigurationError("hidden intent outside the instruction's support")
        if self.category is Category.INCAPABLE:
            if self.policy_params.weight(self.hidden_intent) > 0.02:
                raise ConfigurationError("incapable scenario gives the instructed mode > 0.02")


def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _weights(left: float, right: float, fail: float) -> tuple:
    w = np.array([left, right, fail], dtype=float)
    w = np.clip(w, 0.0, None)
    w = w / w.sum()
    return tuple(float(x) for x in w)


def generate_scenario(
    category: Category,
    mix: MixConfig,
    rng: np.random.Generator,
    demanded_mode: Optional[Mode] = None,
    index: int = 0,
) -> Scenario:
    category = Category(category)
    other = {Mode.PLACE_LEFT: Mode.PLACE_RIGHT, Mode.PLACE_RIGHT: Mode.PLACE_LEFT}

    if category is Category.AMBIGUOUS:
        instruction = InstructionSpec.ambiguous()
        hidden = INTENT_MODES[int(rng.integers(2))]
        fail = _uniform(rng, mix.ambiguous_fail)
        share = _uniform(rng, mix.ambiguous_left_share)
        weights = _weights((1 - fail) * share, (1 - fail) * (1 - share), fail)
    else:
        if category is Category.INCAPABLE:
            mode = demanded_mode or mix.incapable_mode
            instructed = _uniform(rng, mix.incapable_instructed)
            fail = _uniform(rng, mix.incapable_fail)
        else:
            mode = demanded_mode or INTENT_MODES[int(rng.integers(2))]
            instructed = _uniform(rng, mix.capable_instructed)
            fail = min(_uniform(rng, mix.capable_fail), 1.0 - instructed)
        rest = max(0.0, 1.0 - instructed - fail)
        by_mode = {mode: instructed, other[mode]: rest}
        weights = _weights(by_mode[Mode.PLACE_LEFT], by_mode[Mode.PLACE_RIGHT], fail)
        instruction = InstructionSpec.straightforward(mode)
        hidden = mode

    gripper = (_uniform(rng, (-1.5, 1.5)), _uniform(rng, (-1.5, -0.5)))
    obj = (_uniform(rng, (-1.0, 1.0)), _uniform(rng, (-1.0, 0.0)))
    state = SimState(gripper, obj, holding=False, phase=Phase.GRASP)
    params = PolicyParams(
        mode_weights=weights,
        waypoint_noise_sigma=mix.waypoint_noise_sigma,
        grasp_success_prob=mix.grasp_success_prob,
        chunk_length=mix.chunk_length,
        horizon=mix.horizon,
    )
    seed = int(rng.integers(0, 2**63 - 1))
    return Scenario(instruction, hidden, state, params, seed, category, index)


def scenario_to_record(s: Scenario) -> dict:
    return {
        "index": s.index,
        "category": s.category.value,
        "support": [m.value for m in s.instruction.intent_support],
        "prior": list(s.instruction.intent_prior),
        "hidden_intent": s.hidden_intent.value,
        "seed": s.seed,
        "mode_weights": list(s.policy_params.mode_weights),
        "waypoint_noise_sigma": s.policy_params.waypoint_noise_sigma,
        "grasp_success_prob": s.policy_params.grasp_success_prob,
        "chunk_length": s.policy_params.chunk_length,
        "horizon": s.policy_params.horizon,
        "gripper_pos": list(s.initial_state.gripper_pos),
        "object_pos": list(s.initial_state.object_pos),
    }


def scenario_from_record(rec: dict) -> Scenario:
    support = tuple(Mode(m) for m in rec["support"])
    instruction = InstructionSpec(support, tuple(rec["prior"]))
    params = PolicyParams(
        mode_weights=tuple(rec["mode_weights"]),
        waypoint_noise_sigma=rec["waypoint_noise_sigma"],
        grasp_success_prob=rec["grasp_success_prob"],
        chunk_length=rec["chunk_length"],
        horizon=rec["horizon"],
    )
    state = SimState(tuple(rec["gripper_pos"]), tuple(rec["object_pos"]))
    return Scenario(
        instruction,
        Mode(rec["hidden_intent"]),
        state,
        params,
        int(rec["seed"]),
        Category(rec["category"]),
        int(rec.get("index", 0)),
    )


def write_scenarios(path, scenarios: Iterable[Scenario], extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for s in scenarios:
            rec = scenario_to_record(s)
            if extra:
                rec.update(extra)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_scenarios(path) -> list:
    with Path(path).open() as fh:
        return [scenario_from_record(json.loads(line)) for line in fh if line.strip()]
