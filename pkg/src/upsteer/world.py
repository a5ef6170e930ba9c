"""Toy pick-and-place world: base policy sampler, exact dynamics, interleaved
imagination rollouts and symbolic outcome narration.

The world model is exact, so "imagining" a rollout and executing it are the
same computation. Everything here is a pure function of its inputs and an
explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

WORLD_LIMIT = 2.0
MAX_STEP = 0.5
GRASP_RADIUS = 0.15
BIN_RADIUS = 0.2
BIN_LEFT = (-1.0, 1.0)
BIN_RIGHT = (1.0, 1.0)
# Fail-mode endpoints keep this distance from both bins so noisy drops stay outside.
FAIL_MARGIN = 0.6

Vec = tuple  # (x, y) pair of floats


class Phase(str, enum.Enum):
    GRASP = "Grasp"
    PLACE = "Place"


class Mode(str, enum.Enum):
    PLACE_LEFT = "PlaceLeft"
    PLACE_RIGHT = "PlaceRight"
    FAIL = "Fail"


MODES = (Mode.PLACE_LEFT, Mode.PLACE_RIGHT, Mode.FAIL)
INTENT_MODES = (Mode.PLACE_LEFT, Mode.PLACE_RIGHT)


class Grip(str, enum.Enum):
    OPEN = "Open"
    CLOSE = "Close"
    HOLD = "Hold"


GRIP_VALUE = {Grip.OPEN: -1.0, Grip.HOLD: 0.0, Grip.CLOSE: 1.0}


def grip_from_value(value: float) -> Grip:
    """Snap a continuous gripper command back onto the discrete grip set."""
    if value <= -0.5:
        return Grip.OPEN
    if value >= 0.5:
        return Grip.CLOSE
    return Grip.HOLD


class Narration(str, enum.Enum):
    GRASP_SUCCESS = "GraspSuccess"
    GRASP_MISS = "GraspMiss"
    PLACE_LEFT = "PlaceLeft"
    PLACE_RIGHT = "PlaceRight"
    DROP = "Drop"


PHASE_LABELS = {
    Phase.GRASP: (Narration.GRASP_SUCCESS, Narration.GRASP_MISS),
    Phase.PLACE: (Narration.PLACE_LEFT, Narration.PLACE_RIGHT, Narration.DROP),
}


def realizes(label: Narration, intent: Mode) -> bool:
    """Whether an outcome label is consistent with a user intent.

    A successful grasp serves every placing intent; a drop or miss serves none.
    """
    if label is Narration.GRASP_SUCCESS:
        return True
    if label is Narration.PLACE_LEFT:
        return intent is Mode.PLACE_LEFT
    if label is Narration.PLACE_RIGHT:
        return intent is Mode.PLACE_RIGHT
    return False


def _clip(v: float, lo: float, hi: float) -> float:
    return lo if v < lo else hi if v > hi else v


def _dist(a: Vec, b: Vec) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


@dataclass(frozen=True)
class SimState:
    gripper_pos: Vec
    object_pos: Vec
    holding: bool = False
    phase: Phase = Phase.GRASP
    bin_left: Vec = BIN_LEFT
    bin_right: Vec = BIN_RIGHT

    def __post_init__(self):
        for p in (self.gripper_pos, self.object_pos):
            if not all(-WORLD_LIMIT <= c <= WORLD_LIMIT for c in p):
                raise ValueError(f"position {p} outside the workspace")

    def with_phase(self, phase: Phase) -> "SimState":
        return replace(self, phase=phase)

    def features(self) -> np.ndarray:
        """State features scaled into [-1, 1]."""
        return np.array(
            [
                self.gripper_pos[0] / WORLD_LIMIT,
                self.gripper_pos[1] / WORLD_LIMIT,
                self.object_pos[0] / WORLD_LIMIT,
                self.object_pos[1] / WORLD_LIMIT,
                1.0 if self.holding else -1.0,
                1.0 if self.phase is Phase.PLACE else -1.0,
            ]
        )


@dataclass(frozen=True)
class Action:
    delta: Vec
    grip: Grip = Grip.HOLD

    def as_array(self) -> np.ndarray:
        return np.array([self.delta[0], self.delta[1], GRIP_VALUE[self.grip]])

    @classmethod
    def from_array(cls, arr) -> "Action":
        dx = _clip(float(arr[0]), -MAX_STEP, MAX_STEP)
        dy = _clip(float(arr[1]), -MAX_STEP, MAX_STEP)
        return cls((dx, dy), grip_from_value(float(arr[2])))


ActionChunk = tuple  # tuple[Action, ...] of length H


@dataclass(frozen=True)
class PolicyParams:
    mode_weights: tuple = (0.5, 0.5, 0.0)  # PlaceLeft, PlaceRight, Fail
    waypoint_noise_sigma: float = 0.05
    grasp_success_prob: float = 0.95
    chunk_length: int = 4
    horizon: int = 16

    def __post_init__(self):
        w = self.mode_weights
        if len(w) != 3 or any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"mode_weights must be 3 nonnegative values summing to 1, got {w}")
        if self.waypoint_noise_sigma < 0:
            raise ValueError("waypoint_noise_sigma must be nonnegative")
        if not 0.0 <= self.grasp_success_prob <= 1.0:
            raise ValueError("grasp_success_prob must lie in [0, 1]")
        if self.chunk_length < 1 or self.horizon < 1 or self.horizon % self.chunk_length:
            raise ValueError("horizon must be a positive multiple of chunk_length")

    def weight(self, mode: Mode) -> float:
        return self.mode_weights[MODES.index(mode)]


@dataclass(frozen=True)
class TrajectorySample:
    phase: Phase
    mode: Mode
    actions: tuple  # length T
    states: tuple  # length T + 1
    outcome: Narration = field(default=None)

    @property
    def terminal(self) -> SimState:
        return self.states[-1]


def step_dynamics(state: SimState, action: Action) -> SimState:
    dx = _clip(action.delta[0], -MAX_STEP, MAX_STEP)
    dy = _clip(action.delta[1], -MAX_STEP, MAX_STEP)
    gx = _clip(state.gripper_pos[0] + dx, -WORLD_LIMIT, WORLD_LIMIT)
    gy = _clip(state.gripper_pos[1] + dy, -WORLD_LIMIT, WORLD_LIMIT)
    obj = state.object_pos
    if state.holding:
        ox = _clip(obj[0] + gx - state.gripper_pos[0], -WORLD_LIMIT, WORLD_LIMIT)
        oy = _clip(obj[1] + gy - state.gripper_pos[1], -WORLD_LIMIT, WORLD_LIMIT)
        obj = (ox, oy)
    holding = state.holding
    if action.grip is Grip.CLOSE and not holding:
        holding = _dist((gx, gy), obj) <= GRASP_RADIUS
    elif action.grip is Grip.OPEN:
        holding = False
    return SimState((gx, gy), obj, holding, state.phase, state.bin_left, state.bin_right)


def sample_fail_point(state: SimState, rng: np.random.Generator) -> Vec:
    """Uniform point in the workspace that is far from both bins."""
    while True:
        p = tuple(float(c) for c in rng.uniform(-WORLD_LIMIT * 0.9, WORLD_LIMIT * 0.9, size=2))
        if _dist(p, state.bin_left) > FAIL_MARGIN and _dist(p, state.bin_right) > FAIL_MARGIN:
            return p


def mode_goal(state: SimState, mode: Mode, rng: np.random.Generator) -> Vec:
    if state.phase is Phase.GRASP:
        return state.object_pos
    if mode is Mode.PLACE_LEFT:
        return state.bin_left
    if mode is Mode.PLACE_RIGHT:
        return state.bin_right
    return sample_fail_point(state, rng)


def sample_action_chunk(
    state: SimState, params: PolicyParams, target_mode: Mode, rng: np.random.Generator
) -> ActionChunk:
    """Noisy straight-line waypoint segment toward the mode's goal.

    The plan covers the remaining distance in ``H`` equal steps (clipped to the
    per-step bound); Gaussian noise perturbs each waypoint, so the chunk's
    endpoint error does not grow with ``H``. The final step closes (grasp) or
    opens (place) the gripper only if the unclipped plan reaches the goal.
    """
    H = params.chunk_length
    goal = mode_goal(state, target_mode, rng)
    gx, gy = state.gripper_pos
    raw_dx = (goal[0] - gx) / H
    raw_dy = (goal[1] - gy) / H
    sx = _clip(raw_dx, -MAX_STEP, MAX_STEP)
    sy = _clip(raw_dy, -MAX_STEP, MAX_STEP)
    reaches = sx == raw_dx and sy == raw_dy
    sigma = params.waypoint_noise_sigma
    noise = rng.normal(0.0, sigma, size=(H, 2)) if sigma > 0 else np.zeros((H, 2))

    if state.phase is Phase.GRASP:
        final_grip = Grip.HOLD
        if reaches and rng.random() < params.grasp_success_prob:
            final_grip = Grip.CLOSE
    else:
        final_grip = Grip.OPEN if reaches else Grip.HOLD

    steps = []
    prev = (0.0, 0.0)
    for j in range(H):
        wx = (j + 1) * sx + noise[j, 0]
        wy = (j + 1) * sy + noise[j, 1]
        delta = (_clip(wx - prev[0], -MAX_STEP, MAX_STEP), _clip(wy - prev[1], -MAX_STEP, MAX_STEP))
        prev = (wx, wy)
        steps.append(Action(delta, final_grip if j == H - 1 else Grip.HOLD))
    return tuple(steps)


def draw_mode(params: PolicyParams, rng: np.random.Generator) -> Mode:
    return MODES[int(rng.choice(3, p=np.asarray(params.mode_weights)))]


ActionHook = Callable[[SimState, Action], Action]


def imagine_rollout(
    state: SimState,
    params: PolicyParams,
    rng: np.random.Generator,
    mode: Optional[Mode] = None,
    action_hook: Optional[ActionHook] = None,
) -> TrajectorySample:
    """Interleave chunk generation and world-model imagination for one phase.

    Each chunk is generated from the last imagined state, rolled through the
    dynamics, and the process repeats ``T / H`` times. ``action_hook`` lets a
    residual corrector rewrite individual base actions before they are applied.
    """
    if mode is None:
        mode = draw_mode(params, rng)
    actions = []
    states = [state]
    current = state
    for _ in range(params.horizon // params.chunk_length):
        for a in sample_action_chunk(current, params, mode, rng):
            if action_hook is not None:
                a = action_hook(current, a)
            current = step_dynamics(current, a)
            actions.append(a)
            states.append(current)
    return TrajectorySample(state.phase, mode, tuple(actions), tuple(states), narrate_state(current))


def narrate_state(state: SimState) -> Narration:
    if state.phase is Phase.GRASP:
        return Narration.GRASP_SUCCESS if state.holding else Narration.GRASP_MISS
    if _dist(state.object_pos, state.bin_left) <= BIN_RADIUS:
        return Narration.PLACE_LEFT
    if _dist(state.object_pos, state.bin_right) <= BIN_RADIUS:
        return Narration.PLACE_RIGHT
    return Narration.DROP


def narrate(traj: TrajectorySample, phase: Optional[Phase] = None) -> Narration:
    phase = traj.phase if phase is None else phase
    return narrate_state(traj.terminal.with_phase(phase))


def replay(state: SimState, actions: Sequence[Action]) -> tuple:
    states = [state]
    for a in actions:
        states.append(step_dynamics(states[-1], a))
    return tuple(states)


def sample_rollouts(
    state: SimState,
    params: PolicyParams,
    K: int,
    rng: np.random.Generator,
) -> list:
    """K independent imagination rollouts, one child RNG stream each."""
    return [imagine_rollout(state, params, child) for child in rng.spawn(K)]
