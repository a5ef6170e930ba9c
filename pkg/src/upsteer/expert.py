"""Scripted expert: a straight-line planner toward the user's intended goal."""

from __future__ import annotations

import math

from upsteer.world import BIN_RADIUS, Action, Grip, Mode, Phase, SimState, step_dynamics

EXPERT_SPEED = 0.25


def intent_goal(state: SimState, intent: Mode):
    if state.phase is Phase.GRASP:
        return state.object_pos
    return state.bin_left if intent is Mode.PLACE_LEFT else state.bin_right


def expert_action(state: SimState, intent: Mode) -> Action:
    """Move at fixed speed toward the goal; close or open the gripper on arrival."""
    goal = intent_goal(state, intent)
    dx = goal[0] - state.gripper_pos[0]
    dy = goal[1] - state.gripper_pos[1]
    if max(abs(dx), abs(dy)) <= EXPERT_SPEED:
        return Action((dx, dy), Grip.CLOSE if state.phase is Phase.GRASP else Grip.OPEN)
    clip = lambda v: max(-EXPERT_SPEED, min(EXPERT_SPEED, v))
    return Action((clip(dx), clip(dy)), Grip.HOLD)


def phase_goal_reached(state: SimState, intent: Mode) -> bool:
    if state.phase is Phase.GRASP:
        return state.holding
    goal = intent_goal(state, intent)
    d = math.hypot(state.object_pos[0] - goal[0], state.object_pos[1] - goal[1])
    return (not state.holding) and d <= BIN_RADIUS


def drive_to_goal(state: SimState, intent: Mode, max_steps: int):
    """Let the expert finish the current phase; returns (state, steps) or None on timeout."""
    for n in range(max_steps):
        if phase_goal_reached(state, intent):
            return state, n
        state = step_dynamics(state, expert_action(state, intent))
    return (state, max_steps) if phase_goal_reached(state, intent) else None
