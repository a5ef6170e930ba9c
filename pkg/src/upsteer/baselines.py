"""Intervention-driven comparison policies.

``variance_gated_episode`` asks for help whenever the base policy's sampled
chunks disagree about where to go, in the spirit of ensemble-variance gating.
``human_gated_episode`` approximates a watchful operator who takes over as
soon as the executed plan is headed for the wrong outcome.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from upsteer.expert import expert_action, phase_goal_reached
from upsteer.residual import collect_intervention
from upsteer.scenario import Scenario
from upsteer.world import (
    Phase,
    draw_mode,
    narrate_state,
    realizes,
    sample_action_chunk,
    step_dynamics,
)

DEFAULT_VARIANCE_THRESHOLD = 0.05


@dataclass(frozen=True)
class InterventionLog:
    """Human effort spent on one episode."""

    human_steps: int
    length: int
    success: bool

    @property
    def rate(self) -> float:
        return self.human_steps / self.length


def endpoint_variance(chunks) -> float:
    """Trace of the across-sample covariance of chunk endpoints (relative displacement)."""
    ends = np.array([np.sum([a.delta for a in c], axis=0) for c in chunks])
    return float(ends.var(axis=0).sum())


def variance_gated_episode(
    scenario: Scenario,
    K: int = 10,
    threshold: float = DEFAULT_VARIANCE_THRESHOLD,
    rng: Optional[np.random.Generator] = None,
) -> InterventionLog:
    """Run the base policy with an action-variance help trigger.

    Every H steps K candidate chunks are drawn at the live state. When their
    endpoint variance exceeds ``threshold`` and the phase goal is still open,
    the expert drives the next H steps instead of the policy.
    """
    rng = np.random.default_rng(scenario.seed) if rng is None else rng
    params = scenario.policy_params
    intent = scenario.hidden_intent
    H, T = params.chunk_length, params.horizon
    state = scenario.initial_state
    human = 0
    for phase in (Phase.GRASP, Phase.PLACE):
        state = state.with_phase(phase)
        mode = draw_mode(params, rng)
        for _ in range(T // H):
            streams = rng.spawn(K + 1)
            proposals = [sample_action_chunk(state, params, draw_mode(params, r), r) for r in streams[:K]]
            own = sample_action_chunk(state, params, mode, streams[K])
            done = phase_goal_reached(state, intent)
            if not done and endpoint_variance(proposals) > threshold:
                for a in own:
                    if phase_goal_reached(state, intent):
                        state = step_dynamics(state, a)
                    else:
                        state = step_dynamics(state, expert_action(state, intent))
                        human += 1
            else:
                for a in own:
                    state = step_dynamics(state, a)
        if phase is Phase.GRASP and not state.holding:
            break
    success = state.phase is Phase.PLACE and realizes(narrate_state(state), intent)
    return InterventionLog(human, 2 * T, success)


def human_gated_episode(
    scenario: Scenario, rng: Optional[np.random.Generator] = None
) -> InterventionLog:
    """Oracle takeover whenever the executed sample's outcome misses the intent."""
    rng = np.random.default_rng(scenario.seed) if rng is None else rng
    T = scenario.policy_params.horizon
    trace = collect_intervention(scenario, rng=rng)
    if trace is None:
        return InterventionLog(2 * T, 2 * T, False)
    return InterventionLog(trace.human_steps, 2 * T, True)
