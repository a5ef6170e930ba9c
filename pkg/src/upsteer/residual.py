"""Residual continual learning from expert interventions.

A scripted expert corrects the base policy when its imagined outcome misses
the user's intent. From those traces we fit a logistic gate (when to correct)
and a small tanh-bounded regressor (how much to correct), then redeploy with
half of the K samples passed through the correction.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from upsteer.conformal import Threshold
from upsteer.expert import expert_action, phase_goal_reached
from upsteer.experiment import calibrate_method, parallel_map, score_sequence, simulate_sequence
from upsteer.scenario import Scenario
from upsteer.steering import Method
from upsteer.world import (
    MAX_STEP,
    Action,
    Mode,
    Phase,
    PolicyParams,
    SimState,
    imagine_rollout,
    realizes,
    sample_action_chunk,
    step_dynamics,
)

log = logging.getLogger(__name__)

# Residual targets are divided by this before fitting, keeping them inside (-1, 1).
TARGET_SCALE = np.array([1.0, 1.0, 2.5])
MODEL_FORMAT = "upsteer-residual"
MODEL_VERSION = 1


class NoInterventionSignal(ValueError):
    pass


@dataclass(frozen=True)
class InterventionStep:
    state: SimState
    base_action: Action
    human_action: Action
    delta: tuple
    gate_label: int


@dataclass(frozen=True)
class InterventionTrace:
    steps: tuple
    scenario_index: int
    intent: Mode
    start_phase: Phase

    @property
    def human_steps(self) -> int:
        return sum(s.gate_label for s in self.steps)

    def to_record(self) -> dict:
        return {
            "scenario": self.scenario_index,
            "intent": self.intent.value,
            "start_phase": self.start_phase.value,
            "steps": [
                {
                    "phase": s.state.phase.value,
                    "gripper_pos": list(s.state.gripper_pos),
                    "object_pos": list(s.state.object_pos),
                    "holding": s.state.holding,
                    "base_action": s.base_action.as_array().tolist(),
                    "human_action": s.human_action.as_array().tolist(),
                    "delta": list(s.delta),
                    "gate": s.gate_label,
                }
                for s in self.steps
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "InterventionTrace":
        steps = []
        for s in rec["steps"]:
            st = SimState(tuple(s["gripper_pos"]), tuple(s["object_pos"]), s["holding"], Phase(s["phase"]))
            steps.append(
                InterventionStep(
                    st,
                    Action.from_array(s["base_action"]),
                    Action.from_array(s["human_action"]),
                    tuple(s["delta"]),
                    int(s["gate"]),
                )
            )
        return cls(tuple(steps), rec["scenario"], Mode(rec["intent"]), Phase(rec["start_phase"]))


def collect_intervention(
    scenario: Scenario,
    params: Optional[PolicyParams] = None,
    rng: Optional[np.random.Generator] = None,
    start_state: Optional[SimState] = None,
) -> Optional[InterventionTrace]:
    """Roll a randomly drawn base sample forward and let the expert correct it.

    Per phase, if the sample's imagined outcome misses the intent, the expert
    drives from the first step of that phase until the phase goal is reached.
    The base policy keeps proposing actions the whole time so every step has a
    base action to difference against. Returns None (with a warning) if the
    expert cannot finish within the horizon.
    """
    params = scenario.policy_params if params is None else params
    rng = np.random.default_rng(scenario.seed) if rng is None else rng
    state = scenario.initial_state if start_state is None else start_state
    intent = scenario.hidden_intent
    H, T = params.chunk_length, params.horizon
    phases = (Phase.GRASP, Phase.PLACE) if state.phase is Phase.GRASP else (Phase.PLACE,)
    steps = []

    for phase in phases:
        state = state.with_phase(phase)
        sample = imagine_rollout(state, params, rng)
        if realizes(sample.outcome, intent):
            for s, a in zip(sample.states[:-1], sample.actions):
                steps.append(InterventionStep(s, a, a, (0.0, 0.0, 0.0), 0))
            state = sample.terminal
            continue

        in_control = True
        chunk = None
        for t in range(T):
            if t % H == 0:
                chunk = sample_action_chunk(state, params, sample.mode, rng)
            base = chunk[t % H]
            if in_control:
                b = base.as_array()
                d = expert_action(state, intent).as_array() - b
                human = Action.from_array(b + d)
                steps.append(InterventionStep(state, base, human, tuple(float(x) for x in d), 1))
                state = step_dynamics(state, human)
                in_control = not phase_goal_reached(state, intent)
            else:
                steps.append(InterventionStep(state, base, base, (0.0, 0.0, 0.0), 0))
                state = step_dynamics(state, base)
        if in_control:
            warnings.warn(
                f"expert could not finish phase {phase.value} of scenario {scenario.index} "
                f"within {T} steps; trace discarded"
            )
            return None

    return InterventionTrace(tuple(steps), scenario.index, intent, phases[0])


def step_features(state: SimState, action: Action) -> np.ndarray:
    a = action.as_array()
    return np.concatenate([state.features(), [a[0] / MAX_STEP, a[1] / MAX_STEP, a[2]]])


N_FEATURES = 9


@dataclass(frozen=True)
class ResidualHyperparams:
    lr: float = 1e-4
    gate_lr: float = 1e-3
    batch_size: int = 64
    iterations: int = 20000
    hidden: int = 32
    seed: int = 0
    gate_threshold: float = 0.5


class Adam:
    def __init__(self, params: dict, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            self.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def gate_forward(p: dict, X: np.ndarray) -> np.ndarray:
    return sigmoid(X @ p["gate_w"] + p["gate_b"])


def gate_loss_and_grad(p: dict, X, y, pos_weight):
    z = X @ p["gate_w"] + p["gate_b"]
    s = sigmoid(z)
    w = np.where(y > 0.5, pos_weight, 1.0)
    # log-sigmoid written stably
    log_s = -np.logaddexp(0.0, -z)
    log_1ms = -np.logaddexp(0.0, z)
    loss = -np.mean(w * (y * log_s + (1 - y) * log_1ms))
    dz = w * (s - y) / len(y)
    return loss, {"gate_w": X.T @ dz, "gate_b": np.array(dz.sum())}


def corrector_forward(p: dict, X: np.ndarray, cache: bool = False):
    h = np.tanh(X @ p["W1"] + p["b1"])
    pre = X @ p["A"] + h @ p["W2"] + p["b2"]
    out = np.tanh(pre)
    return (out, h) if cache else out


def corrector_loss_and_grad(p: dict, X, Y):
    out, h = corrector_forward(p, X, cache=True)
    n = len(X)
    err = out - Y
    loss = np.mean(np.sum(err**2, axis=1))
    dout = 2.0 * err / n
    dpre = dout * (1.0 - out**2)
    dh = dpre @ p["W2"].T
    dhpre = dh * (1.0 - h**2)
    grads = {
        "A": X.T @ dpre,
        "W2": h.T @ dpre,
        "b2": dpre.sum(axis=0),
        "W1": X.T @ dhpre,
        "b1": dhpre.sum(axis=0),
    }
    return loss, grads


@dataclass
class ResidualModel:
    params: dict
    hyperparams: ResidualHyperparams = field(default_factory=ResidualHyperparams)
    history: dict = field(default_factory=dict, repr=False)

    def gate_prob(self, X: np.ndarray) -> np.ndarray:
        return gate_forward(self.params, np.atleast_2d(X))

    def correction(self, X: np.ndarray) -> np.ndarray:
        """Normalized delta actions, componentwise inside (-1, 1)."""
        return corrector_forward(self.params, np.atleast_2d(X))

    def delta(self, X: np.ndarray) -> np.ndarray:
        return self.correction(X) * TARGET_SCALE

    def apply(self, state: SimState, action: Action) -> Action:
        x = step_features(state, action)[None, :]
        if self.gate_prob(x)[0] <= self.hyperparams.gate_threshold:
            return action
        return Action.from_array(action.as_array() + self.delta(x)[0])

    @classmethod
    def null(cls, hidden: int = 32) -> "ResidualModel":
        """A model whose gate never fires."""
        p = init_params(np.random.default_rng(0), hidden)
        p["gate_b"] = np.array(-50.0)
        return cls(p, ResidualHyperparams(hidden=hidden))

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "hyperparams": asdict(self.hyperparams),
            "params": [
                {"name": k, "shape": list(np.shape(v)), "values": np.ravel(v).tolist()}
                for k, v in sorted(self.params.items())
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResidualModel":
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model file format {d.get('format')!r} v{d.get('version')}")
        params = {p["name"]: np.array(p["values"], dtype=float).reshape(p["shape"]) for p in d["params"]}
        return cls(params, ResidualHyperparams(**d["hyperparams"]))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "ResidualModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_params(rng: np.random.Generator, hidden: int) -> dict:
    return {
        "gate_w": np.zeros(N_FEATURES),
        "gate_b": np.array(0.0),
        "A": np.zeros((N_FEATURES, 3)),
        "W1": rng.normal(0.0, 1.0 / np.sqrt(N_FEATURES), size=(N_FEATURES, hidden)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(0.0, 0.1 / np.sqrt(hidden), size=(hidden, 3)),
        "b2": np.zeros(3),
    }


def trace_arrays(traces: Sequence[InterventionTrace]):
    X, gate, delta = [], [], []
    for tr in traces:
        for s in tr.steps:
            X.append(step_features(s.state, s.base_action))
            gate.append(s.gate_label)
            delta.append(s.delta)
    return np.array(X), np.array(gate, dtype=float), np.array(delta)


def _fit(loss_grad, params: dict, keys, data, hp: ResidualHyperparams, rng, lr: float):
    opt = Adam({k: params[k] for k in keys}, lr)
    n = len(data[0])
    losses = []
    for it in range(hp.iterations):
        idx = rng.integers(0, n, size=min(hp.batch_size, n))
        loss, grads = loss_grad(params, *(d[idx] for d in data))
        opt.step({k: grads[k] for k in keys})
        if it % 500 == 0 or it == hp.iterations - 1:
            losses.append(float(loss))
    return losses


def fit_gate(params, X, y, hp, rng):
    n_pos = y.sum()
    pos_weight = (len(y) - n_pos) / n_pos if n_pos < len(y) else 1.0
    return _fit(
        lambda p, Xb, yb: gate_loss_and_grad(p, Xb, yb, pos_weight),
        params, ("gate_w", "gate_b"), (X, y), hp, rng, hp.gate_lr,
    )


def fit_corrector(params, X, Y, hp, rng):
    return _fit(corrector_loss_and_grad, params, ("A", "W1", "b1", "W2", "b2"), (X, Y), hp, rng, hp.lr)


def train_residual(
    traces: Sequence[InterventionTrace], hyperparams: Optional[ResidualHyperparams] = None
) -> ResidualModel:
    """Fit the gate by weighted cross-entropy and the corrector by MSE on gated steps."""
    hp = hyperparams or ResidualHyperparams()
    X, gate, delta = trace_arrays([t for t in traces if t is not None])
    if len(X) == 0 or gate.sum() == 0:
        raise NoInterventionSignal("traces contain no expert-controlled steps")
    rng = np.random.default_rng(hp.seed)
    params = init_params(rng, hp.hidden)
    gate_losses = fit_gate(params, X, gate, hp, rng)
    pos = gate > 0.5
    corr_losses = fit_corrector(params, X[pos], delta[pos] / TARGET_SCALE, hp, rng)
    log.info("residual fit: gate loss %.4f, corrector loss %.5f", gate_losses[-1], corr_losses[-1])
    return ResidualModel(params, hp, {"gate_loss": gate_losses, "corrector_loss": corr_losses})


def _combined_rollout(state, params, model, rng):
    return imagine_rollout(state, params, rng, action_hook=model.apply)


def mixed_sample(
    state: SimState,
    params: PolicyParams,
    model: ResidualModel,
    K: int,
    rng: np.random.Generator,
) -> list:
    """K/2 rollouts through base + gated residual, K/2 from the base policy alone."""
    if K % 2:
        raise ValueError("mixed sampling needs an even K")
    streams = rng.spawn(K)
    combined = [_combined_rollout(state, params, model, r) for r in streams[: K // 2]]
    base = [imagine_rollout(state, params, r) for r in streams[K // 2 :]]
    return combined + base


def mixed_sampler(model: ResidualModel):
    """A sampler with the ``run_episode`` signature bound to ``model``."""
    return partial(_mixed_sampler, model)


def _mixed_sampler(model, state, params, K, rng):
    return mixed_sample(state, params, model, K, rng)


def _simulate_mixed(model, K, scenario):
    return simulate_sequence(scenario, K, mixed_sampler(model))


def recalibrate(
    model: ResidualModel,
    scenarios: Sequence[Scenario],
    method: Method,
    epsilon: float,
    K: int,
    workers: int = 1,
) -> Threshold:
    """Fresh threshold from calibration sequences regenerated under mixed sampling."""
    sims = parallel_map(partial(_simulate_mixed, model, K), list(scenarios), workers)
    scored = [score_sequence(seq, method.verifier) for seq in sims]
    return calibrate_method(method, scored, epsilon)


def write_traces(path, traces: Sequence[InterventionTrace], extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for tr in traces:
            rec = tr.to_record()
            if extra:
                rec.update(extra)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_traces(path) -> list:
    with Path(path).open() as fh:
        return [InterventionTrace.from_record(json.loads(l)) for l in fh if l.strip()]
