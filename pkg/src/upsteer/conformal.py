"""Sequence-level conformal calibration and prediction-set constructors.

A calibration sequence holds one labeled verifier call per task phase. Its
nonconformity score aggregates the worst phase, so a single quantile covers
every phase of a test sequence at once.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


SET_SLACK = 1e-12


class InsufficientCalibrationData(ValueError):
    pass


class ScoreFamily(str, enum.Enum):
    MIN_MIN = "MinMin"
    MIN_MAX = "MinMax"
    APS = "APS"


@dataclass(frozen=True)
class LabeledPhase:
    probs: np.ndarray
    true_labels: frozenset

    def __post_init__(self):
        if not self.true_labels:
            raise ValueError("true label set must be nonempty")
        n = len(self.probs)
        if any(not 0 <= i < n for i in self.true_labels):
            raise ValueError("true label index out of range")


CalibSequence = Sequence[LabeledPhase]


def _true_probs(phase: LabeledPhase) -> np.ndarray:
    return np.asarray(phase.probs)[sorted(phase.true_labels)]


def nonconformity_min_min(seq: CalibSequence) -> float:
    """One minus the smallest true-label probability anywhere in the sequence."""
    return 1.0 - min(float(_true_probs(ph).min()) for ph in seq)


def nonconformity_min_max(seq: CalibSequence) -> float:
    """One minus the smallest per-phase best true-label probability."""
    return 1.0 - min(float(_true_probs(ph).max()) for ph in seq)


def descending_order(probs: np.ndarray) -> np.ndarray:
    # stable sort on -p keeps lower indices first among ties
    return np.argsort(-np.asarray(probs), kind="stable")


def aps_phase_score(phase: LabeledPhase) -> float:
    """Cumulative sorted mass needed before every true label is included."""
    order = descending_order(phase.probs)
    cum = np.cumsum(np.asarray(phase.probs)[order])
    last = max(int(np.flatnonzero(order == t)[0]) for t in phase.true_labels)
    return float(min(cum[last], 1.0))


def aps_nonconformity(seq: CalibSequence) -> float:
    return max(aps_phase_score(ph) for ph in seq)


SCORE_FUNCTIONS = {
    ScoreFamily.MIN_MIN: nonconformity_min_min,
    ScoreFamily.MIN_MAX: nonconformity_min_max,
    ScoreFamily.APS: aps_nonconformity,
}


@dataclass(frozen=True)
class Threshold:
    q_hat: float
    N: int
    epsilon: float
    score_family: ScoreFamily = ScoreFamily.MIN_MIN

    def to_dict(self) -> dict:
        return {
            "q_hat": self.q_hat,
            "N": self.N,
            "epsilon": self.epsilon,
            "score_family": self.score_family.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Threshold":
        return cls(float(d["q_hat"]), int(d["N"]), float(d["epsilon"]), ScoreFamily(d["score_family"]))

    def save(self, path, **extra) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({**self.to_dict(), **extra}, sort_keys=True, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Threshold":
        return cls.from_dict(json.loads(Path(path).read_text()))


def quantile_rank(N: int, epsilon: float) -> int:
    return math.ceil((N + 1) * (1.0 - epsilon) - 1e-12)


def calibrate_quantile(
    scores: Sequence[float], epsilon: float, score_family: ScoreFamily = ScoreFamily.MIN_MIN
) -> Threshold:
    """Split-conformal threshold: the ceil((N+1)(1-eps))-th smallest score."""
    N = len(scores)
    if N < 1:
        raise InsufficientCalibrationData("no calibration scores")
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    k = quantile_rank(N, epsilon)
    if k > N:
        raise InsufficientCalibrationData(
            f"need N >= {k} scores for epsilon={epsilon}, got {N}"
        )
    q_hat = float(np.partition(np.asarray(scores, dtype=float), k - 1)[k - 1])
    return Threshold(q_hat, N, epsilon, ScoreFamily(score_family))


def prediction_set_cp(probs: np.ndarray, thr: Threshold) -> frozenset:
    if thr.score_family is ScoreFamily.APS:
        raise ValueError("APS thresholds need prediction_set_aps")
    p = np.asarray(probs)
    # slack keeps boundary ties inclusive despite round-off in 1 - p
    return frozenset(int(i) for i in np.flatnonzero(1.0 - p <= thr.q_hat + SET_SLACK))


def _greedy_prefix(probs: np.ndarray, target: float) -> frozenset:
    order = descending_order(probs)
    cum = np.cumsum(np.asarray(probs)[order])
    # small slack so float round-off in the running sum cannot skip the stopping point
    hit = np.flatnonzero(cum >= target - SET_SLACK)
    n = int(hit[0]) + 1 if hit.size else len(order)
    return frozenset(int(i) for i in order[:n])


def prediction_set_simple(probs: np.ndarray, epsilon: float) -> frozenset:
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    return _greedy_prefix(probs, 1.0 - epsilon)


def prediction_set_aps(probs: np.ndarray, thr: Threshold) -> frozenset:
    if thr.score_family is not ScoreFamily.APS:
        raise ValueError("threshold was not calibrated on APS scores")
    return _greedy_prefix(probs, thr.q_hat)
