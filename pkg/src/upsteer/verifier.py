"""Simulated verifiers producing probabilities over grouped outcome options.

Two generators stand in for a VLM: an overconfident "vanilla" scorer and the
intent-marginalized scorer, which mixes intent-conditional option likelihoods
under an intent prior.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from upsteer.scenario import InstructionSpec
from upsteer.world import Mode, Narration, realizes

PROB_TOL = 1e-9


@dataclass(frozen=True)
class OptionSet:
    """Distinct narration labels with their member samples, plus a final "none" option."""

    labels: tuple
    members: tuple  # tuple of index tuples, aligned with labels
    K: int

    def __post_init__(self):
        if not 1 <= len(self.labels) <= self.K:
            raise ValueError("need between 1 and K groups")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("group labels must be distinct")
        flat = sorted(i for m in self.members for i in m)
        if flat != list(range(self.K)):
            raise ValueError("every sample index must appear in exactly one group")

    @property
    def none_index(self) -> int:
        return len(self.labels)

    @property
    def n_options(self) -> int:
        return len(self.labels) + 1

    def group_sizes(self) -> np.ndarray:
        return np.array([len(m) for m in self.members])

    def option_name(self, idx: int) -> str:
        return "none" if idx == self.none_index else self.labels[idx].value


def group_narrations(narrations: Sequence[Narration]) -> OptionSet:
    if len(narrations) < 1:
        raise ValueError("need at least one narration")
    order: list = []
    members: dict = {}
    for k, label in enumerate(narrations):
        if label not in members:
            order.append(label)
            members[label] = []
        members[label].append(k)
    return OptionSet(tuple(order), tuple(tuple(members[l]) for l in order), len(narrations))


def check_prob_vector(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > PROB_TOL:
        raise ValueError(f"not a probability vector: {p}")
    return p


def consistent_options(options: OptionSet, instruction: InstructionSpec) -> list:
    """Indices of options whose label serves some intent in the instruction's support."""
    return [
        i
        for i, label in enumerate(options.labels)
        if any(realizes(label, th) for th in instruction.intent_support)
    ]


def true_label_set(options: OptionSet, instruction: InstructionSpec) -> frozenset:
    """Ground-truth options: every instruction-consistent option, or "none" if there are none."""
    idx = consistent_options(options, instruction)
    return frozenset(idx) if idx else frozenset({options.none_index})


@dataclass(frozen=True)
class MiscalibrationProfile:
    temperature: float = 0.1
    majority_bias: float = 1.0
    noise_sigma: float = 0.1

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.majority_bias < 0 or self.noise_sigma < 0:
            raise ValueError("majority_bias and noise_sigma must be nonnegative")


def softmax(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(z, dtype=float) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def alignment_scores(options: OptionSet, instruction: InstructionSpec) -> np.ndarray:
    base = np.zeros(options.n_options)
    consistent = consistent_options(options, instruction)
    base[consistent] = 1.0
    if not consistent:
        base[options.none_index] = 1.0
    return base


def vanilla_scores(
    options: OptionSet,
    instruction: InstructionSpec,
    profile: MiscalibrationProfile,
    rng: np.random.Generator,
    offset: float = 0.0,
) -> np.ndarray:
    """Self-reported scores of an overconfident verifier.

    Honest alignment (1 for consistent options, else 0; "none" is 1 only when
    nothing is consistent), plus Gaussian noise, plus a bonus for the largest
    sample group, pushed through a low-temperature softmax.
    """
    z = alignment_scores(options, instruction) + offset
    if profile.noise_sigma > 0:
        z = z + rng.normal(0.0, profile.noise_sigma, size=z.shape)
    sizes = options.group_sizes()
    z[int(np.argmax(sizes))] += profile.majority_bias * sizes.max() / options.K
    return softmax(z, profile.temperature)


@dataclass(frozen=True)
class IntentHypotheses:
    intents: tuple
    prior: tuple

    def __post_init__(self):
        if len(self.intents) != len(self.prior) or abs(sum(self.prior) - 1.0) > PROB_TOL:
            raise ValueError("intent prior must be a probability vector over the intents")


def hypothesize_intents(instruction: InstructionSpec) -> IntentHypotheses:
    return IntentHypotheses(tuple(instruction.intent_support), tuple(instruction.intent_prior))


def elicit_intents(
    instruction: InstructionSpec,
    concentration: Optional[float],
    rng: np.random.Generator,
    resolution: Optional[float] = None,
) -> IntentHypotheses:
    """Intent hypotheses as a noisy elicitation would report them.

    With ``concentration`` set, the prior is a Dirichlet draw centred on the
    instruction's prior; single-intent instructions stay point masses.
    ``resolution`` snaps the reported weights to a grid (verbalized
    probabilities come in coarse steps such as 0.1).
    """
    hyp = hypothesize_intents(instruction)
    if concentration is None or len(hyp.intents) == 1:
        return hyp
    prior = rng.dirichlet(concentration * np.asarray(hyp.prior))
    if resolution is not None:
        snapped = np.round(prior / resolution) * resolution
        prior = snapped if snapped.sum() > 0 else prior
    prior = prior / prior.sum()
    return IntentHypotheses(hyp.intents, tuple(float(p) for p in prior))


def conditional_option_likelihood(options: OptionSet, intent: Mode, delta: float) -> np.ndarray:
    if not 0.0 <= delta <= 0.2:
        raise ValueError("smoothing must lie in [0, 0.2]")
    n = options.n_options
    p = np.full(n, delta / n)
    hits = [i for i, label in enumerate(options.labels) if realizes(label, intent)]
    if hits:
        p[hits] += (1.0 - delta) / len(hits)
    else:
        p[options.none_index] += 1.0 - delta
    return p


def bayesian_intent_scores(
    options: OptionSet,
    instruction: InstructionSpec,
    delta: float,
    hypotheses: Optional[IntentHypotheses] = None,
) -> np.ndarray:
    """Marginalize intent-conditional option likelihoods over the intent prior."""
    hyp = hypothesize_intents(instruction) if hypotheses is None else hypotheses
    if len(hyp.intents) == 1:
        return conditional_option_likelihood(options, hyp.intents[0], delta)
    out = np.zeros(options.n_options)
    for intent, w in zip(hyp.intents, hyp.prior):
        out += w * conditional_option_likelihood(options, intent, delta)
    return out


class Shaping(str, enum.Enum):
    VANILLA = "Vanilla"
    BAYESIAN = "BayesianIntent"


@dataclass(frozen=True)
class VerifierConfig:
    shaping: Shaping = Shaping.BAYESIAN
    profile: MiscalibrationProfile = MiscalibrationProfile()
    delta: float = 0.05
    prior_concentration: Optional[float] = None
    prior_resolution: Optional[float] = None

    def score(
        self, options: OptionSet, instruction: InstructionSpec, rng: np.random.Generator
    ) -> np.ndarray:
        if self.shaping is Shaping.VANILLA:
            return vanilla_scores(options, instruction, self.profile, rng)
        hyp = elicit_intents(instruction, self.prior_concentration, rng, self.prior_resolution)
        return bayesian_intent_scores(options, instruction, self.delta, hyp)
