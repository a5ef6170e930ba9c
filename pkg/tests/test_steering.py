import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from upsteer.conformal import ScoreFamily, Threshold
from upsteer.scenario import Category, ConfigurationError, InstructionSpec, Scenario
from upsteer.steering import (
    Confusion,
    Constructor,
    EpisodeOutcome,
    Method,
    Resolution,
    Strategy,
    clarify,
    classify_outcome,
    decide,
    parse_method,
    run_episode,
)
from upsteer.verifier import MiscalibrationProfile, Shaping, VerifierConfig, bayesian_intent_scores, group_narrations
from upsteer.world import Mode, Narration, PolicyParams, SimState

BAYES0 = VerifierConfig(Shaping.BAYESIAN, delta=0.0)
CP_BAYES0 = Method(Constructor.CP, BAYES0)
THR = Threshold(0.55, 80, 0.15)


def scenario(category, intent, weights, support=None, seed=1, sigma=0.0):
    instruction = (
        InstructionSpec.ambiguous() if support == "ambiguous" else InstructionSpec.straightforward(intent)
    )
    params = PolicyParams(weights, waypoint_noise_sigma=sigma, grasp_success_prob=1.0)
    return Scenario(instruction, intent, SimState((0.0, -1.0), (0.2, -0.5)), params, seed, category)


class TestDecide:
    def test_examples(self):
        assert decide({2}, 3) == Resolution(Strategy.EXECUTE, 2)
        assert decide({1, 3}, 3).strategy is Strategy.CLARIFY
        assert decide({3}, 3).strategy is Strategy.INTERVENE
        assert decide(set(), 3).strategy is Strategy.INTERVENE

    def test_exhaustive_small(self):
        n = 4
        for r in range(n + 1):
            for subset in itertools.combinations(range(n), r):
                res = decide(subset, n - 1)
                assert res.strategy in Strategy
                if res.strategy is Strategy.EXECUTE:
                    assert res.option != n - 1 and len(subset) == 1
                elif res.strategy is Strategy.CLARIFY:
                    assert len(subset) > 1
                else:
                    assert set(subset) in ({n - 1}, set())

    @given(st.integers(1, 11).flatmap(lambda n: st.tuples(st.just(n), st.sets(st.integers(0, n - 1)))))
    def test_total(self, case):
        n, subset = case
        res = decide(subset, n - 1)
        assert (res.option is not None) == (res.strategy is Strategy.EXECUTE)
        assert res.option != n - 1


class TestClarify:
    def test_point_mass(self):
        out = clarify(InstructionSpec.ambiguous(), {0, 1}, Mode.PLACE_LEFT)
        assert out.intent_support == (Mode.PLACE_LEFT,) and out.clarified

    def test_precondition_small_set(self):
        with pytest.raises(ValueError):
            clarify(InstructionSpec.ambiguous(), {0}, Mode.PLACE_LEFT)

    def test_already_clarified(self):
        done = InstructionSpec.straightforward(Mode.PLACE_LEFT, clarified=True)
        with pytest.raises(ValueError):
            clarify(done, {0, 1}, Mode.PLACE_LEFT)

    def test_oracle_outside_support(self):
        with pytest.raises(ConfigurationError):
            clarify(InstructionSpec.straightforward(Mode.PLACE_RIGHT), {0, 1}, Mode.PLACE_LEFT)

    @given(st.lists(st.sampled_from([Narration.PLACE_LEFT, Narration.PLACE_RIGHT, Narration.DROP]), min_size=1, max_size=10),
           st.sampled_from([Mode.PLACE_LEFT, Mode.PLACE_RIGHT]), st.floats(0.0, 0.999))
    def test_clarified_scores_never_clarify_again(self, labels, intent, q):
        opts = group_narrations(labels)
        instr = clarify(InstructionSpec.ambiguous(), {0, 1}, intent)
        p = bayesian_intent_scores(opts, instr, 0.0)
        res = decide(CP_BAYES0.prediction_set(p, Threshold(q, 80, 0.15), 0.15), opts.none_index)
        assert res.strategy is not Strategy.CLARIFY


class TestClassify:
    def test_table(self):
        ex = Resolution(Strategy.EXECUTE, 0)
        iv = Resolution(Strategy.INTERVENE)
        assert classify_outcome(ex, Mode.PLACE_LEFT, Narration.PLACE_LEFT, True) is Confusion.TP
        assert classify_outcome(ex, Mode.PLACE_LEFT, Narration.DROP, True) is Confusion.FP
        assert classify_outcome(iv, Mode.PLACE_LEFT, None, True) is Confusion.FN
        assert classify_outcome(iv, Mode.PLACE_LEFT, None, False) is Confusion.TN

    def test_outcome_invariant(self):
        with pytest.raises(ValueError):
            EpisodeOutcome(Confusion.TN, 0, None, True)


class TestEpisodes:
    def test_capable_left_executes(self):
        sc = scenario(Category.CAPABLE, Mode.PLACE_LEFT, (1.0, 0.0, 0.0))
        out = run_episode(sc, CP_BAYES0, THR, 10)
        assert out.confusion is Confusion.TP and out.success
        assert out.executed_outcome is Narration.PLACE_LEFT
        assert [p.resolution.strategy for p in out.phases] == [Strategy.EXECUTE, Strategy.EXECUTE]

    def test_incapable_intervenes(self):
        sc = scenario(Category.INCAPABLE, Mode.PLACE_LEFT, (0.0, 0.8, 0.2))
        out = run_episode(sc, CP_BAYES0, THR, 10)
        assert out.confusion is Confusion.TN
        assert out.executed_outcome is None and out.intervene_state is not None
        assert out.phases[-1].pred_set == (out.phases[-1].options.none_index,)

    def test_ambiguous_clarifies_once(self):
        for intent in (Mode.PLACE_LEFT, Mode.PLACE_RIGHT):
            sc = scenario(Category.AMBIGUOUS, intent, (0.5, 0.5, 0.0), support="ambiguous", seed=4)
            out = run_episode(sc, CP_BAYES0, THR, 10)
            assert out.confusion is Confusion.TP
            assert out.clarification_count == 1
            assert out.executed_outcome.value == intent.value

    def test_clarification_cap_gives_fn(self):
        sc = scenario(Category.AMBIGUOUS, Mode.PLACE_LEFT, (0.5, 0.5, 0.0), support="ambiguous")
        always_all = Threshold(1.0, 80, 0.15)
        out = run_episode(sc, CP_BAYES0, always_all, 10, max_clarifications=3)
        assert out.confusion is Confusion.FN and out.clarification_count == 3

    def test_overconfident_argmax_can_fail(self):
        # ambiguous right intent, but only left samples: argmax executes and fails
        sc = scenario(Category.AMBIGUOUS, Mode.PLACE_RIGHT, (1.0, 0.0, 0.0), support="ambiguous")
        m = Method(Constructor.ARGMAX, VerifierConfig(Shaping.VANILLA, MiscalibrationProfile()))
        out = run_episode(sc, m, None, 10)
        assert out.confusion is Confusion.FP and out.executed_outcome is Narration.PLACE_LEFT

    def test_deterministic(self):
        sc = scenario(Category.AMBIGUOUS, Mode.PLACE_LEFT, (0.45, 0.45, 0.1), support="ambiguous", sigma=0.1)
        a = run_episode(sc, CP_BAYES0, THR, 10)
        b = run_episode(sc, CP_BAYES0, THR, 10)
        assert a == b

    def test_record(self):
        sc = scenario(Category.CAPABLE, Mode.PLACE_LEFT, (1.0, 0.0, 0.0))
        rec = run_episode(sc, CP_BAYES0, THR, 10).to_record(sc, CP_BAYES0.name)
        assert rec["confusion"] == "TP" and len(rec["phases"]) == 2
        assert rec["phases"][1]["options"][-1] == "none"


class TestMethods:
    def test_parse(self):
        m = parse_method("SimpleSet:Vanilla")
        assert m.constructor is Constructor.SIMPLE and m.verifier.shaping is Shaping.VANILLA
        assert parse_method("CP:BayesianIntent:MinMax").score_family is ScoreFamily.MIN_MAX
        assert parse_method("CP:BayesianIntent").name == "CP:BayesianIntent"

    @pytest.mark.parametrize("bad", ["CP", "Foo:Vanilla", "CP:Bar", "CP:Vanilla:X:Y"])
    def test_parse_errors(self, bad):
        with pytest.raises(ValueError):
            parse_method(bad)

    def test_families(self):
        assert Method(Constructor.APS).family is ScoreFamily.APS
        assert Method(Constructor.SIMPLE).family is None
        assert Method(Constructor.ARGMAX).prediction_set(np.array([0.2, 0.5, 0.3]), None, 0.15) == {1}
