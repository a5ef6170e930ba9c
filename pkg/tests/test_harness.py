import math

import numpy as np
import pytest

from upsteer.baselines import InterventionLog
from upsteer.conformal import LabeledPhase
from upsteer.experiment import SequenceResult, evaluate_sequence, simulate_sequence, summarize
from upsteer.harness import (
    MetricsReport,
    RunConfig,
    assert_disjoint,
    build_calibration_set,
    episode_intervention,
    evaluate,
    generate_scenarios,
    intervention_rate,
    report,
    steer,
)
from upsteer.scenario import Category, ConfigurationError
from upsteer.steering import Constructor, Method
from upsteer.world import Mode

SMALL = RunConfig(n_calib=40, n_test=30, n_episodes=12, n_deploy=20)


@pytest.fixture(scope="module")
def small_eval():
    cal = build_calibration_set(SMALL)
    return cal, evaluate(SMALL, cal)


class TestConfig:
    def test_defaults(self):
        c = RunConfig()
        assert (c.epsilon, c.K, c.M, c.n_calib) == (0.15, 10, 2, 80)
        assert len(c.methods()) == 6

    def test_yaml_roundtrip(self, tmp_path):
        c = RunConfig(seed=4, epsilon=0.2, shapings=("Vanilla",), prior_concentration=5.0)
        assert RunConfig.load(c.save(tmp_path / "c.yaml")) == c

    def test_comma_lists_and_ranges(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("constructors: CP, APS\nambiguous_fail: 0.0, 0.05\nseed: 3\n")
        c = RunConfig.load(p)
        assert c.constructors == ("CP", "APS") and c.ambiguous_fail == (0.0, 0.05) and c.seed == 3

    @pytest.mark.parametrize(
        "text", ["bogus_key: 1\n", "epsilon: 1.5\n", "K: two\n", "M: 3\n", "frac_ambiguous: 0.9\nfrac_incapable: 0.2\n",
                 "constructors: CP, Magic\n", "seed: null\n"]
    )
    def test_rejects(self, tmp_path, text):
        p = tmp_path / "c.yaml"
        p.write_text(text)
        with pytest.raises(ConfigurationError):
            RunConfig.load(p)

    def test_hash(self):
        assert RunConfig().hash == RunConfig(workers=4).hash
        assert RunConfig().hash != RunConfig(seed=1).hash


class TestScenarios:
    def test_paper_split(self):
        sc = generate_scenarios(RunConfig(), "calib")
        counts = {c: sum(s.category is c for s in sc) for c in Category}
        assert len(sc) == 80
        assert counts[Category.AMBIGUOUS] == 40
        assert counts[Category.CAPABLE] + counts[Category.INCAPABLE] == 40
        assert counts[Category.INCAPABLE] == 10

    def test_calibration_sequences(self):
        cal = build_calibration_set(RunConfig())
        seqs = cal.scored["BayesianIntent"]
        assert len(seqs) == 80 and all(len(s) == 2 for s in seqs)

    def test_all_capable_singleton_labels(self):
        cfg = RunConfig(frac_ambiguous=0.0, frac_incapable=0.0, n_calib=30)
        for sc in generate_scenarios(cfg, "calib"):
            seq = simulate_sequence(sc, cfg.K)
            for opts, lab in zip(seq.options, seq.labels):
                assert len(lab) == 1 and next(iter(lab)) != opts.none_index

    def test_splits_disjoint(self):
        cfg = RunConfig(n_test=500)
        a, b = generate_scenarios(cfg, "calib"), generate_scenarios(cfg, "test")
        assert_disjoint(a, b)
        with pytest.raises(ValueError):
            assert_disjoint(a, a)

    def test_scenario_depends_only_on_index(self):
        a = generate_scenarios(RunConfig(), "test", n=10, categories=[Category.CAPABLE] * 10)
        b = generate_scenarios(RunConfig(), "test", n=5, categories=[Category.CAPABLE] * 5)
        assert a[:5] == b


class TestEvaluation:
    def test_deterministic_thresholds(self):
        a, b = build_calibration_set(SMALL), build_calibration_set(SMALL)
        assert a.thresholds == b.thresholds

    def test_workers_do_not_change_results(self, small_eval):
        cal, rep = small_eval
        cfg = SMALL.replace(workers=2)
        cal2 = build_calibration_set(cfg)
        assert cal2.thresholds == cal.thresholds
        assert evaluate(cfg, cal2) == rep

    def test_metric_ranges(self, small_eval):
        _, rep = small_eval
        for _, _, k, v in rep.records:
            if k in ("coverage", "clarification_rate"):
                assert 0.0 <= v <= 1.0

    def test_mismatched_calibration(self, small_eval):
        cal, _ = small_eval
        with pytest.raises(ValueError):
            evaluate(SMALL.replace(seed=9), cal)

    def test_ratio(self):
        res = [SequenceResult(i < 34, (True, True), False, 1) for i in range(40)]
        assert summarize(res)["coverage"] == pytest.approx(0.85)

    def test_oracle_verifier(self):
        # true-label probability mass 1, split evenly across the true labels
        cfg = RunConfig(n_test=200)
        results, amb = [], []
        for sc in generate_scenarios(cfg, "test"):
            seq = simulate_sequence(sc, cfg.K)
            phases = []
            for opts, lab in zip(seq.options, seq.labels):
                p = np.zeros(opts.n_options)
                p[list(lab)] = 1.0 / len(lab)
                phases.append(LabeledPhase(p, lab))
            amb.append(any(len(lab) > 1 for lab in seq.labels))
            results.append(evaluate_sequence(Method(Constructor.SIMPLE), None, 0.15, phases))
        s = summarize(results)
        assert s["coverage"] == 1.0
        assert s["clarification_rate"] == pytest.approx(np.mean(amb))


class TestReport:
    def test_cardinality(self, small_eval):
        _, rep = small_eval
        assert len(rep.records) == 6 * 3 * 3

    def test_files_byte_identical_and_dir_created(self, small_eval, tmp_path):
        _, rep = small_eval
        a = report(rep, tmp_path / "a" / "deep")
        b = report(rep, tmp_path / "b")
        assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
        lines = a[0].read_text().splitlines()
        assert len(lines) == 55 and all(rep.config_hash in l for l in lines[1:])

    def test_json_roundtrip(self, small_eval, tmp_path):
        _, rep = small_eval
        assert MetricsReport.load(rep.save(tmp_path / "r.json")) == rep

    def test_merge_refuses_mismatched_hash(self, small_eval):
        _, rep = small_eval
        other = MetricsReport("deadbeef", 0, ())
        with pytest.raises(ValueError, match="refusing"):
            rep.merge(other)
        assert rep.merge(MetricsReport(rep.config_hash, 0, ())) == rep


class TestInterventionRate:
    def test_examples(self):
        assert intervention_rate([InterventionLog(6, 100, True)]) == pytest.approx(0.06)
        assert intervention_rate([InterventionLog(1, 50, True)]) == pytest.approx(0.02)
        assert intervention_rate([InterventionLog(0, 32, True)] * 3) == 0.0

    def test_zero_length_skipped(self):
        with pytest.warns(UserWarning):
            assert intervention_rate([InterventionLog(0, 0, False), InterventionLog(4, 32, True)]) == 0.125
        with pytest.warns(UserWarning):
            assert math.isnan(intervention_rate([InterventionLog(0, 0, False)]))

    def test_clarify_only_episode_counts_one_step(self):
        cfg = RunConfig(frac_ambiguous=1.0, frac_incapable=0.0, n_episodes=10, prior_concentration=None)
        m = cfg.method("CP", "BayesianIntent")
        thr = build_calibration_set(cfg, methods=[m]).thresholds[m.name]
        sc = generate_scenarios(cfg, "episodes")
        outcomes, _ = steer(cfg, m, thr, sc)
        checked = 0
        for s, o in zip(sc, outcomes):
            if o.clarification_count == 1 and o.intervene_state is None:
                assert episode_intervention(s, o).human_steps == 1
                checked += 1
        assert checked > 0

    def test_steer_report(self):
        cfg = SMALL
        m = cfg.method("CP", "BayesianIntent")
        thr = build_calibration_set(cfg, methods=[m]).thresholds[m.name]
        outcomes, rep = steer(cfg, m, thr)
        total = sum(rep.value(m.name, "All", k) for k in ("TP", "TN", "FP", "FN"))
        assert total == len(outcomes) == cfg.n_episodes
        assert 0.0 <= rep.value(m.name, "All", "intervention_rate") <= 1.0


def test_incapable_mode_configurable():
    cfg = RunConfig(incapable_mode="PlaceRight", frac_ambiguous=0.0, frac_incapable=1.0, n_calib=5)
    assert all(s.hidden_intent is Mode.PLACE_RIGHT for s in generate_scenarios(cfg, "calib"))
