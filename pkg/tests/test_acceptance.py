"""End-to-end acceptance checks, one per criterion, each printing a PASS/FAIL line."""

import dataclasses
import itertools
import math
import time

import numpy as np
import pytest

from upsteer.conformal import (
    InsufficientCalibrationData,
    ScoreFamily,
    calibrate_quantile,
    nonconformity_min_min,
)
from upsteer.experiment import phase_coverage, summarize
from upsteer.harness import (
    RunConfig,
    build_calibration_set,
    evaluate,
    generate_scenarios,
    intervention_rate,
    residual_pipeline,
    run_closed_loop,
    run_variance_gated,
    score_all,
    simulate_all,
    steer,
    uq_results,
)
from upsteer.residual import collect_intervention, mixed_sample
from upsteer.scenario import Category, InstructionSpec, MixConfig, generate_scenario
from upsteer.steering import Strategy, decide
from upsteer.verifier import (
    IntentHypotheses,
    MiscalibrationProfile,
    Shaping,
    VerifierConfig,
    bayesian_intent_scores,
    check_prob_vector,
    conditional_option_likelihood,
    group_narrations,
)
from upsteer.world import Mode, Narration, Phase, SimState

EPS = 0.15
AMB, CAP = Category.AMBIGUOUS.value, Category.CAPABLE.value


@pytest.fixture()
def verdict(capsys):
    def emit(tag, ok, detail):
        with capsys.disabled():
            print(f"\n[{tag}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


def test_c1_theorem_coverage(verdict):
    t0 = time.perf_counter()
    cfg = RunConfig(n_calib=500, n_test=2000, constructors=("CP",), shapings=("BayesianIntent",))
    cal = build_calibration_set(cfg)
    sims = simulate_all(cfg, generate_scenarios(cfg, "test"))
    res = uq_results(cfg, cal, score_all(cfg, sims))["CP:BayesianIntent"]
    elapsed = time.perf_counter() - t0
    per_phase = phase_coverage(res)
    bound = (1 - EPS) - 3 * math.sqrt(EPS * (1 - EPS) / 2000)
    ok = bool(np.all(per_phase >= bound)) and elapsed < 60
    verdict("C1", ok, f"per-phase coverage {np.round(per_phase, 4).tolist()} >= {bound:.3f}; runtime {elapsed:.1f}s < 60s")


def test_c2_marginal_coverage_resamples(verdict):
    cfg = RunConfig(n_test=2500, shapings=("Vanilla", "BayesianIntent"))
    scored = score_all(cfg, simulate_all(cfg, generate_scenarios(cfg, "test")))
    rng = np.random.default_rng(2024)
    means = {}
    for shaping, seqs in scored.items():
        scores = np.array([nonconformity_min_min(s) for s in seqs])
        method = cfg.method("CP", shaping)
        covs = []
        for _ in range(100):
            perm = rng.permutation(len(seqs))
            thr = calibrate_quantile(scores[perm[:500]], EPS)
            covs.append(np.mean([all(ph.true_labels <= method.prediction_set(ph.probs, thr, EPS) for ph in seqs[i])
                                 for i in perm[500:]]))
        means[shaping] = float(np.mean(covs))
    ok = all(m >= (1 - EPS) - 0.01 for m in means.values())
    verdict("C2", ok, "mean coverage over 100 resamples " + ", ".join(f"CP+{k} {v:.4f}" for k, v in means.items()) + " >= 0.84")


def test_c3_score_function_separation(verdict):
    cfg = RunConfig(
        n_calib=500, n_test=2000, frac_ambiguous=1.0, frac_incapable=0.0,
        prior_concentration=10.0, prior_resolution=0.1, constructors=("CP",), shapings=("BayesianIntent",),
    )
    mm = cfg.method("CP", "BayesianIntent")
    mx = dataclasses.replace(mm, score_family=ScoreFamily.MIN_MAX)
    cal = build_calibration_set(cfg, methods=[mm, mx])
    res = uq_results(cfg, cal, score_all(cfg, simulate_all(cfg, generate_scenarios(cfg, "test"))), methods=[mm, mx])
    c_mm, c_mx = summarize(res[mm.name])["coverage"], summarize(res[mx.name])["coverage"]
    ok = c_mx < c_mm and c_mm >= 1 - EPS
    verdict("C3", ok, f"ambiguous all-label inclusion min-min {c_mm:.4f} (>= 0.85) vs min-max {c_mx:.4f}")


@pytest.fixture(scope="module")
def grid_report():
    cfg = RunConfig(n_calib=500, n_test=1000)
    assert cfg.profile() == MiscalibrationProfile(0.1, 1.0, cfg.noise_sigma)
    return evaluate(cfg, build_calibration_set(cfg))


def test_c4_miscalibration_trend(verdict, grid_report):
    v = grid_report.value
    simple = v("SimpleSet:Vanilla", AMB, "coverage")
    ups = v("CP:BayesianIntent", AMB, "coverage")
    clar = v("CP:BayesianIntent", CAP, "clarification_rate")
    ok = simple < 0.75 and ups >= 0.83 and clar <= 0.20
    verdict("C4", ok, f"ambiguous coverage SimpleSet+Vanilla {simple:.3f} (< 0.75), CP+Bayes {ups:.3f} (>= 0.83); "
            f"capable clarification {clar:.3f} (<= 0.20)")


def test_c5_set_size_targets(verdict, grid_report):
    v = grid_report.value
    amb = v("CP:BayesianIntent", AMB, "set_size")
    straight = {c: v("CP:BayesianIntent", c, "set_size") for c in (CAP, Category.INCAPABLE.value)}
    ok = 1.8 <= amb <= 2.2 and all(0.9 <= s <= 1.2 for s in straight.values())
    verdict("C5", ok, f"set size ambiguous {amb:.3f} in [1.8, 2.2]; straightforward "
            + ", ".join(f"{k} {s:.3f}" for k, s in straight.items()) + " in [0.9, 1.2]")


@pytest.fixture(scope="module")
def closed_loop_batches():
    rows = []
    for b in range(5):
        cfg = RunConfig(seed=100 + b)
        ups, argmax = cfg.method("CP", "BayesianIntent"), cfg.method("Argmax", "Vanilla")
        thr = build_calibration_set(cfg, methods=[ups]).thresholds[ups.name]
        episodes = generate_scenarios(cfg, "episodes")
        amb = [i for i, s in enumerate(episodes) if s.category is Category.AMBIGUOUS]
        assert len(episodes) == 40 and len(amb) == 20
        out_ups, rep = steer(cfg, ups, thr, episodes)
        out_arg = run_closed_loop(cfg, argmax, None, episodes)
        rows.append(
            {
                "ups": float(np.mean([out_ups[i].success for i in amb])),
                "argmax": float(np.mean([out_arg[i].success for i in amb])),
                "rate_ups": rep.value(ups.name, "All", "intervention_rate"),
                "rate_var": intervention_rate(run_variance_gated(cfg, episodes)),
            }
        )
    return rows


def test_c6_closed_loop_gain(verdict, closed_loop_batches):
    gains = [r["ups"] - r["argmax"] for r in closed_loop_batches]
    wins = sum(g >= 0.15 for g in gains)
    detail = "; ".join(f"{r['ups']:.2f} vs {r['argmax']:.2f}" for r in closed_loop_batches)
    verdict("C6", wins >= 4, f"ambiguous success UPS vs argmax per batch: {detail}; {wins}/5 batches gain >= 15 pts")


def test_c7_residual_improvement(verdict):
    cfg = RunConfig(seed=0, n_episodes=200)
    run = residual_pipeline(cfg)
    before, after = run.success_before, run.success_after

    # multimodality: ambiguous placing states with both modes feasible
    mix = MixConfig(ambiguous_fail=(0.0, 0.0))
    rng = np.random.default_rng(7)
    both = 0
    n_states = 200
    for i in range(n_states):
        sc = generate_scenario(Category.AMBIGUOUS, mix, np.random.default_rng([cfg.seed, 99, i]))
        start = SimState(sc.initial_state.object_pos, sc.initial_state.object_pos, True, Phase.PLACE)
        outs = {x.outcome for x in mixed_sample(start, sc.policy_params, run.model, cfg.K, rng)}
        both += {Narration.PLACE_LEFT, Narration.PLACE_RIGHT} <= outs
    retention = both / n_states
    ok = after >= 0.80 and after > before and retention >= 0.90
    verdict("C7", ok, f"success {before:.3f} -> {after:.3f} (>= 0.80 and improved, {len(run.traces)} traces, "
            f"q_hat {run.threshold_before.q_hat:.3f} -> {run.threshold_after.q_hat:.3f}); multimodality {retention:.3f} >= 0.90")


def test_c8_intervention_economy(verdict, closed_loop_batches):
    ok = all(r["rate_ups"] < r["rate_var"] for r in closed_loop_batches)
    detail = "; ".join(f"{r['rate_ups']:.3f} < {r['rate_var']:.3f}" for r in closed_loop_batches)
    verdict("C8", ok, f"intervention rate UPS vs variance gate per batch: {detail}")


def test_c9_unit_property_suites(verdict):
    rng = np.random.default_rng(99)
    failures = []

    # quantile vs sort oracle
    for _ in range(1000):
        n, eps = int(rng.integers(1, 300)), float(rng.uniform(0.01, 0.99))
        scores = rng.random(n)
        k = math.ceil((n + 1) * (1 - eps))
        try:
            got = calibrate_quantile(scores, eps).q_hat
            if k > n or got != np.sort(scores)[k - 1]:
                failures.append("quantile")
        except InsufficientCalibrationData:
            if k <= n:
                failures.append("quantile-raise")

    # decide() exhaustiveness over every subset of 5 options
    for r in range(6):
        for subset in itertools.combinations(range(5), r):
            res = decide(subset, 4)
            expect = (
                Strategy.EXECUTE if len(subset) == 1 and subset[0] != 4
                else Strategy.CLARIFY if len(subset) > 1
                else Strategy.INTERVENE
            )
            if res.strategy is not expect:
                failures.append("decide")

    # probability vectors and mixture linearity
    labels = [Narration.PLACE_LEFT, Narration.PLACE_RIGHT, Narration.DROP]
    for _ in range(500):
        opts = group_narrations(list(rng.choice(labels, size=int(rng.integers(1, 11)))))
        for shaping in Shaping:
            cfg = VerifierConfig(shaping, MiscalibrationProfile(0.1, 1.0, 0.1), 0.05, 5.0)
            check_prob_vector(cfg.score(opts, InstructionSpec.ambiguous(), rng))
        p, delta = float(rng.random()), float(rng.uniform(0, 0.2))
        got = bayesian_intent_scores(opts, InstructionSpec.ambiguous(), delta,
                                     IntentHypotheses((Mode.PLACE_LEFT, Mode.PLACE_RIGHT), (p, 1 - p)))
        want = p * conditional_option_likelihood(opts, Mode.PLACE_LEFT, delta) + (1 - p) * conditional_option_likelihood(
            opts, Mode.PLACE_RIGHT, delta)
        if np.max(np.abs(got - want)) > 1e-12:
            failures.append("linearity")

    # delta identity over real intervention traces
    mix = MixConfig()
    for i in range(30):
        sc = generate_scenario(Category.INCAPABLE, mix, np.random.default_rng([5, i]))
        tr = collect_intervention(sc, rng=np.random.default_rng(i))
        for s in tr.steps if tr else ():
            if not np.array_equal(s.base_action.as_array() + np.array(s.delta), s.human_action.as_array()):
                failures.append("delta")

    verdict("C9", not failures, "quantile oracle (1000), decide exhaustive, prob vectors, mixture linearity 1e-12, "
            f"delta identity; failures: {sorted(set(failures)) or 'none'}")
