"""Calibrate CP with the Bayesian intent verifier and check coverage on fresh sequences.

    python demos/coverage.py
"""

from upsteer.experiment import phase_coverage, summarize
from upsteer.harness import RunConfig, build_calibration_set, generate_scenarios, score_all, simulate_all, uq_results

cfg = RunConfig(n_calib=500, n_test=2000, constructors=("CP",), shapings=("BayesianIntent",))
cal = build_calibration_set(cfg)
thr = cal.thresholds["CP:BayesianIntent"]
print(f"calibrated on {thr.N} sequences: q_hat = {thr.q_hat:.4f} (epsilon {thr.epsilon})")

results = uq_results(cfg, cal, score_all(cfg, simulate_all(cfg, generate_scenarios(cfg, "test"))))
res = results["CP:BayesianIntent"]
print("per-phase coverage:", phase_coverage(res).round(4).tolist())
print("sequence metrics:", {k: round(v, 4) for k, v in summarize(res).items()})
