"""Closed-loop steering on a 40-episode mix: calibrated sets with clarification
against argmax steering and an action-variance intervention gate.
"""

import numpy as np

from upsteer.harness import (
    RunConfig,
    build_calibration_set,
    generate_scenarios,
    intervention_rate,
    run_closed_loop,
    run_variance_gated,
    steer,
)
from upsteer.scenario import Category

cfg = RunConfig(seed=100)
ups = cfg.method("CP", "BayesianIntent")
argmax = cfg.method("Argmax", "Vanilla")
thr = build_calibration_set(cfg, methods=[ups]).thresholds[ups.name]
episodes = generate_scenarios(cfg, "episodes")

outcomes, rep = steer(cfg, ups, thr, episodes)
baseline = run_closed_loop(cfg, argmax, None, episodes)

for cat in Category:
    idx = [i for i, s in enumerate(episodes) if s.category is cat]
    if idx:
        a = np.mean([outcomes[i].success for i in idx])
        b = np.mean([baseline[i].success for i in idx])
        print(f"{cat.value:26s} n={len(idx):2d}  UPS {a:.2f}  argmax {b:.2f}")

print(f"intervention rate: UPS {rep.value(ups.name, 'All', 'intervention_rate'):.3f}, "
      f"variance gate {intervention_rate(run_variance_gated(cfg, episodes)):.3f}")

ex = next(o for o, s in zip(outcomes, episodes) if s.category is Category.AMBIGUOUS and o.clarification_count)
print("\nan ambiguous episode that asked for clarification:")
for p in ex.phases:
    print("  ", p.to_dict())
