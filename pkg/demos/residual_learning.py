"""Learn a residual corrector from expert interventions, recalibrate, and redeploy.

The deployment split exposes incapable episodes; their expert traces train a
gate and a delta-action corrector. Half of each later sample set goes through
the corrected policy, the other half stays with the base policy.
"""

from upsteer.harness import RunConfig, residual_pipeline
from upsteer.residual import trace_arrays

cfg = RunConfig(n_episodes=200)
run = residual_pipeline(cfg)

X, gate, _ = trace_arrays(run.traces)
print(f"{len(run.traces)} traces, {len(X)} steps, {int(gate.sum())} under expert control")
print(f"final losses: gate {run.model.history['gate_loss'][-1]:.4f}, "
      f"corrector {run.model.history['corrector_loss'][-1]:.5f}")
print(f"q_hat {run.threshold_before.q_hat:.4f} -> {run.threshold_after.q_hat:.4f} after recalibration")
print(f"success {run.success_before:.3f} -> {run.success_after:.3f} on {cfg.n_episodes} episodes")
