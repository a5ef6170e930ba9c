"""Compare set constructors and verifier shapings under an overconfident verifier.

Prints the per-category table that ``upsteer report`` would write.

    python demos/score_shaping.py [out_dir]
"""

import sys

from upsteer.harness import RunConfig, build_calibration_set, evaluate, report

out = sys.argv[1] if len(sys.argv) > 1 else "demo_out/score_shaping"
cfg = RunConfig(n_calib=300, n_test=600, temperature=0.1, majority_bias=1.0)
rep = evaluate(cfg, build_calibration_set(cfg))
paths = report(rep, out)
print(paths[1].read_text())
