"""Walkthrough: pass@k as a function of the rollout budget.

Simulated questions get heterogeneous success probabilities; every question
runs n rollouts through the cluster, and the unbiased estimator turns the
(n, successes) counts into a pass@k curve. More attempts per question means
a markedly higher chance that at least one succeeds -- the curve below
roughly doubles between k=1 and k=32.

Run: python3 demos/05_passk_scaling.py
"""

import tempfile
from pathlib import Path

from agentmesh import pass_at_k_single, run_scaling_experiment

workdir = Path(tempfile.mkdtemp(prefix="demo-scaling-"))

# --- 1. the estimator on a single question ------------------------------------
print("== unbiased pass@k for one question: n=32 rollouts, c=4 successes ==")
for k in (1, 2, 4, 8, 16, 32):
    print(f"  pass@{k:<2} = {pass_at_k_single(32, 4, k):.3f}")

# --- 2. the full experiment through the cluster -------------------------------
print("\n== 20 questions x 32 rollouts through the distributed executor ==")
result = run_scaling_experiment(20, 32, seed=0, workers=4, capacity=4,
                                out_csv=workdir / "curve.csv")
print(f"success counts per question: {[r.c for r in result.records]}")
curve = dict(result.curve)
for k in (1, 2, 4, 8, 16, 32):
    bar = "#" * round(curve[k] * 40)
    print(f"  pass@{k:<2} = {curve[k]:.3f} {bar}")
print(f"\ngain from more attempts: pass@32 - pass@1 = "
      f"{curve[32] - curve[1]:.3f}")
print(f"curve CSV written to {workdir / 'curve.csv'}")
