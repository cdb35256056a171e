"""
Latency and complexity
======================

Encoding a query does not depend on the index size; scoring grows linearly
with it. The complexity table compares per-pair cost with a baseline and a
cross-attention scorer.
"""

# %%
from selfalign.encoder import ModelParams
from selfalign.retrieval import bench_latency, bench_table, complexity_report, linear_fit_r2

params = ModelParams.init(32, 24, 16, 32, seed=0)
rows = bench_latency(params, [1000, 5000, 10000], n_queries=20, repetitions=5)
print(bench_table(rows))

# %%
_, slope, r2 = linear_fit_r2([r.n_candidates for r in rows], [r.score_ms for r in rows])
print(f"scoring: {slope * 1e3:.4f} ms per 1000 candidates, R^2 {r2:.3f}")

# %%
for hidden in (16, 2048):
    for c in complexity_report(hidden):
        print(hidden, c.model, c.interactions, c.dim, c.flops_per_candidate)
