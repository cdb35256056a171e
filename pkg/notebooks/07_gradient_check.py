"""
Gradient check
==============

Every loss component's analytic gradient is compared with central
differences on a tiny problem. Argmax matches and stop-gradient targets are
held fixed while the weights are perturbed.
"""

# %%
from selfalign.gradcheck import COMPONENTS, check_component, run_gradcheck

res = check_component("L_LCA", seed=0)
print(res.report.summary())

# %%
summary = run_gradcheck(seeds=range(2), components=COMPONENTS, max_entries=4)
for r in summary.results:
    print(f"{r.component:>7} seed {r.seed}: max rel err {r.to_dict()['max_rel_error']:.2e}")
print("passed", summary.passed, "kinks", f"{summary.skipped_fraction:.2%}", f"{summary.wall_time:.1f}s")
