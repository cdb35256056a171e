"""
Training the full model and its ablations
=========================================

The full objective adds a concept-level term and a context-level term to a
hardest-negative triplet loss. Each named ablation switches off one piece.
A short run is enough to see the losses move; use 500 epochs for real numbers.
"""

# %%
from selfalign.encoder import HyperParams
from selfalign.features import generate_synthetic
from selfalign.retrieval import evaluate_pairs
from selfalign.trainer import VARIANTS, ablation, train

ds = generate_synthetic(seed=0)
hp = HyperParams.desk(epochs=40, eval_every=20)
print(sorted(VARIANTS))

# %%
params, report = train(ds, hp, ablation("full"), seed=0)
for row in report.epochs[::10]:
    print({k: round(v, 4) for k, v in row.items()})
print(report.validation[-1])

# %%
# a few variants side by side on the validation split
for name in ("baseline", "wo-lca", "wo-cra", "full"):
    p, _ = train(ds, hp, ablation(name), seed=0, evaluate=False)
    print(f"{name:>9}", evaluate_pairs(ds.val, p, ablation(name)).format())
