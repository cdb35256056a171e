"""
Offline index and query
=======================

Every candidate is stored as three vectors (global, fused context and
aggregated locals). A query scores all candidates with one dot product each.
"""

# %%
import tempfile

from selfalign.encoder import HyperParams
from selfalign.features import generate_synthetic
from selfalign.retrieval import IMAGE, TEXT, build_index, embed, evaluate_pairs, pair_score, rank_candidates, read_index, write_index
from selfalign.trainer import ablation, train

ds = generate_synthetic(seed=0)
params, _ = train(ds, HyperParams.desk(epochs=60, eval_every=0), ablation("full"), seed=0, evaluate=False)

# %%
index = build_index([p.image for p in ds.val], params, IMAGE)
print(len(index), "candidates,", index.floats_per_candidate, "floats each")

# %%
query = embed(ds.val[7].text, params, TEXT)
top = rank_candidates(query, index)[:5]
print("top 5:", top, "(truth is 7)")
print("index score", index.scores(query)[top[0]], "exhaustive", pair_score(ds.val[top[0]].image, ds.val[7].text, params))

# %%
with tempfile.TemporaryDirectory() as d:
    write_index(d, index)
    print("reloaded ranks equal:", (rank_candidates(query, read_index(d)) == rank_candidates(query, index)).all())

# %%
print(evaluate_pairs(ds.val, params).format())
