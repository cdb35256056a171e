"""
Concept-level alignment
=======================

Each word is matched to its most similar region, both are softly assigned to
a shared codebook of prototypes, and the word's assignment is trained to
predict its region's. The match can be checked against the generator's truth.
"""

# %%
import numpy as np

from selfalign.encoder import HyperParams, encode_image, encode_text
from selfalign.features import generate_synthetic
from selfalign.lca import codebook_assign, correspondence_accuracy, discover_correspondences, lca_loss
from selfalign.trainer import ablation, train

ds = generate_synthetic(seed=0)

# %%
# a toy case: two words, three regions, three prototypes
words = np.array([[1.0, 0.0], [0.0, 1.0]])
regions = np.array([[0.9, 0.1], [0.1, 0.9], [-1.0, 0.0]])
codebook = np.array([[1.0, 0.0], [0.0, 1.0], [-0.7, -0.7]])
corr = discover_correspondences(words, regions)
q = codebook_assign(words, codebook, 0.1)
p = codebook_assign(regions, codebook, 0.1)
print("matches", corr.region, "loss", round(lca_loss(q, p, corr), 4))

# %%
# correspondence accuracy before and after a short training run
hp = HyperParams.desk(epochs=60, eval_every=0)
for name in ("baseline", "full"):
    params, _ = train(ds, hp, ablation(name), seed=0, evaluate=False)
    print(name, "accuracy", round(correspondence_accuracy(ds.val, params), 3), "chance", 1 / 8)

# %%
# the per-word view of one validation pair, as exported to CSV
pair = ds.val[0]
found = discover_correspondences(encode_text(pair.text, params).local, encode_image(pair.image, params).local)
for w, (r, t) in enumerate(zip(found.region, pair.truth.word_to_region)):
    print(f"word {w} ({pair.text.tags[w]}): region {r}, truth {t}")
