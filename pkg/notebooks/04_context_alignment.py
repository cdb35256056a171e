"""
Context-level alignment
=======================

Each side's pooled context is projected and blended with itself through a
learned gate, then compared with the other side's batch-normalised locals.
Everything stays per-sample at inference, so candidates can be indexed.
"""

# %%
from selfalign.cra import contextual_similarity, enhance_context
from selfalign.encoder import ModelParams, base_similarity, encode_image, encode_text
from selfalign.features import generate_synthetic

ds = generate_synthetic(seed=0)
params = ModelParams.init(32, 24, 16, 32, seed=0).eval()

# %%
pair = ds.val[0]
img, txt = encode_image(pair.image, params), encode_text(pair.text, params)
ctx = enhance_context(img, txt, params)
print("gates", round(ctx.image.gate, 3), round(ctx.text.gate, 3))
print("S_c", round(contextual_similarity(ctx.image, ctx.text), 4))
print("S_base", round(base_similarity(img, txt), 4))

# %%
# matched pairs against a mismatched one
other = ds.val[1]
ctx_mis = enhance_context(img, encode_text(other.text, params), params)
print("mismatched S_c", round(contextual_similarity(ctx_mis.image, ctx_mis.text), 4))
