"""Context-level alignment: global-to-local contrast, gated fusion, context score.

For each modality the pooled context embedding is projected through
Linear -> BatchNorm -> ReLU (the "supervision" vector handed to the other
modality's locals), local context embeddings go through BatchNorm -> ReLU
("starred" locals), and a scalar sigmoid gate blends projected and raw pooled
context into the fused context vector. The context score of a pair averages
``cos(text fused, image starred mean)`` and ``cos(image fused, text starred mean)``.
Every vector here depends on one sample only once batch norm runs on stored
statistics, which is what lets the score be served from a precomputed index.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor, concat, cosine_matrix as t_cosine_matrix, logsumexp
from .encoder import EncodedImage, EncodedText, ModelParams, triplet_hardest
from .numeric import BatchNormState, batchnorm, cosine


@dataclass
class ContextFlags:
    """Which halves of the context branch are active (ablations drop one side)."""

    text_attended: bool = True  # text projection, text fusion, cos(t_f, v*_g)
    image_attended: bool = True  # image projection, image fusion, cos(v_f, t*_g)


@dataclass
class SideContext:
    """Enhanced context of one sample of one modality."""

    pooled: np.ndarray  # t_g^c / v_g^c
    projected: np.ndarray | None  # t_s^c / v_s^c
    starred: np.ndarray  # t_i^* / v_i^*
    local_agg: np.ndarray  # t_g^* / v_g^*
    fused: np.ndarray  # t_f^c / v_f^c (equals pooled when the side is dropped)
    gate: float | None


@dataclass
class EnhancedContext:
    image: SideContext
    text: SideContext


@dataclass
class BatchContext:
    """Tensor-valued enhanced context for a batch, both modalities."""

    t_pooled: Tensor
    v_pooled: Tensor
    t_proj: Tensor | None
    v_proj: Tensor | None
    t_star: Tensor  # (B, D, h)
    v_star: Tensor  # (B, M, h)
    t_agg: Tensor
    v_agg: Tensor
    t_fused: Tensor
    v_fused: Tensor
    t_gate: Tensor | None
    v_gate: Tensor | None
    bn_stats: dict = field(default_factory=dict)


def rowwise(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` as a stack of one-row products, so a row's result never depends on its batch."""
    out = x.reshape(*x.shape[:-1], 1, x.shape[-1]) @ w
    return out.reshape(*x.shape[:-1], *w.shape[1:])


def gated_fuse(s: Tensor, g0: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """``g * s + (1 - g) * g0`` with ``g = sigmoid(w . [s; g0] + b)``; batched over leading axes."""
    logit = rowwise(concat([s, g0], axis=-1), w) + b.reshape(())
    g = logit.sigmoid()
    gcol = g.reshape(*g.shape, 1)
    return gcol * s + (1.0 - gcol) * g0, g


def gated_fuse_array(s, g0, w, b) -> tuple[np.ndarray, float]:
    out, g = gated_fuse(Tensor(np.asarray(s)[None]), Tensor(np.asarray(g0)[None]),
                        Tensor(np.asarray(w)), Tensor(np.asarray(b)))
    return out.data[0], float(g.data[0])


def _bn_relu(P: Mapping[str, Tensor], bn: Mapping[str, BatchNormState], name: str, x: Tensor,
             training: bool, stats: dict) -> Tensor:
    y, st = batchnorm(x, bn[name], P[f"bn.{name}.gamma"], P[f"bn.{name}.beta"], training)
    if st is not None:
        stats[name] = st
    return y.relu()


def enhance_batch(P: Mapping[str, Tensor], bn: Mapping[str, BatchNormState], Vc: Tensor, Tc: Tensor,
                  training: bool, flags: ContextFlags | None = None) -> BatchContext:
    flags = flags or ContextFlags()
    stats: dict = {}
    t_pooled = Tc.mean(axis=-2)
    v_pooled = Vc.mean(axis=-2)
    t_star = _bn_relu(P, bn, "txt_local", Tc, training, stats)
    v_star = _bn_relu(P, bn, "img_local", Vc, training, stats)
    t_agg = t_star.mean(axis=-2)
    v_agg = v_star.mean(axis=-2)
    t_proj = v_proj = t_gate = v_gate = None
    t_fused, v_fused = t_pooled, v_pooled
    if flags.text_attended:
        t_proj = _bn_relu(P, bn, "txt_global", rowwise(t_pooled, P["cra.w1"].T) + P["cra.b1"], training, stats)
        t_fused, t_gate = gated_fuse(t_proj, t_pooled, P["gate.txt.w"], P["gate.txt.b"])
    if flags.image_attended:
        v_proj = _bn_relu(P, bn, "img_global", rowwise(v_pooled, P["cra.w2"].T) + P["cra.b2"], training, stats)
        v_fused, v_gate = gated_fuse(v_proj, v_pooled, P["gate.img.w"], P["gate.img.b"])
    return BatchContext(t_pooled, v_pooled, t_proj, v_proj, t_star, v_star, t_agg, v_agg,
                        t_fused, v_fused, t_gate, v_gate, stats)


def _side(ctx: BatchContext, modality: str, i: int = 0) -> SideContext:
    t = modality == "text"
    proj = ctx.t_proj if t else ctx.v_proj
    gate = ctx.t_gate if t else ctx.v_gate
    return SideContext(
        pooled=(ctx.t_pooled if t else ctx.v_pooled).data[i],
        projected=None if proj is None else proj.data[i],
        starred=(ctx.t_star if t else ctx.v_star).data[i],
        local_agg=(ctx.t_agg if t else ctx.v_agg).data[i],
        fused=(ctx.t_fused if t else ctx.v_fused).data[i],
        gate=None if gate is None else float(gate.data[i]),
    )


def enhance_image(img: EncodedImage, params: ModelParams, flags: ContextFlags | None = None) -> SideContext:
    return _enhance_one(params, img.context, None, flags).image


def enhance_text(txt: EncodedText, params: ModelParams, flags: ContextFlags | None = None) -> SideContext:
    return _enhance_one(params, None, txt.context, flags).text


def _enhance_one(params: ModelParams, vc, tc, flags) -> EnhancedContext:
    # a missing side is filled with a dummy so the shared code path runs; its outputs are dropped
    h = params.hidden
    vc = np.zeros((1, h), params.dtype) if vc is None else vc
    tc = np.zeros((1, h), params.dtype) if tc is None else tc
    P = params.tensors()
    ctx = enhance_batch(P, params.bn, Tensor(vc[None]), Tensor(tc[None]), params.training, flags)
    return EnhancedContext(_side(ctx, "image"), _side(ctx, "text"))


def enhance_context(img: EncodedImage, txt: EncodedText, params: ModelParams,
                    flags: ContextFlags | None = None) -> EnhancedContext:
    """Per-sample context enhancement of an image and a text (each side independent)."""
    return EnhancedContext(enhance_image(img, params, flags), enhance_text(txt, params, flags))


def contextual_similarity(image: SideContext, text: SideContext, flags: ContextFlags | None = None) -> float:
    flags = flags or ContextFlags()
    terms = []
    if flags.text_attended:
        terms.append(cosine(text.fused, image.local_agg))
    if flags.image_attended:
        terms.append(cosine(image.fused, text.local_agg))
    return float(np.mean(terms)) if terms else 0.0


def context_similarity_matrix(ctx: BatchContext, flags: ContextFlags | None = None) -> Tensor:
    """``S_c[i, j]`` for image i and text j of a batch."""
    flags = flags or ContextFlags()
    terms = []
    if flags.text_attended:
        terms.append(t_cosine_matrix(ctx.v_agg, ctx.t_fused))
    if flags.image_attended:
        terms.append(t_cosine_matrix(ctx.v_fused, ctx.t_agg))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out * (1.0 / len(terms))


# -- global-to-local contrast ---------------------------------------------


@dataclass
class NegativePool:
    """Per anchor: flat indices (into the batch's (B * n) locals) of the selected negatives."""

    indices: np.ndarray  # (B, N')
    cosines: np.ndarray  # (B, N')


def build_negative_pool(anchor_local_cos: np.ndarray, n_per_sample: int, n_negatives: int) -> NegativePool:
    """Hardest negatives for each anchor from the other samples' locals.

    ``anchor_local_cos`` is (B, B * n); columns ``[i*n, (i+1)*n)`` belong to
    the anchor's own pair and are excluded. Order is descending cosine with
    lower flat index first on ties.
    """
    B, total = anchor_local_cos.shape
    own = np.arange(total)[None, :] // n_per_sample == np.arange(B)[:, None]
    keyed = np.where(own, -np.inf, anchor_local_cos.astype(np.float64))
    order = np.argsort(-keyed, axis=1, kind="stable")
    n_avail = total - n_per_sample
    take = min(n_negatives, n_avail)
    idx = order[:, :take]
    return NegativePool(idx, np.take_along_axis(anchor_local_cos, idx, axis=1))


def contrastive_term(anchor: Tensor, locals_: Tensor, tau2: float, n_negatives: int,
                     literal: bool = False) -> Tensor | None:
    """Mean over anchors and over the anchor's own locals of the tempered InfoNCE loss.

    ``anchor`` is (B, h), ``locals_`` is (B, n, h). Returns ``None`` when the
    batch offers no negatives.
    """
    B, n, h = locals_.shape
    if B < 2:
        return None
    flat = locals_.reshape(B * n, h)
    cos = t_cosine_matrix(anchor, flat) * (1.0 / tau2)  # (B, B*n)
    pool = build_negative_pool(cos.data, n, n_negatives)
    rows = np.arange(B)[:, None]
    pos = cos[rows, rows * n + np.arange(n)[None, :]]  # (B, n)
    neg = cos[rows, pool.indices]  # (B, N')
    N = neg.shape[1]
    neg_b = neg.reshape(B, 1, N) + Tensor(np.zeros((1, n, 1), dtype=neg.dtype))
    if literal:
        lse = logsumexp(neg_b, axis=-1)
    else:
        lse = logsumexp(concat([pos.reshape(B, n, 1), neg_b], axis=-1), axis=-1)
    return (lse - pos).mean()


def contrastive_scalar(pos_cos, neg_cos, tau2: float, literal: bool = False) -> float:
    """Plain-float version for a single anchor: mean over positives."""
    pos = np.asarray(pos_cos, dtype=np.float64) / tau2
    neg = np.asarray(neg_cos, dtype=np.float64) / tau2
    vals = []
    for p in pos:
        denom = neg if literal else np.concatenate([[p], neg])
        m = denom.max()
        vals.append(m + np.log(np.exp(denom - m).sum()) - p)
    return float(np.mean(vals))


def global_local_contrastive(ctx: BatchContext, tau2: float, n_negatives: int, literal: bool = False,
                             flags: ContextFlags | None = None) -> tuple[Tensor | None, Tensor | None, Tensor | None]:
    """``(L_tg, L_vg, L_cs)``; a dropped or negative-free term comes back as ``None``."""
    flags = flags or ContextFlags()
    l_tg = l_vg = None
    if flags.text_attended:
        l_tg = contrastive_term(ctx.t_proj, ctx.v_star, tau2, n_negatives, literal)
    if flags.image_attended:
        l_vg = contrastive_term(ctx.v_proj, ctx.t_star, tau2, n_negatives, literal)
    parts = [t for t in (l_tg, l_vg) if t is not None]
    if not parts:
        if ctx.t_star.shape[0] < 2:
            warnings.warn("batch too small to supply negatives; contrastive loss is 0", RuntimeWarning,
                          stacklevel=2)
        return l_tg, l_vg, None
    l_cs = parts[0] if len(parts) == 1 else (parts[0] + parts[1]) * 0.5
    return l_tg, l_vg, l_cs


def cra_loss(ctx: BatchContext, alpha: float, tau2: float, n_negatives: int, cs_enabled: bool = True,
             ca_enabled: bool = True, literal: bool = False,
             flags: ContextFlags | None = None) -> tuple[Tensor | None, dict[str, Tensor | None]]:
    """``L_CRA = L_cs + L_ca`` with either term switchable; returns (total, parts)."""
    l_tg, l_vg, l_cs = global_local_contrastive(ctx, tau2, n_negatives, literal, flags)
    l_ca = triplet_hardest(context_similarity_matrix(ctx, flags), alpha)
    parts = {"L_tg": l_tg, "L_vg": l_vg, "L_cs": l_cs, "L_ca": l_ca}
    terms = []
    if cs_enabled and l_cs is not None:
        terms.append(l_cs)
    if ca_enabled:
        terms.append(l_ca)
    total = None
    for t in terms:
        total = t if total is None else total + t
    return total, parts
