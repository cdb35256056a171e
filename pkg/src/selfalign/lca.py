"""Word-to-region correspondence discovery and codebook cross-prediction loss.

Each word is paired with its most cosine-similar region. Both sides are
described by tempered-softmax assignments over a shared prototype codebook,
and the word assignment is trained to predict the (stop-gradient)
assignment of its matched region.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, cosine_matrix as t_cosine_matrix, log_softmax, softmax
from .numeric import ConfigError, cosine_matrix, softmax_temp

LOG_FLOOR = float(np.log(1e-12))

WORD_MASKS = {
    "all": None,
    "noun+adj+verb": {"noun", "adjective", "verb"},
    "noun": {"noun"},
}

DIRECTIONS = ("word->object", "object->word", "dual")


@dataclass
class CorrespondenceSet:
    region: np.ndarray  # (D,) matched region per word
    cosine: np.ndarray  # (D,) cosine achieved


@dataclass
class AssignmentMatrix:
    probs: np.ndarray  # (n, K)
    tau: float


def discover_correspondences(Tl, Vl) -> CorrespondenceSet:
    """For every word, the region with the highest cosine (lowest index on ties)."""
    sims = cosine_matrix(np.atleast_2d(Tl), np.atleast_2d(Vl))
    j = np.argmax(sims, axis=1)
    return CorrespondenceSet(j, sims[np.arange(len(j)), j])


def codebook_assign(embeds, codebook, tau1: float) -> AssignmentMatrix:
    return AssignmentMatrix(softmax_temp(cosine_matrix(embeds, codebook), tau1), tau1)


def lca_loss(word_assign: AssignmentMatrix, region_assign: AssignmentMatrix,
             corr: CorrespondenceSet, mask=None) -> float:
    """Mean over included words of ``-sum_k p[j+(i), k] log q[i, k]``."""
    q = np.asarray(word_assign.probs, dtype=np.float64)
    p = np.asarray(region_assign.probs, dtype=np.float64)
    mask = np.ones(len(q), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        warnings.warn("word mask selects no words; LCA loss is 0", RuntimeWarning, stacklevel=2)
        return 0.0
    target = p[corr.region]
    ce = -(target * np.log(np.maximum(q, 1e-12))).sum(axis=1)
    return float(ce[mask].mean())


def word_mask(tags, mode: str) -> np.ndarray:
    if mode not in WORD_MASKS:
        raise ConfigError(f"unknown word mask {mode!r}; choose from {sorted(WORD_MASKS)}")
    keep = WORD_MASKS[mode]
    return np.array([keep is None or t in keep for t in tags], dtype=bool)


def sinkhorn(scores: np.ndarray, n_iters: int = 3) -> np.ndarray:
    """Equipartitioned soft assignment of rows to columns (Sinkhorn-Knopp)."""
    q = np.exp(scores - scores.max())
    q /= q.sum()
    n, k = q.shape
    for _ in range(n_iters):
        q /= q.sum(axis=0, keepdims=True)
        q /= k
        q /= q.sum(axis=1, keepdims=True)
        q /= n
    return q * n


# -- batched training path ------------------------------------------------


class FrozenTargets:
    """Matches and stop-gradient targets captured on first use and replayed afterwards.

    Lets a finite-difference oracle hold the pseudo-labels fixed, which is
    what the analytic gradient assumes.
    """

    def __init__(self):
        self.store: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def get(self, key: str, match: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if key not in self.store:
            self.store[key] = (match, np.array(target))
        return self.store[key]


def _cross_predict(pred: Tensor, target_src: Tensor, codebook: Tensor, match: np.ndarray,
                   tau1: float, stopgrad: bool, equipartition: bool,
                   frozen: FrozenTargets | None = None, key: str = "") -> Tensor:
    """Per-item cross-entropy from ``pred`` items to their matched ``target_src`` items.

    ``pred`` is (B, n, h); ``target_src`` is (B, m, h); ``match`` is (B, n) indices into m.
    Returns (B, n) losses.
    """
    B = pred.shape[0]
    logq = log_softmax(t_cosine_matrix(pred, codebook) * (1.0 / tau1), axis=-1).maximum(LOG_FLOOR)
    tgt_logits = t_cosine_matrix(target_src, codebook) * (1.0 / tau1)
    if equipartition:
        m = target_src.shape[1]
        flat = tgt_logits.data.reshape(B * m, -1)
        p = Tensor(sinkhorn(flat.astype(np.float64)).astype(flat.dtype).reshape(tgt_logits.shape))
    else:
        p = softmax(tgt_logits, axis=-1)
        if stopgrad:
            p = p.detach()
    if frozen is not None and (stopgrad or equipartition):
        match, fixed = frozen.get(key, match, p.data)
        p = Tensor(fixed.astype(p.dtype))
    target = p[np.arange(B)[:, None], match]
    return -(target * logq).sum(axis=-1)


def lca_batch_loss(Tl: Tensor, Vl: Tensor, codebook: Tensor, tau1: float,
                   mask: np.ndarray | None = None, direction: str = "word->object",
                   stopgrad: bool = True, equipartition: bool = False,
                   frozen: FrozenTargets | None = None) -> Tensor:
    """LCA loss over a batch of pairs; ``mask`` (B, D) restricts contributing words."""
    if direction not in DIRECTIONS:
        raise ConfigError(f"unknown LCA direction {direction!r}")
    B, D = Tl.shape[0], Tl.shape[1]
    mask = np.ones((B, D), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    sims = t_cosine_matrix(Tl, Vl).data  # (B, D, M)
    terms = []
    if direction in ("word->object", "dual"):
        jplus = np.argmax(sims, axis=2)
        ce = _cross_predict(Tl, Vl, codebook, jplus, tau1, stopgrad, equipartition, frozen, "w2o")
        terms.append(_masked_mean(ce, mask))
    if direction in ("object->word", "dual"):
        masked = np.where(mask[:, :, None], sims, -np.inf)
        iplus = np.argmax(masked, axis=1)  # (B, M) best word per region
        ce = _cross_predict(Vl, Tl, codebook, iplus, tau1, stopgrad, equipartition, frozen, "o2w")
        region_ok = np.repeat(mask.any(axis=1, keepdims=True), Vl.shape[1], axis=1)
        terms.append(_masked_mean(ce, region_ok))
    terms = [t for t in terms if t is not None]
    if not terms:
        warnings.warn("word mask selects no words; LCA loss is 0", RuntimeWarning, stacklevel=2)
        return (Tl * 0.0).sum()
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out * (1.0 / len(terms))


def _masked_mean(ce: Tensor, mask: np.ndarray) -> Tensor | None:
    """Per-pair mean over selected items, then mean over pairs with any selection."""
    counts = mask.sum(axis=1)
    ok = counts > 0
    if not ok.any():
        return None
    w = np.where(ok[:, None], mask / np.maximum(counts, 1)[:, None], 0.0) / ok.sum()
    return (ce * w.astype(ce.dtype)).sum()


def correspondence_accuracy(pairs, params) -> float:
    """Fraction of words whose discovered region matches the generator's ground truth."""
    from .encoder import encode_image, encode_text

    hit = total = 0
    for p in pairs:
        if p.truth is None:
            continue
        corr = discover_correspondences(encode_text(p.text, params).local, encode_image(p.image, params).local)
        hit += int((corr.region == p.truth.word_to_region).sum())
        total += len(corr.region)
    if total == 0:
        raise ConfigError("no pairs carry ground truth")
    return hit / total
