"""Joint optimisation of baseline, concept-level and context-level losses."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import container
from .autodiff import Tensor
from .cra import ContextFlags, cra_loss, enhance_batch
from .encoder import (HyperParams, ModelParams, base_similarity_matrix, encode_tensors,
                      save_checkpoint, triplet_hardest)
from .features import Pair, SyntheticDataset
from .lca import DIRECTIONS, FrozenTargets, lca_batch_loss, word_mask
from .numeric import ConfigError

LOSS_KEYS = ("L_base", "L_LCA", "L_tg", "L_vg", "L_cs", "L_ca", "total")


class NumericFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class AblationConfig:
    lca_enabled: bool = True
    cra_enabled: bool = True
    lca_direction: str = "word->object"
    word_mask: str = "all"
    cs_enabled: bool = True
    ca_enabled: bool = True
    drop_tg_attended: bool = False
    drop_vg_attended: bool = False
    literal_denominator: bool = False
    target_stopgrad: bool = True
    equipartition: bool = False

    def validate(self) -> None:
        if self.lca_direction not in DIRECTIONS:
            raise ConfigError(f"unknown LCA direction {self.lca_direction!r}")
        word_mask([], self.word_mask)
        if self.drop_tg_attended and self.drop_vg_attended:
            raise ConfigError("cannot drop both attended context halves")

    @property
    def context_flags(self) -> ContextFlags:
        return ContextFlags(text_attended=not self.drop_tg_attended,
                            image_attended=not self.drop_vg_attended)

    def to_dict(self) -> dict:
        return asdict(self)


# Ablation table rows by name; "full" is #0 and "baseline" is the bare backbone (#11).
VARIANTS: dict[str, tuple[str, AblationConfig]] = {
    "full": ("#0", AblationConfig()),
    "wo-lca": ("#1", AblationConfig(lca_enabled=False)),
    "wo-cra": ("#2", AblationConfig(cra_enabled=False)),
    "o2w": ("#3", AblationConfig(lca_direction="object->word")),
    "dual": ("#4", AblationConfig(lca_direction="dual")),
    "noun-adj-verb": ("#5", AblationConfig(word_mask="noun+adj+verb")),
    "noun": ("#6", AblationConfig(word_mask="noun")),
    "wo-cs": ("#7", AblationConfig(cs_enabled=False)),
    "wo-ca": ("#8", AblationConfig(ca_enabled=False)),
    "wo-tg": ("#9", AblationConfig(drop_tg_attended=True)),
    "wo-vg": ("#10", AblationConfig(drop_vg_attended=True)),
    "baseline": ("#11", AblationConfig(lca_enabled=False, cra_enabled=False)),
}


def ablation(name: str) -> AblationConfig:
    try:
        return VARIANTS[name][1]
    except KeyError:
        raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(VARIANTS)}") from None


# -- losses ---------------------------------------------------------------


@dataclass
class LossOutput:
    total: Tensor
    parts: dict[str, Tensor | None]
    bn_stats: dict = field(default_factory=dict)

    def breakdown(self) -> dict[str, float]:
        out = {k: (0.0 if v is None else float(v.data)) for k, v in self.parts.items()}
        out["total"] = float(self.total.data)
        return out


def stack_batch(pairs: Sequence[Pair], mask_mode: str = "all", dtype=np.float32):
    shapes = {(p.image.features.shape, p.text.features.shape) for p in pairs}
    if len(shapes) != 1:
        raise ConfigError("a batch needs equal region and word counts across pairs")
    regions = np.stack([p.image.features for p in pairs]).astype(dtype)
    words = np.stack([p.text.features for p in pairs]).astype(dtype)
    masks = np.stack([word_mask(p.text.tags, mask_mode) & p.text.mask for p in pairs])
    return regions, words, masks


def forward_losses(P: dict[str, Tensor], params: ModelParams, regions: np.ndarray, words: np.ndarray,
                   masks: np.ndarray, hp: HyperParams, abl: AblationConfig,
                   training: bool = True, frozen: FrozenTargets | None = None) -> LossOutput:
    """All loss components for one batch on the parameter tensors ``P``.

    ``frozen`` pins the concept-alignment pseudo-labels across calls (see
    :class:`FrozenTargets`); training leaves it unset.
    """
    Vl, Vc, Vg = encode_tensors(P, regions, "img")
    Tl, Tc, Tg = encode_tensors(P, words, "txt")
    l_base = triplet_hardest(base_similarity_matrix(Vg, Tg), hp.margin)
    parts: dict[str, Tensor | None] = {"L_base": l_base, "L_LCA": None, "L_tg": None,
                                       "L_vg": None, "L_cs": None, "L_ca": None}
    total = l_base
    stats: dict = {}
    if abl.lca_enabled:
        l_lca = lca_batch_loss(Tl, Vl, P["codebook"], hp.tau1, masks, abl.lca_direction,
                               abl.target_stopgrad, abl.equipartition, frozen)
        parts["L_LCA"] = l_lca
        total = total + l_lca
    if abl.cra_enabled:
        ctx = enhance_batch(P, params.bn, Vc, Tc, training, abl.context_flags)
        stats = ctx.bn_stats
        l_cra, cparts = cra_loss(ctx, hp.margin, hp.tau2, hp.n_negatives, abl.cs_enabled,
                                 abl.ca_enabled, abl.literal_denominator, abl.context_flags)
        parts.update(cparts)
        if not abl.cs_enabled:
            parts["L_cs"] = parts["L_tg"] = parts["L_vg"] = None
        if not abl.ca_enabled:
            parts["L_ca"] = None
        if l_cra is not None:
            total = total + l_cra
    return LossOutput(total, parts, stats)


def total_loss(batch: Sequence[Pair], params: ModelParams, hp: HyperParams,
               abl: AblationConfig | None = None, training: bool = True) -> tuple[float, dict[str, float]]:
    """Total loss and its per-component breakdown for a batch (no parameter update)."""
    abl = abl or AblationConfig()
    regions, words, masks = stack_batch(batch, abl.word_mask, params.dtype)
    out = forward_losses(params.tensors(), params, regions, words, masks, hp, abl, training)
    return float(out.total.data), out.breakdown()


# -- optimisation ---------------------------------------------------------


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[k] -= update.astype(params[k].dtype)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= scale
    return total


@dataclass
class TrainReport:
    seed: int
    ablation: dict
    hyperparams: dict
    epochs: list[dict] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def loss_curve(self, key: str = "total") -> list[float]:
        return [e[key] for e in self.epochs]


def _check_finite(out: LossOutput, P: dict[str, Tensor]) -> None:
    for k, v in out.parts.items():
        if v is not None and not np.all(np.isfinite(v.data)):
            raise NumericFailure(f"non-finite loss component {k}")
    for k, t in P.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NumericFailure(f"non-finite gradient for {k}")


def train_step(params: ModelParams, opt: Adam, pairs: Sequence[Pair], hp: HyperParams,
               abl: AblationConfig) -> dict[str, float]:
    regions, words, masks = stack_batch(pairs, abl.word_mask, params.dtype)
    P = params.tensors(requires_grad=True)
    out = forward_losses(P, params, regions, words, masks, hp, abl, training=True)
    if not np.isfinite(out.total.data):
        _check_finite(out, P)
        raise NumericFailure("non-finite total loss")
    out.total.backward()
    grads = {k: t.grad for k, t in P.items() if t.grad is not None}
    _check_finite(out, P)
    clip_grad_norm(grads, hp.grad_clip)
    opt.step(params.weights, grads)
    params.normalize_codebook()
    for name, (mean, var) in out.bn_stats.items():
        params.bn[name].update(mean, var)
    return out.breakdown()


def train(dataset: SyntheticDataset, hp: HyperParams | None = None, abl: AblationConfig | None = None,
          seed: int | None = None, checkpoint_dir=None, evaluate: bool = True,
          log=None, on_epoch=None) -> tuple[ModelParams, TrainReport]:
    """Adam on the summed losses with seeded per-epoch shuffling.

    ``seed`` overrides ``hp.seed``. Validation recall is computed every
    ``hp.eval_every`` epochs (and after the last) when ``evaluate`` is set.
    ``on_epoch(epoch, params)`` runs after every epoch; it must not mutate
    ``params``.
    """
    from .retrieval import evaluate_pairs

    hp = hp or HyperParams()
    abl = abl or AblationConfig()
    if seed is not None:
        hp = replace(hp, seed=seed)
    hp.validate()
    abl.validate()
    init_seq, shuffle_seq = np.random.SeedSequence(hp.seed).spawn(2)
    cfg = dataset.config
    params = ModelParams.init(cfg.region_dim, cfg.word_dim, hp.hidden, hp.n_prototypes,
                              seed=int(init_seq.generate_state(1)[0]))
    rng = np.random.default_rng(shuffle_seq)
    opt = Adam(params.weights, hp.lr)
    train_pairs = dataset.train
    report = TrainReport(hp.seed, abl.to_dict(), hp.to_dict())
    t0 = time.perf_counter()
    for epoch in range(1, hp.epochs + 1):
        params.train()
        order = rng.permutation(len(train_pairs))
        sums = {k: 0.0 for k in LOSS_KEYS}
        n_batches = 0
        for start in range(0, len(order), hp.batch_size):
            idx = order[start:start + hp.batch_size]
            if len(idx) < 2:
                continue
            parts = train_step(params, opt, [train_pairs[i] for i in idx], hp, abl)
            for k in LOSS_KEYS:
                sums[k] += parts[k]
            n_batches += 1
        row = {"epoch": epoch, **{k: v / max(n_batches, 1) for k, v in sums.items()}}
        report.epochs.append(row)
        if evaluate and hp.eval_every and (epoch % hp.eval_every == 0 or epoch == hp.epochs):
            rec = evaluate_pairs(dataset.val, params, abl)
            report.validation.append({"epoch": epoch, **rec.to_dict()})
            if log:
                log(f"epoch {epoch}: loss {row['total']:.4f} val R@sum {rec.rsum:.1f}")
        if on_epoch is not None:
            on_epoch(epoch, params)
    params.eval()
    report.wall_time = time.perf_counter() - t0
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, params, hp, {"ablation": abl.to_dict()})
        container.write_json(f"{checkpoint_dir}/train_report.json", report.to_dict())
    return params, report
