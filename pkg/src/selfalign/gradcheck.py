"""Finite-difference verification of every training loss component."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .encoder import HyperParams, ModelParams
from .features import SyntheticConfig, generate_synthetic
from .lca import FrozenTargets
from .numeric import GradReport, finite_diff_check
from .trainer import AblationConfig, forward_losses, stack_batch

# analytic gradients are f32; entries smaller than this are at f32 accumulation noise
F32_GRAD_FLOOR = 1e-4

COMPONENTS = ("L_base", "L_LCA", "L_tg", "L_vg", "L_cs", "L_ca", "total")


@dataclass(frozen=True)
class GradcheckShape:
    n_regions: int = 4
    n_words: int = 3
    hidden: int = 8
    n_prototypes: int = 6
    n_negatives: int = 4
    batch: int = 4


@dataclass
class GradcheckResult:
    component: str
    seed: int
    report: GradReport

    @property
    def passed(self) -> bool:
        return self.report.passed

    def to_dict(self) -> dict:
        r = self.report
        return {"component": self.component, "seed": self.seed, "passed": r.passed,
                "max_rel_error": max(r.max_rel_error.values(), default=0.0),
                "checked": r.n_checked, "skipped": r.n_skipped,
                "skipped_fraction": r.skipped_fraction,
                "failed": sum(len(v) for v in r.failed.values())}


@dataclass
class GradcheckSummary:
    results: list[GradcheckResult] = field(default_factory=list)
    max_skipped_fraction: float = 0.05
    wall_time: float = 0.0

    @property
    def skipped_fraction(self) -> float:
        checked = sum(r.report.n_checked for r in self.results)
        return sum(r.report.n_skipped for r in self.results) / max(checked, 1)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results) and self.skipped_fraction <= self.max_skipped_fraction

    def to_dict(self) -> dict:
        return {"passed": self.passed, "skipped_fraction": self.skipped_fraction,
                "results": [r.to_dict() for r in self.results]}


def desk_problem(seed: int, shape: GradcheckShape = GradcheckShape(), dtype=np.float32):
    """A small random batch and freshly initialised model at the given shape."""
    cfg = SyntheticConfig(n_regions=shape.n_regions, n_words=shape.n_words,
                          n_train=shape.batch, n_val=0)
    ds = generate_synthetic(cfg, seed=seed)
    params = ModelParams.init(cfg.region_dim, cfg.word_dim, shape.hidden, shape.n_prototypes,
                              seed=seed + 1000, dtype=dtype)
    hp = HyperParams(n_prototypes=shape.n_prototypes, n_negatives=shape.n_negatives,
                     hidden=shape.hidden, batch_size=shape.batch)
    regions, words, masks = stack_batch(ds.train, "all", dtype)
    return params, hp, regions, words, masks


def check_component(component: str, seed: int, shape: GradcheckShape = GradcheckShape(),
                    abl: AblationConfig | None = None, epsilon: float = 1e-3, tol: float = 1e-3,
                    max_entries: int | None = 8, floor: float = F32_GRAD_FLOOR) -> GradcheckResult:
    abl = abl or AblationConfig()
    params, hp, regions, words, masks = desk_problem(seed, shape)
    frozen = FrozenTargets()

    def loss_fn(P):
        out = forward_losses(P, params, regions, words, masks, hp, abl, training=True, frozen=frozen)
        return out.total if component == "total" else out.parts[component]

    report = finite_diff_check(loss_fn, params.weights, epsilon=epsilon, tol=tol, floor=floor,
                               max_entries=max_entries, seed=seed)
    return GradcheckResult(component, seed, report)


def run_gradcheck(seeds=range(5), components=COMPONENTS, shape: GradcheckShape = GradcheckShape(),
                  epsilon: float = 1e-3, tol: float = 1e-3, max_entries: int | None = 8,
                  max_skipped_fraction: float = 0.05, log=None) -> GradcheckSummary:
    t0 = time.perf_counter()
    summary = GradcheckSummary(max_skipped_fraction=max_skipped_fraction)
    for seed in seeds:
        for comp in components:
            res = check_component(comp, int(seed), shape, epsilon=epsilon, tol=tol, max_entries=max_entries)
            summary.results.append(res)
            if log:
                log(f"seed {seed} {comp}: {res.report.summary()}")
    summary.wall_time = time.perf_counter() - t0
    return summary
