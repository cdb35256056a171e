"""End-to-end acceptance checks; each test records a PASS/FAIL line.

Training-based checks share one module-scoped sweep (4 variants x 5 seeds on
the default synthetic data), which takes a few minutes.
"""

import json
import statistics
import subprocess
import sys
import time

import numpy as np
import pytest

from selfalign.cra import contextual_similarity, enhance_batch, enhance_context, gated_fuse_array
from selfalign.encoder import HyperParams, ModelParams, encode_image, encode_tensors, encode_text, triplet_hardest
from selfalign.features import RawImageFeatures, RawTextFeatures, generate_synthetic
from selfalign.gradcheck import run_gradcheck
from selfalign.lca import codebook_assign, correspondence_accuracy, discover_correspondences, lca_loss
from selfalign.retrieval import (IMAGE, TEXT, build_index, bench_latency, complexity_report, embed,
                                 evaluate_pairs, linear_fit_r2, pair_score, rank_candidates)
from selfalign.trainer import ablation, train

SEEDS = range(5)
VARIANTS = ("full", "baseline", "wo-lca", "wo-cra")
TARGET_R1 = 0.95


@pytest.fixture(scope="module")
def dataset():
    return generate_synthetic(seed=0)


@pytest.fixture(scope="module")
def sweep(dataset):
    """Trained models and val R@sum for every variant and seed; seed 0 of the full model is monitored."""
    hp = HyperParams.desk(eval_every=0)
    out = {"models": {}, "rsum": {v: [] for v in VARIANTS}, "monitor": [], "cpu": None}
    for variant in VARIANTS:
        for seed in SEEDS:
            monitor = None
            if variant == "full" and seed == 0:
                def monitor(epoch, params):
                    if epoch % 10 == 0:
                        rec = evaluate_pairs(dataset.train, params)
                        out["monitor"].append((epoch, rec.i2t[1], rec.t2i[1]))
            c0 = time.process_time()
            params, _ = train(dataset, hp, ablation(variant), seed=seed, evaluate=False, on_epoch=monitor)
            if monitor is not None:
                out["cpu"] = time.process_time() - c0
            out["models"][variant, seed] = params
            out["rsum"][variant].append(evaluate_pairs(dataset.val, params, ablation(variant)).rsum)
    return out


def test_gradient_soundness(verdict):
    summary = run_gradcheck(seeds=SEEDS)
    failed = [f"{r.component}/{r.seed}" for r in summary.results if not r.passed]
    ok = summary.passed and summary.skipped_fraction <= 0.05 and summary.wall_time < 60
    verdict(1, ok, f"components failed={failed or 'none'} kinks={summary.skipped_fraction:.2%} "
                   f"time={summary.wall_time:.1f}s")
    assert ok


def test_overfit_sanity(sweep, verdict):
    reached = [e for e, i2t, t2i in sweep["monitor"] if i2t >= TARGET_R1 and t2i >= TARGET_R1]
    best = max(sweep["monitor"], key=lambda m: min(m[1], m[2]))
    final = sweep["monitor"][-1]
    ok = bool(reached) and reached[0] <= 500 and sweep["cpu"] < 300
    verdict(2, ok, f"first epoch with both train R@1>={TARGET_R1}: {reached[0] if reached else 'never'}; "
                   f"best i2t/t2i={best[1]:.3f}/{best[2]:.3f} at epoch {best[0]}; "
                   f"final={final[1]:.3f}/{final[2]:.3f}; cpu={sweep['cpu']:.0f}s")
    assert ok


def test_directional_improvement(sweep, verdict):
    med = {v: statistics.median(sweep["rsum"][v]) for v in VARIANTS}
    ok = all(med["full"] >= med[v] for v in VARIANTS[1:])
    strict = all(med["full"] > med[v] for v in VARIANTS[1:])
    verdict(3, ok, "median val R@sum " + " ".join(f"{v}={med[v]:.1f}" for v in VARIANTS)
                   + f" strict={strict}")
    assert ok


def test_lca_correspondence_quality(sweep, dataset, verdict):
    accs = [correspondence_accuracy(dataset.val, sweep["models"]["full", s]) for s in SEEDS]
    base = [correspondence_accuracy(dataset.val, sweep["models"]["baseline", s]) for s in SEEDS]
    ok = accs[0] >= 0.80
    verdict(4, ok, f"val correspondence accuracy seed0={accs[0]:.3f} "
                   f"all seeds={[round(a, 3) for a in accs]} baseline={[round(a, 3) for a in base]} "
                   f"chance={1 / dataset.config.n_regions:.3f}")
    assert ok


def test_index_matches_exhaustive_scoring(sweep, dataset, verdict):
    params = sweep["models"]["full", 0]
    rng = np.random.default_rng(5)
    cands = [p.image for p in dataset.val[:90]]
    # exact duplicates force ties, which must keep insertion order
    cands += [cands[i] for i in rng.choice(90, 10, replace=False)]
    queries = [dataset.val[i].text for i in rng.choice(len(dataset.val), 50, replace=False)]
    index = build_index(cands, params, IMAGE)
    mismatched = 0
    for q in queries:
        got = rank_candidates(embed(q, params, TEXT), index)
        oracle = np.array([pair_score(c, q, params) for c in cands])
        mismatched += not np.array_equal(got, np.argsort(-oracle, kind="stable"))
    ok = mismatched == 0
    verdict(5, ok, f"{50 - mismatched}/50 query rankings identical over 100 candidates (10 duplicated)")
    assert ok


def test_decomposability(sweep, dataset, verdict):
    params = sweep["models"]["full", 0].eval()
    P = params.tensors()
    rng = np.random.default_rng(6)
    pool = dataset.val
    picks = rng.choice(len(pool), 20, replace=False)
    bad = 0
    for i in picks:
        alone_img = build_index([pool[i].image], params, IMAGE).vectors[0]
        alone_txt = build_index([pool[i].text], params, TEXT).vectors[0]
        others = rng.choice(len(pool), 15, replace=False)
        batch = list(others[:7]) + [i] + list(others[7:])
        pos = 7
        in_index = build_index([pool[j].image for j in batch], params, IMAGE, threads=3).vectors[pos]
        X = np.stack([pool[j].image.features for j in batch])
        T = np.stack([pool[j].text.features for j in batch])
        _, vc, vg = encode_tensors(P, X, "img")
        _, tc, tg = encode_tensors(P, T, "txt")
        ctx = enhance_batch(P, params.bn, vc, tc, training=False)
        batched_img = np.stack([vg.data[pos], ctx.v_fused.data[pos], ctx.v_agg.data[pos]])
        batched_txt = np.stack([tg.data[pos], ctx.t_fused.data[pos], ctx.t_agg.data[pos]])
        bad += not (np.array_equal(alone_img, in_index) and np.array_equal(alone_img, batched_img)
                    and np.array_equal(alone_txt, batched_txt))
    ok = bad == 0
    verdict(6, ok, f"{20 - bad}/20 samples bit-identical alone, in an index batch and in a tensor batch")
    assert ok


def test_efficiency_shape(verdict):
    params = ModelParams.init(32, 24, 16, 32, seed=0)
    rows = bench_latency(params, [1000, 10000], n_queries=50, repetitions=9)
    enc = [r.encode_ms for r in rows]
    ratio = max(enc) / min(enc)
    scaling = bench_latency(params, [2000, 5000, 10000, 20000], n_queries=30, repetitions=7)
    _, slope, r2 = linear_fit_r2([r.n_candidates for r in scaling], [r.score_ms for r in scaling])
    rep = {c.model: c for c in complexity_report(params.hidden)}["selfalign"]
    big = {c.model: c for c in complexity_report(2048)}["selfalign"]
    ok = (ratio <= 1.2 and r2 >= 0.9 and slope > 0 and rep.interactions == "1x1"
          and rep.dim == 3 * params.hidden and big.dim == 6144)
    verdict(7, ok, f"encode ms {enc[0]:.3f}/{enc[1]:.3f} ratio={ratio:.3f}; score R^2={r2:.4f} "
                   f"over {len(scaling)} sizes; inter={rep.interactions} dim={rep.dim} (h=2048 -> {big.dim})")
    assert ok


def test_invariant_suite(verdict):
    rng = np.random.default_rng(8)
    failures = {k: 0 for k in ("rows", "gate", "S_c", "argmax", "triplet", "gibbs")}
    for _ in range(100):
        D, M, K, h = rng.integers(1, 8), rng.integers(1, 10), rng.integers(2, 12), rng.integers(2, 10)
        tau = float(rng.uniform(0.05, 1.0))
        Tl, Vl, C = rng.standard_normal((D, h)), rng.standard_normal((M, h)), rng.standard_normal((K, h))
        q, p = codebook_assign(Tl, C, tau), codebook_assign(Vl, C, tau)
        failures["rows"] += not (np.allclose(q.probs.sum(1), 1, atol=1e-6) and np.allclose(p.probs.sum(1), 1, atol=1e-6))

        _, g = gated_fuse_array(rng.standard_normal(h), rng.standard_normal(h),
                                rng.standard_normal(2 * h), rng.standard_normal(1))
        failures["gate"] += not (0.0 < g < 1.0)

        corr = discover_correspondences(Tl, Vl)
        scaled = discover_correspondences(Tl * rng.uniform(0.01, 100, (D, 1)), Vl * rng.uniform(0.01, 100, (M, 1)))
        failures["argmax"] += not np.array_equal(corr.region, scaled.region)

        B = int(rng.integers(2, 8))
        S = rng.uniform(-1, 1, (B, B))
        shift = float(rng.uniform(-5, 5))
        failures["triplet"] += not np.isclose(triplet_hardest(S, 0.2), triplet_hardest(S + shift, 0.2), atol=1e-9)

        target = p.probs[corr.region]
        entropy = float(-(target * np.log(np.maximum(target, 1e-300))).sum(1).mean())
        failures["gibbs"] += not (lca_loss(q, p, corr) >= entropy - 1e-12)

    for seed in range(100):
        r = np.random.default_rng(seed)
        params = ModelParams.init(32, 24, 8, 6, seed=seed).eval()
        img = encode_image(RawImageFeatures(r.standard_normal((int(r.integers(1, 9)), 32))), params)
        txt = encode_text(RawTextFeatures(r.standard_normal((int(r.integers(1, 7)), 24))), params)
        ctx = enhance_context(img, txt, params)
        sc = contextual_similarity(ctx.image, ctx.text)
        failures["S_c"] += not (-1.0 <= sc <= 1.0)
        failures["gate"] += not (0.0 < ctx.image.gate < 1.0 and 0.0 < ctx.text.gate < 1.0)
    ok = not any(failures.values())
    verdict(8, ok, "violations over 100 instances each: " + " ".join(f"{k}={v}" for k, v in failures.items()))
    assert ok


def _cli(cwd, *args):
    proc = subprocess.run([sys.executable, "-m", "selfalign", *args], cwd=cwd, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


WALL_CLOCK = {"wall_time", "encode_ms", "score_ms", "encode_ratio_max_min", "score_linear_r2"}


def _strip(obj):
    if isinstance(obj, dict):
        return {k: _strip(v) for k, v in obj.items() if k not in WALL_CLOCK}
    if isinstance(obj, list):
        return [_strip(v) for v in obj]
    return obj


def _normalise(text):
    out = []
    for line in text.splitlines():
        out.append(_strip(json.loads(line)) if line.startswith("{") else line)
    return out


def _bench_csv(text):
    rows = [line.split(",") for line in text.splitlines()]
    keep = [i for i, name in enumerate(rows[0]) if name not in WALL_CLOCK]
    return [[r[i] for i in keep] for r in rows]


COMMANDS = [
    ("gen-data", "--seed", "3", "--out", "data", "--n-train", "16", "--n-val", "24"),
    ("train", "--data", "data", "--out", "model", "--desk", "--epochs", "15", "--eval-every", "5", "--seed", "2"),
    ("eval", "--data", "data", "--model", "model"),
    ("index", "--data", "data", "--model", "model", "--out", "index", "--threads", "2"),
    ("query", "--index", "index", "--model", "model", "--data", "data", "--item", "3"),
    ("export-alignment", "--data", "data", "--model", "model", "--pair", "1", "--out", "align.csv"),
    ("bench", "--sizes", "100,200,300", "--queries", "3", "--repetitions", "2", "--out", "bench.csv"),
    ("gradcheck", "--seeds", "1", "--max-entries", "3"),
]


def test_determinism(tmp_path, verdict):
    runs = {}
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        runs[name] = [_normalise(_cli(d, *cmd)) for cmd in COMMANDS]
    differing = [cmd[0] for cmd, x, y in zip(COMMANDS, runs["a"], runs["b"]) if x != y]
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for rel in files:
        x, y = (tmp_path / "a" / rel), (tmp_path / "b" / rel)
        if rel.name == "bench.csv":
            same = _bench_csv(x.read_text()) == _bench_csv(y.read_text())
        elif rel.suffix == ".json":
            same = _strip(json.loads(x.read_text())) == _strip(json.loads(y.read_text()))
        else:
            same = x.read_bytes() == y.read_bytes()
        if not same:
            differing.append(str(rel))
    ok = not differing
    verdict(9, ok, f"{len(COMMANDS)} commands and {len(files)} output files compared; "
                   f"differing={differing or 'none'}")
    assert ok
