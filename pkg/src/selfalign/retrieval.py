"""Precomputed retrieval index, interaction-free scoring, recall, and cost accounting.

Every candidate is reduced offline to three ``h``-vectors: its global
embedding, its fused context embedding and its local-aggregated context
embedding. A query produces the same triple, and a pair is scored as

    cos(global_q, global_c) + 0.5 * (cos(fused_q, agg_c) + cos(fused_c, agg_q))

which is one dot product of two ``3h`` vectors once the parts are
L2-normalised and the query's halves are swapped and weighted.
"""

from __future__ import annotations

import csv
import gc
import io
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .container import ManifestMismatch, ShapeMismatch
from .cra import ContextFlags, SideContext, contextual_similarity, enhance_image, enhance_text
from .encoder import ModelParams, base_similarity, encode_image, encode_text
from .features import Pair, RawImageFeatures, RawTextFeatures

IMAGE, TEXT = "image", "text"


@dataclass(frozen=True)
class ScoreConfig:
    """Which score terms are live; mirrors the trained ablation."""

    context: bool = True
    text_attended: bool = True  # cos(text fused, image agg)
    image_attended: bool = True  # cos(image fused, text agg)

    @classmethod
    def from_ablation(cls, abl) -> "ScoreConfig":
        if abl is None:
            return cls()
        return cls(abl.cra_enabled, not abl.drop_tg_attended, not abl.drop_vg_attended)

    @property
    def flags(self) -> ContextFlags:
        return ContextFlags(self.text_attended, self.image_attended)


@dataclass
class Embedding:
    """The triple of vectors a sample contributes to scoring."""

    global_: np.ndarray
    fused: np.ndarray
    local_agg: np.ndarray
    modality: str

    def as_array(self) -> np.ndarray:
        return np.stack([self.global_, self.fused, self.local_agg]).astype(np.float32)


def embed(raw, params: ModelParams, modality: str, score: ScoreConfig | None = None) -> Embedding:
    """Encode one sample in isolation (batch norm must be in eval mode for reuse)."""
    flags = (score or ScoreConfig()).flags
    if modality == IMAGE:
        enc = encode_image(raw, params)
        side = enhance_image(enc, params, flags)
    elif modality == TEXT:
        enc = encode_text(raw, params)
        side = enhance_text(enc, params, flags)
    else:
        raise ValueError(f"unknown modality {modality!r}")
    return Embedding(enc.global_, side.fused, side.local_agg, modality)


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


@dataclass
class RetrievalIndex:
    vectors: np.ndarray  # (n, 3, h) float32: global, fused, local-aggregated
    ids: list[str]
    modality: str
    bn_snapshot_id: str
    score: ScoreConfig = field(default_factory=ScoreConfig)

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        self.vectors.flags.writeable = False
        if self.vectors.ndim != 3 or self.vectors.shape[1] != 3:
            raise ShapeMismatch(f"index vectors must be (n, 3, h), got {self.vectors.shape}")
        if len(self.ids) != len(self.vectors):
            raise ManifestMismatch("one id per candidate required")
        n, _, h = self.vectors.shape
        self._unit = _unit(self.vectors).reshape(n, 3 * h)

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def hidden(self) -> int:
        return self.vectors.shape[2]

    @property
    def floats_per_candidate(self) -> int:
        return 3 * self.hidden

    def query_vector(self, query: Embedding) -> np.ndarray:
        """The ``3h`` query vector whose dot product with a candidate row is the pair score."""
        g, f, a = _unit(query.global_), _unit(query.fused), _unit(query.local_agg)
        h = self.hidden
        if not self.score.context:
            return np.concatenate([g, np.zeros(2 * h)])
        # the text-fused term pairs text fused with image agg; place it by modality
        if query.modality == IMAGE:
            w_cand_fused = 1.0 if self.score.text_attended else 0.0
            w_query_fused = 1.0 if self.score.image_attended else 0.0
        else:
            w_cand_fused = 1.0 if self.score.image_attended else 0.0
            w_query_fused = 1.0 if self.score.text_attended else 0.0
        n_terms = w_cand_fused + w_query_fused
        return np.concatenate([g, a * (w_cand_fused / n_terms), f * (w_query_fused / n_terms)])

    def scores(self, query: Embedding) -> np.ndarray:
        if query.modality == self.modality:
            raise ValueError("query modality must differ from the index modality")
        y = self.query_vector(query)
        # row-wise reduction keeps identical candidates bit-identical
        return (self._unit * y).sum(axis=1).astype(np.float32)


def build_index(candidates: Sequence, params: ModelParams, modality: str, ids: Sequence[str] | None = None,
                score: ScoreConfig | None = None, threads: int = 1) -> RetrievalIndex:
    """Encode every candidate on its own, with batch norm in eval mode."""
    score = score or ScoreConfig()
    was_training = params.training
    params.eval()
    try:
        def one(raw):
            return embed(raw, params, modality, score).as_array()

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                rows = list(pool.map(one, candidates))
        else:
            rows = [one(c) for c in candidates]
    finally:
        if was_training:
            params.train()
    h = params.hidden
    vectors = np.stack(rows) if rows else np.zeros((0, 3, h), np.float32)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(rows))]
    return RetrievalIndex(vectors, ids, modality, params.bn_snapshot_id(), score)


def rank_candidates(query: Embedding, index: RetrievalIndex) -> np.ndarray:
    """Candidate positions by descending score; insertion order breaks ties."""
    if len(index) == 0:
        return np.zeros(0, dtype=np.int64)
    s = index.scores(query)
    return np.argsort(-s, kind="stable")


def pair_score(image: Pair | RawImageFeatures, text, params: ModelParams, score: ScoreConfig | None = None) -> float:
    """Exhaustive per-pair score straight from the encoders, for cross-checking the index."""
    score = score or ScoreConfig()
    img_raw = image.image if isinstance(image, Pair) else image
    txt_raw = text.text if isinstance(text, Pair) else text
    ei, et = encode_image(img_raw, params), encode_text(txt_raw, params)
    s = base_similarity(ei, et)
    if score.context:
        ci: SideContext = enhance_image(ei, params, score.flags)
        ct: SideContext = enhance_text(et, params, score.flags)
        s += contextual_similarity(ci, ct, score.flags)
    return s


def write_index(path, index: RetrievalIndex) -> None:
    path = Path(path)
    container.write_arrays(path / "index.saf", [index.vectors])
    container.write_json(path / "index.json", {
        "format": "SAF1",
        "hidden": index.hidden,
        "count": len(index),
        "modality": index.modality,
        "ids": index.ids,
        "bn_snapshot_id": index.bn_snapshot_id,
        "score": asdict(index.score),
    })


def read_index(path) -> RetrievalIndex:
    path = Path(path)
    meta = container.read_json(path / "index.json")
    (vectors,) = container.read_arrays(path / "index.saf")
    if vectors.shape[0] != meta["count"] or vectors.shape[2] != meta["hidden"]:
        raise ManifestMismatch("index manifest does not match stored vectors")
    return RetrievalIndex(vectors, meta["ids"], meta["modality"], meta["bn_snapshot_id"],
                          ScoreConfig(**meta["score"]))


# -- recall ---------------------------------------------------------------


def recall_at_k(rankings: Sequence[Sequence[int]], ground_truth: Sequence, ks=(1, 5, 10)) -> dict[int, float]:
    """Fraction of queries with any ground-truth candidate in the top K.

    ``ground_truth[q]`` is one candidate position or a collection of them.
    K beyond the list length means the whole list.
    """
    if len(rankings) != len(ground_truth):
        raise ValueError("one ground-truth entry per query required")
    out = {}
    for k in ks:
        hits = 0
        for ranking, gt in zip(rankings, ground_truth):
            gt = {gt} if np.isscalar(gt) else set(gt)
            if not gt:
                raise ValueError("every query needs at least one ground-truth candidate")
            top = set(int(c) for c in list(ranking)[:k])
            hits += bool(top & gt)
        out[k] = hits / len(rankings) if rankings else 0.0
    return out


@dataclass
class RecallResult:
    i2t: dict[int, float]  # image query -> text retrieval
    t2i: dict[int, float]

    @property
    def rsum(self) -> float:
        """Sum of all six recalls in percent."""
        return 100.0 * (sum(self.i2t.values()) + sum(self.t2i.values()))

    def to_dict(self) -> dict:
        d = {f"i2t_R@{k}": v for k, v in self.i2t.items()}
        d.update({f"t2i_R@{k}": v for k, v in self.t2i.items()})
        d["R@sum"] = self.rsum
        return d

    def format(self) -> str:
        cells = [f"{100 * v:5.1f}" for v in list(self.i2t.values()) + list(self.t2i.values())]
        return " ".join(cells) + f" | R@sum {self.rsum:6.1f}"


def evaluate_pairs(pairs: Sequence[Pair], params: ModelParams, abl=None, ks=(1, 5, 10),
                   threads: int = 1) -> RecallResult:
    """Both retrieval directions over one-to-one pairs (text i matches image i)."""
    score = ScoreConfig.from_ablation(abl)
    img_index = build_index([p.image for p in pairs], params, IMAGE, score=score, threads=threads)
    txt_index = build_index([p.text for p in pairs], params, TEXT, score=score, threads=threads)
    i2t = _direction(img_index, txt_index, ks)
    t2i = _direction(txt_index, img_index, ks)
    return RecallResult(i2t, t2i)


def _direction(queries: RetrievalIndex, index: RetrievalIndex, ks) -> dict[int, float]:
    rankings = []
    for q in range(len(queries)):
        g, f, a = queries.vectors[q]
        rankings.append(rank_candidates(Embedding(g, f, a, queries.modality), index))
    return recall_at_k(rankings, list(range(len(queries))), ks)


# -- complexity and latency -----------------------------------------------


@dataclass
class ComplexityReport:
    model: str
    encoding_interactions: int  # cross-modal interactions per candidate while encoding
    scoring_interactions: tuple[int, int]  # (rows, cols) of the per-pair interaction grid
    dim: int
    flops_per_candidate: int
    n_candidates: int

    @property
    def interactions(self) -> str:
        r, c = self.scoring_interactions
        return f"{r}x{c}"

    @property
    def interactions_per_pair(self) -> int:
        r, c = self.scoring_interactions
        return r * c

    def to_dict(self) -> dict:
        d = asdict(self)
        d["interactions"] = self.interactions
        return d


def complexity_report(hidden: int, n_candidates: int = 100_000, with_context: bool = True,
                      n_regions: int = 36, n_words: int = 32) -> list[ComplexityReport]:
    """This engine's scoring cost next to a baseline and a token-wise cross-attention scorer."""
    dim = 3 * hidden if with_context else hidden
    rows = [
        ComplexityReport("baseline", 0, (1, 1), hidden, 2 * hidden, n_candidates),
        ComplexityReport("selfalign" if with_context else "selfalign-no-context", 0, (1, 1), dim,
                         2 * dim, n_candidates),
        ComplexityReport("cross-attention", 0, (n_words, n_regions), hidden,
                         2 * hidden * n_words * n_regions, n_candidates),
    ]
    return rows


@dataclass
class BenchRow:
    n_candidates: int
    encode_ms: float
    score_ms: float
    n_queries: int
    repetitions: int


def _median_per_query(fn, items, repetitions: int) -> float:
    times = []
    gc_was = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repetitions):
            t0 = time.perf_counter()
            for it in items:
                fn(it)
            times.append((time.perf_counter() - t0) / len(items))
    finally:
        if gc_was:
            gc.enable()
    return statistics.median(times) * 1e3


def bench_latency(params: ModelParams, index_sizes: Sequence[int], n_queries: int = 20,
                  repetitions: int = 5, warmup: int = 2, seed: int = 0, threads: int = 1) -> list[BenchRow]:
    """Per-query encoding and scoring wall-clock at several index sizes.

    Candidates are random image features; queries are random texts of the
    model's input shapes.
    """
    if n_queries <= 0 or not index_sizes:
        return []
    rng = np.random.default_rng(seed)
    params.eval()
    queries = [RawTextFeatures(rng.standard_normal((6, params.word_dim))) for _ in range(n_queries)]
    biggest = max(index_sizes)
    pool = [RawImageFeatures(rng.standard_normal((8, params.region_dim))) for _ in range(biggest)]
    full = build_index(pool, params, IMAGE, threads=threads)
    rows = []
    for n in index_sizes:
        index = RetrievalIndex(full.vectors[:n], full.ids[:n], IMAGE, full.bn_snapshot_id)
        encode = lambda q: embed(q, params, TEXT)  # noqa: E731
        embs = [encode(q) for q in queries]
        for _ in range(warmup):
            for q, e in zip(queries, embs):
                encode(q)
                rank_candidates(e, index)
        enc_ms = _median_per_query(encode, queries, repetitions)
        score_ms = _median_per_query(lambda e: rank_candidates(e, index), embs, repetitions)
        rows.append(BenchRow(n, enc_ms, score_ms, n_queries, repetitions))
    return rows


def bench_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n_candidates", "encode_ms", "score_ms", "n_queries", "repetitions"])
    for r in rows:
        w.writerow([r.n_candidates, f"{r.encode_ms:.6f}", f"{r.score_ms:.6f}", r.n_queries, r.repetitions])
    return buf.getvalue()


def bench_table(rows: Sequence[BenchRow]) -> str:
    lines = [f"{'candidates':>12} {'encode ms':>12} {'score ms':>12}"]
    for r in rows:
        lines.append(f"{r.n_candidates:>12d} {r.encode_ms:>12.4f} {r.score_ms:>12.4f}")
    return "\n".join(lines)


def linear_fit_r2(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares line ``y = a + b x``; returns ``(a, b, R^2)``."""
    from scipy.stats import linregress

    res = linregress(np.asarray(x, float), np.asarray(y, float))
    return float(res.intercept), float(res.slope), float(res.rvalue ** 2)
