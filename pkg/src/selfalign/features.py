"""Synthetic paired region/word features with known word-to-region ground truth.

Each pair is drawn from a latent concept model. A fixed set of unit concept
prototypes lives in a latent space. An image picks ``M`` concepts; every
region gets a per-instance offset (shared with any word describing it) and
independent image-side noise, and is pushed through a fixed image-side
linear map. A caption picks ``D`` of the image's regions and emits one word
per pick from the same concept-plus-instance latent with independent
text-side noise, through a distinct text-side linear map.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .container import ManifestMismatch, ShapeMismatch
from .numeric import ConfigError, DegenerateInputWarning, cosine_matrix

ROLE_TAGS = ("noun", "adjective", "verb", "other")
# fraction of each caption's words carrying each tag; remainder is "other"
ROLE_FRACTIONS = {"noun": 0.5, "adjective": 0.2, "verb": 0.15}


@dataclass
class RawImageFeatures:
    features: np.ndarray  # (M, d_o)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ShapeMismatch(f"image features must be (M>=1, d_o), got {self.features.shape}")

    @property
    def n_regions(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class RawTextFeatures:
    features: np.ndarray  # (D, d_w)
    tags: list[str] | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ShapeMismatch(f"word features must be (D>=1, d_w), got {self.features.shape}")
        n = self.features.shape[0]
        if self.tags is None:
            self.tags = ["other"] * n
        if self.mask is None:
            self.mask = np.ones(n, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if len(self.tags) != n or self.mask.shape != (n,):
            raise ShapeMismatch("tags and mask must have one entry per word")

    @property
    def n_words(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class GroundTruthMap:
    word_to_region: np.ndarray  # (D,) int
    region_concepts: np.ndarray  # (M,) int

    def __post_init__(self):
        self.word_to_region = np.asarray(self.word_to_region, dtype=np.int64)
        self.region_concepts = np.asarray(self.region_concepts, dtype=np.int64)
        m = len(self.region_concepts)
        if np.any(self.word_to_region < 0) or np.any(self.word_to_region >= m):
            raise ShapeMismatch("ground-truth region index out of range")


@dataclass
class Pair:
    image: RawImageFeatures
    text: RawTextFeatures
    truth: GroundTruthMap | None = None


@dataclass(frozen=True)
class SyntheticConfig:
    n_concepts: int = 12
    noise: float = 0.1
    instance_scale: float = 0.5
    n_regions: int = 8
    n_words: int = 6
    region_dim: int = 32
    word_dim: int = 24
    latent_dim: int = 16
    n_train: int = 64
    n_val: int = 200
    orthogonal_prototypes: bool = True

    def validate(self) -> None:
        if self.n_concepts < 2:
            raise ConfigError("need at least 2 latent concepts")
        if self.noise < 0 or self.instance_scale < 0:
            raise ConfigError("noise scales must be non-negative")
        if min(self.n_regions, self.n_words, self.region_dim, self.word_dim, self.latent_dim) < 1:
            raise ConfigError("all sizes must be >= 1")
        if self.orthogonal_prototypes and self.latent_dim < self.n_concepts:
            raise ConfigError("orthogonal prototypes need latent_dim >= n_concepts")
        if self.n_train < 0 or self.n_val < 0:
            raise ConfigError("split sizes must be non-negative")


@dataclass
class LatentModel:
    prototypes: np.ndarray  # (n_concepts, latent_dim)
    image_map: np.ndarray  # (region_dim, latent_dim)
    text_map: np.ndarray  # (word_dim, latent_dim)


@dataclass
class SyntheticDataset:
    pairs: list[Pair]
    config: SyntheticConfig
    seed: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    latent: LatentModel | None = None
    flags: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def subset(self, idx) -> list[Pair]:
        return [self.pairs[i] for i in idx]

    @property
    def train(self) -> list[Pair]:
        return self.subset(self.train_idx)

    @property
    def val(self) -> list[Pair]:
        return self.subset(self.val_idx)


def _role_tags(n_words: int, rng: np.random.Generator) -> list[str]:
    tags = []
    for tag, frac in ROLE_FRACTIONS.items():
        tags += [tag] * int(round(frac * n_words))
    tags = tags[:n_words] + ["other"] * max(0, n_words - len(tags))
    return [tags[i] for i in rng.permutation(n_words)]


def generate_synthetic(config: SyntheticConfig | None = None, seed: int = 0) -> SyntheticDataset:
    cfg = config or SyntheticConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    L, M, D, k = cfg.n_concepts, cfg.n_regions, cfg.n_words, cfg.latent_dim

    if cfg.orthogonal_prototypes:
        q, _ = np.linalg.qr(rng.standard_normal((k, k)))
        protos = q.T[:L].copy()
    else:
        protos = rng.standard_normal((L, k))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    image_map = rng.standard_normal((cfg.region_dim, k)) / np.sqrt(k)
    text_map = rng.standard_normal((cfg.word_dim, k)) / np.sqrt(k)

    flags = []
    if M > L and cfg.noise == 0 and cfg.instance_scale == 0:
        flags.append("duplicate-concepts-without-noise")
        warnings.warn("regions repeat concepts with zero noise; duplicate regions are "
                      "indistinguishable and ground truth resolves to the lowest index",
                      DegenerateInputWarning, stacklevel=2)

    pairs = []
    for _ in range(cfg.n_train + cfg.n_val):
        concepts = rng.choice(L, size=M, replace=M > L)
        latent = protos[concepts] + cfg.instance_scale * rng.standard_normal((M, k))
        regions = (latent + cfg.noise * rng.standard_normal((M, k))) @ image_map.T
        picks = rng.choice(M, size=D, replace=D > M)
        words = (latent[picks] + cfg.noise * rng.standard_normal((D, k))) @ text_map.T
        # lowest region index realizing the word's concept
        first = {}
        for j, c in enumerate(concepts):
            first.setdefault(int(c), j)
        truth = [first[int(concepts[j])] for j in picks]
        tags = _role_tags(D, rng)
        pairs.append(Pair(RawImageFeatures(regions),
                          RawTextFeatures(words, tags),
                          GroundTruthMap(truth, concepts)))
    n = len(pairs)
    return SyntheticDataset(pairs, cfg, seed,
                            train_idx=np.arange(cfg.n_train),
                            val_idx=np.arange(cfg.n_train, n),
                            latent=LatentModel(protos, image_map, text_map),
                            flags=flags)


# -- persistence ----------------------------------------------------------

FEATURES_FILE = "features.saf"
MANIFEST_FILE = "manifest.json"


def write_dataset(path, ds: SyntheticDataset) -> None:
    """Write ``features.saf`` + ``manifest.json`` into directory ``path``."""
    path = Path(path)
    arrays = []
    for p in ds.pairs:
        arrays += [p.image.features, p.text.features]
    if ds.latent is not None:
        arrays += [ds.latent.prototypes, ds.latent.image_map, ds.latent.text_map]
    manifest = {
        "format": "SAF1",
        "config": asdict(ds.config),
        "seed": ds.seed,
        "pair_count": len(ds.pairs),
        "has_latent": ds.latent is not None,
        "train_idx": [int(i) for i in ds.train_idx],
        "val_idx": [int(i) for i in ds.val_idx],
        "flags": list(ds.flags),
        "pairs": [
            {
                "tags": list(p.text.tags),
                "mask": [bool(b) for b in p.text.mask],
                "word_to_region": None if p.truth is None else [int(i) for i in p.truth.word_to_region],
                "region_concepts": None if p.truth is None else [int(i) for i in p.truth.region_concepts],
            }
            for p in ds.pairs
        ],
    }
    container.write_arrays(path / FEATURES_FILE, arrays)
    container.write_json(path / MANIFEST_FILE, manifest)


def read_dataset(path) -> SyntheticDataset:
    path = Path(path)
    manifest = container.read_json(path / MANIFEST_FILE)
    arrays = container.read_arrays(path / FEATURES_FILE)
    n = manifest["pair_count"]
    extra = 3 if manifest.get("has_latent") else 0
    if len(arrays) != 2 * n + extra or len(manifest["pairs"]) != n:
        raise ManifestMismatch(f"manifest declares {n} pairs, binary holds {len(arrays)} records "
                               f"(expected {2 * n + extra})")
    pairs = []
    for i, meta in enumerate(manifest["pairs"]):
        img, txt = arrays[2 * i], arrays[2 * i + 1]
        if img.ndim != 2 or txt.ndim != 2:
            raise ShapeMismatch(f"pair {i}: feature records must be matrices")
        truth = None
        if meta["word_to_region"] is not None:
            if len(meta["word_to_region"]) != txt.shape[0] or len(meta["region_concepts"]) != img.shape[0]:
                raise ShapeMismatch(f"pair {i}: ground truth does not match feature shapes")
            truth = GroundTruthMap(meta["word_to_region"], meta["region_concepts"])
        pairs.append(Pair(RawImageFeatures(img),
                          RawTextFeatures(txt, list(meta["tags"]), np.array(meta["mask"], dtype=bool)),
                          truth))
    latent = None
    if extra:
        latent = LatentModel(*(a.astype(np.float64) for a in arrays[2 * n:]))
    return SyntheticDataset(pairs, SyntheticConfig(**manifest["config"]), manifest["seed"],
                            np.array(manifest["train_idx"], dtype=np.int64),
                            np.array(manifest["val_idx"], dtype=np.int64),
                            latent, list(manifest.get("flags", [])))


def export_alignment_csv(pair: Pair, model, path=None) -> str:
    """Write the word-to-region cosine map of one pair as CSV.

    One ``summary`` row per word (its argmax region and cosine), then one
    ``matrix`` row per (word, region) cell in row-major order. Returns the
    CSV text; writes it atomically when ``path`` is given.
    """
    from .encoder import encode_image, encode_text

    vl = encode_image(pair.image, model).local
    tl = encode_text(pair.text, model).local
    sims = cosine_matrix(tl, vl)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row_type", "word_index", "word_tag", "region_index", "cosine"])
    best = np.argmax(sims, axis=1)
    for i, j in enumerate(best):
        w.writerow(["summary", i, pair.text.tags[i], int(j), repr(float(sims[i, j]))])
    for i in range(sims.shape[0]):
        for j in range(sims.shape[1]):
            w.writerow(["matrix", i, pair.text.tags[i], j, repr(float(sims[i, j]))])
    text = buf.getvalue()
    if path is not None:
        container.atomic_write(path, text)
    return text
