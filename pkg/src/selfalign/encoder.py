"""Independent-embedding backbone and the hinge triplet loss on hardest negatives.

Each modality runs the same three stages: a linear projection of raw
region/word features to ``h`` dims (local embeddings), one residual
single-head self-attention layer without positional encodings (context
embeddings), and average pooling (global embedding).
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import container
from .autodiff import Tensor, cosine_matrix as t_cosine_matrix, softmax
from .container import ShapeMismatch
from .numeric import DEFAULT_DTYPE, BatchNormState, ConfigError, cosine

BN_NAMES = ("txt_global", "img_global", "img_local", "txt_local")


@dataclass
class HyperParams:
    tau1: float = 0.1
    tau2: float = 0.7
    n_prototypes: int = 1024
    n_negatives: int = 512
    margin: float = 0.2
    hidden: int = 16
    lr: float = 2e-4
    batch_size: int = 16
    epochs: int = 500
    seed: int = 0
    grad_clip: float = 2.0
    eval_every: int = 10

    def validate(self) -> None:
        if not (self.tau1 > 0 and self.tau2 > 0):
            raise ConfigError("temperatures must be positive")
        if self.n_prototypes < 2:
            raise ConfigError("need at least 2 prototypes")
        if self.n_negatives < 1:
            raise ConfigError("need at least 1 negative")
        if self.margin < 0:
            raise ConfigError("margin must be non-negative")
        if self.hidden < 1 or self.batch_size < 1 or self.epochs < 0 or self.lr < 0:
            raise ConfigError("invalid size or learning rate")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def desk(cls, **overrides) -> "HyperParams":
        """Small-scale preset: 32 prototypes and 32 negatives (a 64-pair batch set has far fewer locals)."""
        return cls(**{"n_prototypes": 32, "n_negatives": 32, **overrides})


@dataclass
class EncodedImage:
    local: np.ndarray  # (M, h)
    context: np.ndarray  # (M, h)
    global_: np.ndarray  # (h,)


@dataclass
class EncodedText:
    local: np.ndarray  # (D, h)
    context: np.ndarray  # (D, h)
    global_: np.ndarray  # (h,)


def _xavier(rng, fan_out: int, fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)


@dataclass
class ModelParams:
    """All trainable arrays plus batch-norm running statistics.

    ``weights`` maps names to arrays. The batch-norm affine parameters live in
    ``weights`` as ``bn.<name>.gamma`` / ``bn.<name>.beta`` and are the very
    same array objects held by the matching :class:`BatchNormState`.
    """

    region_dim: int
    word_dim: int
    hidden: int
    n_prototypes: int
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    bn: dict[str, BatchNormState] = field(default_factory=dict)

    @classmethod
    def init(cls, region_dim: int, word_dim: int, hidden: int, n_prototypes: int,
             seed: int = 0, dtype=DEFAULT_DTYPE) -> "ModelParams":
        rng = np.random.default_rng(seed)
        h = hidden
        w: dict[str, np.ndarray] = {}
        for side, d_in in (("img", region_dim), ("txt", word_dim)):
            w[f"{side}.proj.w"] = _xavier(rng, h, d_in, dtype)
            w[f"{side}.proj.b"] = np.zeros(h, dtype)
            for m in "qkv":
                w[f"{side}.attn.{m}"] = _xavier(rng, h, h, dtype)
        w["cra.w1"] = _xavier(rng, h, h, dtype)
        w["cra.b1"] = np.zeros(h, dtype)
        w["cra.w2"] = _xavier(rng, h, h, dtype)
        w["cra.b2"] = np.zeros(h, dtype)
        for side in ("txt", "img"):
            w[f"gate.{side}.w"] = _xavier(rng, 1, 2 * h, dtype)[0]
            w[f"gate.{side}.b"] = np.zeros(1, dtype)
        c = rng.standard_normal((n_prototypes, h))
        w["codebook"] = (c / np.linalg.norm(c, axis=1, keepdims=True)).astype(dtype)
        model = cls(region_dim, word_dim, hidden, n_prototypes, w)
        for name in BN_NAMES:
            state = BatchNormState(h, dtype=dtype)
            w[f"bn.{name}.gamma"] = state.gamma
            w[f"bn.{name}.beta"] = state.beta
            model.bn[name] = state
        return model

    @property
    def dtype(self):
        return self.weights["codebook"].dtype

    def train(self) -> "ModelParams":
        for s in self.bn.values():
            s.train()
        return self

    def eval(self) -> "ModelParams":
        for s in self.bn.values():
            s.eval()
        return self

    @property
    def training(self) -> bool:
        return any(s.training for s in self.bn.values())

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.weights.items()}

    def normalize_codebook(self) -> None:
        c = self.weights["codebook"]
        c /= np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-12)

    def copy(self) -> "ModelParams":
        out = ModelParams(self.region_dim, self.word_dim, self.hidden, self.n_prototypes,
                          {k: v.copy() for k, v in self.weights.items()})
        for name, s in self.bn.items():
            c = s.copy()
            c.gamma = out.weights[f"bn.{name}.gamma"]
            c.beta = out.weights[f"bn.{name}.beta"]
            out.bn[name] = c
        return out

    def bn_snapshot_id(self) -> str:
        h = hashlib.sha256()
        for name in BN_NAMES:
            s = self.bn[name]
            for arr in (s.running_mean, s.running_var, s.gamma, s.beta):
                h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    def n_parameters(self, prefix: str | None = None) -> int:
        return sum(v.size for k, v in self.weights.items() if prefix is None or k.startswith(prefix))


# -- forward on tensors ---------------------------------------------------


def encode_tensors(P: Mapping[str, Tensor], feats: Tensor | np.ndarray, side: str):
    """Local, context and global embeddings for a batch ``(B, n, d_in)`` of one modality."""
    x = feats if isinstance(feats, Tensor) else Tensor(feats)
    local = x @ P[f"{side}.proj.w"].T + P[f"{side}.proj.b"]
    q = local @ P[f"{side}.attn.q"].T
    k = local @ P[f"{side}.attn.k"].T
    v = local @ P[f"{side}.attn.v"].T
    scale = 1.0 / np.sqrt(local.shape[-1])
    attn = softmax((q @ k.swapaxes(-1, -2)) * scale, axis=-1)
    context = local + attn @ v
    glob = context.mean(axis=-2)
    return local, context, glob


def _check_dim(got: int, want: int, what: str) -> None:
    if got != want:
        raise ShapeMismatch(f"{what} dimension {got} does not match model ({want})")


def encode_image(raw, params: ModelParams) -> EncodedImage:
    feats = np.asarray(getattr(raw, "features", raw), dtype=params.dtype)
    _check_dim(feats.shape[-1], params.region_dim, "region feature")
    local, context, glob = encode_tensors(params.tensors(), feats[None], "img")
    return EncodedImage(local.data[0], context.data[0], glob.data[0])


def encode_text(raw, params: ModelParams) -> EncodedText:
    feats = np.asarray(getattr(raw, "features", raw), dtype=params.dtype)
    _check_dim(feats.shape[-1], params.word_dim, "word feature")
    local, context, glob = encode_tensors(params.tensors(), feats[None], "txt")
    return EncodedText(local.data[0], context.data[0], glob.data[0])


def base_similarity(img: EncodedImage, txt: EncodedText) -> float:
    return cosine(img.global_, txt.global_)


def base_similarity_matrix(img_global: Tensor, txt_global: Tensor) -> Tensor:
    """``S[i, j] = cos(image i global, text j global)`` for a batch."""
    return t_cosine_matrix(img_global, txt_global)


# -- triplet loss ---------------------------------------------------------


def hardest_negatives(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per anchor i: hardest text (row argmax off-diagonal) and hardest image (column argmax)."""
    s = np.array(scores, dtype=np.float64)
    np.fill_diagonal(s, -np.inf)
    return np.argmax(s, axis=1), np.argmax(s, axis=0)


def triplet_hardest(scores, alpha: float):
    """Hinge triplet ranking loss with batch-hardest negatives, averaged over anchors.

    ``scores[i, j]`` is the similarity of image i and text j; the diagonal
    holds matched pairs. Returns a Tensor for Tensor input, else a float.
    """
    is_tensor = isinstance(scores, Tensor)
    S = scores if is_tensor else Tensor(np.asarray(scores, dtype=np.float64))
    B = S.shape[0]
    if S.shape != (B, B):
        raise ShapeMismatch(f"score matrix must be square, got {S.shape}")
    if B < 2:
        warnings.warn("triplet loss needs a batch of at least 2; returning 0", RuntimeWarning, stacklevel=2)
        out = S.sum() * 0.0 if B else Tensor(np.zeros((), dtype=S.dtype))
        return out if is_tensor else 0.0
    hard_txt, hard_img = hardest_negatives(S.data)
    ar = np.arange(B)
    pos = S[ar, ar]
    loss_txt = (S[ar, hard_txt] - pos + alpha).relu()
    loss_img = (S[hard_img, ar] - pos + alpha).relu()
    out = (loss_txt + loss_img).mean()
    return out if is_tensor else float(out.data)


# -- checkpoints ----------------------------------------------------------


CHECKPOINT_FILE = "model.saf"
SIDECAR_FILE = "model.json"


def save_checkpoint(path, params: ModelParams, hp: HyperParams | None = None, extra: dict | None = None) -> None:
    path = Path(path)
    names = sorted(params.weights)
    arrays = [params.weights[k] for k in names]
    stats = []
    for name in BN_NAMES:
        arrays += [params.bn[name].running_mean, params.bn[name].running_var]
        stats.append(name)
    meta = {
        "format": "SAF1",
        "region_dim": params.region_dim,
        "word_dim": params.word_dim,
        "hidden": params.hidden,
        "n_prototypes": params.n_prototypes,
        "weights": [[k, list(params.weights[k].shape)] for k in names],
        "bn_running": stats,
        "bn": {n: {"momentum": params.bn[n].momentum, "eps": params.bn[n].eps} for n in BN_NAMES},
        "bn_snapshot_id": params.bn_snapshot_id(),
        "hyperparams": None if hp is None else hp.to_dict(),
    }
    if extra:
        meta.update(extra)
    container.write_arrays(path / CHECKPOINT_FILE, arrays)
    container.write_json(path / SIDECAR_FILE, meta)


def load_checkpoint(path) -> tuple[ModelParams, HyperParams | None, dict]:
    path = Path(path)
    meta = container.read_json(path / SIDECAR_FILE)
    arrays = container.read_arrays(path / CHECKPOINT_FILE)
    names = meta["weights"]
    if len(arrays) != len(names) + 2 * len(meta["bn_running"]):
        raise container.ManifestMismatch("checkpoint record count does not match sidecar")
    weights = {}
    for (name, shape), arr in zip(names, arrays):
        if list(arr.shape) != shape:
            raise ShapeMismatch(f"{name}: stored {arr.shape}, sidecar {shape}")
        weights[name] = arr.copy()
    params = ModelParams(meta["region_dim"], meta["word_dim"], meta["hidden"], meta["n_prototypes"], weights)
    rest = arrays[len(names):]
    for i, name in enumerate(meta["bn_running"]):
        cfg = meta["bn"][name]
        params.bn[name] = BatchNormState(
            params.hidden, cfg["momentum"], cfg["eps"], False, np.float32,
            rest[2 * i].copy(), rest[2 * i + 1].copy(),
            weights[f"bn.{name}.gamma"], weights[f"bn.{name}.beta"])
    hp = HyperParams(**meta["hyperparams"]) if meta.get("hyperparams") else None
    return params, hp, meta
