"""Dense numeric primitives: cosine, tempered softmax, batch norm, gradient checking."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor

DEFAULT_DTYPE = np.float32


class DegenerateInputWarning(RuntimeWarning):
    pass


class ConfigError(ValueError):
    """Invalid hyperparameter or configuration value."""


def cosine(a, b, return_flag: bool = False):
    """Cosine similarity of two vectors, clamped to [-1, 1].

    A zero-norm input yields 0.0; with ``return_flag`` the second return
    value reports whether that fallback fired.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    degenerate = na == 0.0 or nb == 0.0
    value = 0.0 if degenerate else float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    if return_flag:
        return value, degenerate
    return value


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs cosine between rows of ``a`` and rows of ``b`` (zero rows give 0)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    an = np.divide(a, na, out=np.zeros_like(a), where=na > 0)
    bn = np.divide(b, nb, out=np.zeros_like(b), where=nb > 0)
    return np.clip(an @ bn.T, -1.0, 1.0)


def softmax_temp(logits, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- batch normalization --------------------------------------------------


@dataclass
class BatchNormState:
    """Per-feature running statistics plus the affine scale/shift."""

    num_features: int
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True
    dtype: type = DEFAULT_DTYPE
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    gamma: np.ndarray = field(default=None)
    beta: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.num_features
        if self.running_mean is None:
            self.running_mean = np.zeros(n, dtype=self.dtype)
        if self.running_var is None:
            self.running_var = np.ones(n, dtype=self.dtype)
        if self.gamma is None:
            self.gamma = np.ones(n, dtype=self.dtype)
        if self.beta is None:
            self.beta = np.zeros(n, dtype=self.dtype)

    def train(self) -> "BatchNormState":
        self.training = True
        return self

    def eval(self) -> "BatchNormState":
        self.training = False
        return self

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.momentum
        self.running_mean[...] = (1 - m) * self.running_mean + m * batch_mean
        self.running_var[...] = (1 - m) * self.running_var + m * batch_var

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.num_features, self.momentum, self.eps, self.training, self.dtype,
                              self.running_mean.copy(), self.running_var.copy(),
                              self.gamma.copy(), self.beta.copy())


def batchnorm(x: Tensor, state: BatchNormState, gamma: Tensor, beta: Tensor,
              training: bool | None = None):
    """Differentiable batch norm over all leading axes of ``x`` (features last).

    Returns ``(y, stats)`` where ``stats`` is ``(mean, var)`` of the batch when
    batch statistics were used, else ``None``. Running statistics are *not*
    touched here; the caller commits ``stats`` via ``state.update``.
    """
    training = state.training if training is None else training
    h = x.shape[-1]
    flat = x.reshape(-1, h)
    n = flat.shape[0]
    if training and n >= 2:
        mean = flat.mean(axis=0)
        centered = flat - mean
        var = (centered * centered).mean(axis=0)
        xhat = centered / (var + state.eps).sqrt()
        stats = (mean.data.copy(), var.data.copy())
    else:
        # batch of one falls back to stored statistics
        rm = state.running_mean.astype(x.dtype)
        rv = state.running_var.astype(x.dtype)
        xhat = (flat - rm) / np.sqrt(rv + np.asarray(state.eps, dtype=x.dtype))
        stats = None
    y = xhat * gamma + beta
    return y.reshape(*x.shape), stats


def batchnorm_forward(x, state: BatchNormState) -> np.ndarray:
    """Plain-array batch norm; in train mode the running statistics are updated."""
    x = np.asarray(x, dtype=state.dtype)
    y, stats = batchnorm(Tensor(x), state, Tensor(state.gamma), Tensor(state.beta))
    if stats is not None:
        state.update(*stats)
    return y.data


# -- finite-difference gradient checking ----------------------------------


@dataclass
class GradReport:
    epsilon: float
    tol: float
    max_rel_error: dict[str, float]
    checked: dict[str, int]
    skipped: dict[str, int]
    failed: dict[str, list[tuple[int, float, float]]]

    @property
    def passed(self) -> bool:
        return all(not v for v in self.failed.values())

    @property
    def n_checked(self) -> int:
        return sum(self.checked.values())

    @property
    def n_skipped(self) -> int:
        return sum(self.skipped.values())

    @property
    def skipped_fraction(self) -> float:
        return self.n_skipped / max(self.n_checked, 1)

    def summary(self) -> str:
        worst = max(self.max_rel_error.values(), default=0.0)
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={worst:.2e} checked={self.n_checked} "
                f"skipped={self.n_skipped} eps={self.epsilon:g} tol={self.tol:g}")


def finite_diff_check(loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
                      params: Mapping[str, np.ndarray], epsilon: float = 1e-3,
                      tol: float = 1e-3, floor: float = 1e-6,
                      fd_dtype=np.float64, max_entries: int | None = None,
                      seed: int = 0) -> GradReport:
    """Compare tape gradients against central differences.

    The analytic gradient is taken at the dtype of ``params``; the difference
    quotients are evaluated at ``fd_dtype`` so that f32 gradients are judged
    against an oracle not dominated by f32 rounding. Relative error uses
    ``|a - n| / max(|a|, |n|, floor)``. An entry whose one-sided slopes
    disagree by at least its own error sits on a kink and is reported as
    skipped rather than failed.
    """
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    leaves = {k: Tensor(np.array(v), requires_grad=True, name=k) for k, v in params.items()}
    loss = loss_fn(leaves)
    loss.backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}

    base = {k: np.array(v, dtype=fd_dtype) for k, v in params.items()}

    def f(arrays):
        return float(loss_fn({k: Tensor(v) for k, v in arrays.items()}).data)

    f0 = f(base)
    rng = np.random.default_rng(seed)
    max_rel: dict[str, float] = {}
    checked: dict[str, int] = {}
    skipped: dict[str, int] = {}
    failed: dict[str, list] = {}
    for name, arr in base.items():
        idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            idx = np.sort(rng.choice(arr.size, size=max_entries, replace=False))
        flat = arr.reshape(-1)
        worst, n_skip, bad = 0.0, 0, []
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = f(base)
            flat[i] = orig - epsilon
            fm = f(base)
            flat[i] = orig
            num = (fp - fm) / (2 * epsilon)
            ana = float(analytic[name].reshape(-1)[i])
            err = abs(ana - num)
            rel = err / max(abs(ana), abs(num), floor)
            if rel <= tol:
                worst = max(worst, rel)
                continue
            fwd = (fp - f0) / epsilon
            bwd = (f0 - fm) / epsilon
            if abs(fwd - bwd) >= err:
                n_skip += 1
                continue
            worst = max(worst, rel)
            bad.append((int(i), ana, num))
        max_rel[name] = worst
        checked[name] = len(idx)
        skipped[name] = n_skip
        failed[name] = bad
    return GradReport(epsilon, tol, max_rel, checked, skipped, failed)
