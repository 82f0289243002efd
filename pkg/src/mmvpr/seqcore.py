"""Differentiable building blocks over token sequences.

Every operation here comes as a forward function plus a matching
``*_backward`` that takes the upstream gradient and returns the gradient
with respect to the inputs, accumulating parameter gradients into the
:class:`ParamStore`. Arrays may carry any number of leading batch axes;
the feature axis is always last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .errors import DimensionError, EvaluationError

DTYPE = np.float64


@dataclass(frozen=True)
class TokenSequence:
    """T x D feature matrix whose row 0 is the CLS token."""

    tokens: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.tokens)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"token sequence must be a non-empty T x D matrix, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DimensionError("token sequence contains non-finite values")
        object.__setattr__(self, "tokens", arr)

    @property
    def T(self) -> int:
        return self.tokens.shape[0]

    @property
    def D(self) -> int:
        return self.tokens.shape[1]

    @property
    def cls(self) -> np.ndarray:
        return self.tokens[0]

    @property
    def patches(self) -> np.ndarray:
        return self.tokens[1:]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.tokens, dtype=dtype)


def as_array(x) -> np.ndarray:
    """Unwrap a TokenSequence (or anything array-like) into a float array."""
    if type(x) is np.ndarray and x.dtype.kind == "f":
        return x
    if isinstance(x, TokenSequence):
        x = x.tokens
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DTYPE)
    return arr


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    trainable: bool = True


class ParamStore:
    """Named parameter tensors, each paired with a gradient buffer.

    Single-writer: one store must not be mutated from several threads.
    """

    def __init__(self):
        self._entries: dict[str, Param] = {}
        self._biased: set[str] = set()

    def add(self, name: str, value, trainable: bool = True, bias=None) -> None:
        if name in self._entries:
            raise KeyError(f"parameter {name!r} already exists")
        value = np.array(value, dtype=DTYPE)
        self._entries[name] = Param(value, np.zeros_like(value), trainable)
        if bias is not None:
            self.add(name + ".bias", bias, trainable=trainable)
            self._biased.add(name)

    def init_linear(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator,
                    trainable: bool = True, bias: bool = False) -> None:
        """Glorot-uniform weights of shape (fan_in, fan_out)."""
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        self.add(name, w, trainable=trainable, bias=np.zeros(fan_out) if bias else None)

    def has_bias(self, name: str) -> bool:
        return name in self._biased

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def __setitem__(self, name: str, value) -> None:
        entry = self._entries[name]
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != entry.value.shape:
            raise DimensionError(f"{name}: cannot assign shape {value.shape} to {entry.value.shape}")
        entry.value[...] = value

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def entry(self, name: str) -> Param:
        return self._entries[name]

    def grad(self, name: str) -> np.ndarray:
        return self._entries[name].grad

    def accumulate(self, name: str, g: np.ndarray) -> None:
        self._entries[name].grad += g

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.grad[...] = 0.0

    def names(self, prefix: str = "", trainable_only: bool = False) -> list[str]:
        return [n for n, p in self._entries.items()
                if n.startswith(prefix) and (p.trainable or not trainable_only)]

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for n in self.names(prefix):
            self._entries[n].trainable = flag

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, p in self._entries.items():
            out._entries[n] = Param(p.value.copy(), p.grad.copy(), p.trainable)
        out._biased = set(self._biased)
        return out

    def require(self, name: str, shape: tuple[int, ...], error=DimensionError) -> np.ndarray:
        if name not in self._entries:
            raise error(f"parameter {name!r} missing from store")
        value = self._entries[name].value
        if value.shape != tuple(shape):
            raise error(f"parameter {name!r} has shape {value.shape}, expected {tuple(shape)}")
        return value


# ---------------------------------------------------------------- linear

def linear(x, name: str, store: ParamStore) -> np.ndarray:
    x = as_array(x)
    w = store[name]
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear {name!r}: input shape {x.shape} does not conform to weight shape {w.shape}")
    y = x @ w
    if store.has_bias(name):
        y = y + store[name + ".bias"]
    return y


def linear_backward(dy: np.ndarray, x, name: str, store: ParamStore) -> np.ndarray:
    x = as_array(x)
    w = store[name]
    store.accumulate(name, x.reshape(-1, w.shape[0]).T @ dy.reshape(-1, w.shape[1]))
    if store.has_bias(name):
        store.accumulate(name + ".bias", dy.reshape(-1, w.shape[1]).sum(axis=0))
    return dy @ w.T


# ------------------------------------------------------------ layer norm

@dataclass
class LayerNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


def layer_norm_forward(x, gamma, beta, eps: float = 1e-5) -> tuple[np.ndarray, LayerNormCache]:
    x = as_array(x)
    gamma = np.asarray(gamma, dtype=x.dtype)
    beta = np.asarray(beta, dtype=x.dtype)
    if x.shape[-1] == 0:
        raise DimensionError("layer_norm over a zero-length vector")
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gamma.shape not in ((), (d,)) or beta.shape not in ((), (d,)):
        raise DimensionError(f"layer_norm: x has {d} features, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    if gamma.ndim == 0:
        gamma = np.full(d, gamma)
    return xhat * gamma + beta, LayerNormCache(xhat, inv_std, gamma)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    return layer_norm_forward(x, gamma, beta, eps)[0]


def layer_norm_backward(dy: np.ndarray, cache: LayerNormCache):
    """Returns (dx, dgamma, dbeta); parameter grads are summed over batch axes."""
    xhat = cache.xhat
    d = xhat.shape[-1]
    flat_dy = dy.reshape(-1, d)
    dgamma = np.sum(flat_dy * xhat.reshape(-1, d), axis=0)
    dbeta = flat_dy.sum(axis=0)
    dxhat = dy * cache.gamma
    dx = cache.inv_std / d * (
        d * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


# --------------------------------------------------------------- softmax

def softmax(v) -> np.ndarray:
    v = as_array(v)
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


# ------------------------------------------------------------------ relu

def relu(x) -> np.ndarray:
    return np.maximum(as_array(x), 0.0)


def relu_backward(dy: np.ndarray, pre: np.ndarray) -> np.ndarray:
    return dy * (pre > 0)


# -------------------------------------------------------------- pooling

def mean_over_features(X) -> np.ndarray:
    """Per-token mean over the feature axis: (..., T, D) -> (..., T)."""
    X = as_array(X)
    if X.ndim < 2 or X.shape[-2] < 1:
        raise DimensionError(f"mean_over_features needs at least one token, got shape {X.shape}")
    return X.mean(axis=-1)


def mean_over_features_backward(dm: np.ndarray, D: int) -> np.ndarray:
    return np.repeat(dm[..., None] / D, D, axis=-1)


# ------------------------------------------------------------ grad check

@dataclass
class GradReport:
    errors: dict[str, float]
    passed: bool
    eps: float
    tol: float = field(default=0.0)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def summary(self) -> str:
        lines = [f"{'PASS' if e <= self.tol else 'FAIL'} {name} rel_err={e:.3e}" for name, e in self.errors.items()]
        return "\n".join(lines)


def grad_check(loss_fn: Callable[[ParamStore], float], store: ParamStore, eps: float = 1e-5,
               tol: float = 1e-5, names: list[str] | None = None,
               grad_fn: Callable[[ParamStore], object] | None = None) -> GradReport:
    """Compare analytic gradients against central differences.

    ``loss_fn(store)`` returns the scalar loss. The analytic gradient is
    whatever ``grad_fn(store)`` accumulates into ``store``; without a
    ``grad_fn``, ``loss_fn`` itself must accumulate it. Per scalar the
    error is ``|a - n| / max(1, |a|, |n|)``; each parameter reports its
    maximum.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    names = store.names(trainable_only=True) if names is None else names

    def evaluate() -> float:
        store.zero_grad()
        value = float(loss_fn(store))
        if not math.isfinite(value):
            raise EvaluationError(f"loss is not finite: {value}")
        return value

    if grad_fn is None:
        evaluate()
    else:
        store.zero_grad()
        grad_fn(store)
    analytic = {n: store.grad(n).copy() for n in names}
    errors = {}
    for n in names:
        theta = store[n]
        numeric = np.zeros_like(theta)
        flat = theta.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = evaluate()
            flat[i] = orig - eps
            f_minus = evaluate()
            flat[i] = orig
            numeric.reshape(-1)[i] = (f_plus - f_minus) / (2 * eps)
        a = analytic[n]
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
        errors[n] = float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
    store.zero_grad()
    return GradReport(errors, all(e <= tol for e in errors.values()), eps, tol)
