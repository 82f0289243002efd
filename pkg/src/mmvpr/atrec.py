"""Attention-based text recalibration.

The joint image+text sequence is pooled over features into one scalar per
token, pushed through two bias-free ReLU layers, and the resulting
non-negative weights rescale the text tokens row by row. ``Z'`` is a row
vector, so the weights are ``relu(relu(Z' W1) W2)`` with ``W1`` of shape
``(M + N, T1)`` and ``W2`` of shape ``(T1, N)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .seqcore import (ParamStore, TokenSequence, as_array, linear, linear_backward,
                      mean_over_features, mean_over_features_backward, relu, relu_backward)

W1 = "atrec.w1"
W2 = "atrec.w2"


def init_atrec(store: ParamStore, M: int, N: int, T1: int, rng: np.random.Generator) -> None:
    store.init_linear(W1, M + N, T1, rng)
    store.init_linear(W2, T1, N, rng)


@dataclass
class RecalibrationResult:
    S: np.ndarray
    Y: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)

    def sequence(self) -> TokenSequence:
        return TokenSequence(self.Y)


def recalibrate(X, Y, store: ParamStore) -> RecalibrationResult:
    """Rescale text tokens ``Y`` by weights computed from ``[X; Y]``.

    Leading batch axes are allowed on both inputs.
    """
    X, Y = as_array(X), as_array(Y)
    if X.shape[-1] != Y.shape[-1]:
        raise DimensionError(f"X has D={X.shape[-1]} but Y has D={Y.shape[-1]}")
    M, N = X.shape[-2], Y.shape[-2]
    w1, w2 = store[W1], store[W2]
    if w1.shape[0] != M + N or w2.shape != (w1.shape[1], N):
        raise DimensionError(
            f"AT-REC weights W1{w1.shape}, W2{w2.shape} do not match M={M}, N={N}, T1={w1.shape[1]}")
    z = np.concatenate([mean_over_features(X), mean_over_features(Y)], axis=-1)
    h = linear(z, W1, store)
    a = relu(h)
    s_pre = linear(a, W2, store)
    S = relu(s_pre)
    Yp = S[..., None] * Y
    cache = {"X": X, "Y": Y, "z": z, "h": h, "a": a, "s_pre": s_pre}
    return RecalibrationResult(S, Yp, cache)


def recalibrate_backward(dYp: np.ndarray, result: RecalibrationResult, store: ParamStore):
    """Accumulate W1/W2 gradients; return (dX, dY)."""
    c = result.cache
    X, Y = c["X"], c["Y"]
    M, D = X.shape[-2], X.shape[-1]
    dS = np.sum(dYp * Y, axis=-1)
    dY = result.S[..., None] * dYp
    ds_pre = relu_backward(dS, c["s_pre"])
    da = linear_backward(ds_pre, c["a"], W2, store)
    dh = relu_backward(da, c["h"])
    dz = linear_backward(dh, c["z"], W1, store)
    dX = mean_over_features_backward(dz[..., :M], D)
    dY = dY + mean_over_features_backward(dz[..., M:], D)
    return dX, dY


def kink_margin(result: RecalibrationResult) -> float:
    """Smallest |pre-activation| of either ReLU; small values spoil FD checks."""
    c = result.cache
    return float(min(np.min(np.abs(c["h"])), np.min(np.abs(c["s_pre"]))))
