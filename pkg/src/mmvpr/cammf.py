"""Agent-based cross-attention fusion between image and text tokens.

Three agents gather information from the other modality: the image CLS
token ``z_m`` and the mean patch token ``z_a`` attend to the (recalibrated)
text tokens, while the text CLS token ``z_t`` attends to the image tokens
followed by 14 regional averages. Each agent runs ``L`` layers of
multi-head cross-attention with residual, followed by the LN/MLP block::

    z_hat = MCA(z W_q, R W_k, R W_v) + z
    z'    = LN_out(MLP(LN_in(z_hat)) + z_hat)

Parameters are independent per branch and per layer. Names follow
``fuse.<branch>.<layer>.<part>`` with layers numbered from 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DimensionError
from .seqcore import (ParamStore, as_array, layer_norm_backward, layer_norm_forward, linear,
                      linear_backward, relu, relu_backward, softmax, softmax_backward)

BRANCHES = ("m", "a", "t")
N_REGIONS = 14
_LEVELS = (1, 2, 3)


@dataclass
class AgentSet:
    z_m: np.ndarray
    z_a: np.ndarray
    z_t: np.ndarray

    def __getitem__(self, branch: str) -> np.ndarray:
        return getattr(self, "z_" + branch)


# ------------------------------------------------------- regional pooling

def _segments(n: int, parts: int) -> list[tuple[int, int]]:
    bounds = [(i * n) // parts for i in range(parts + 1)]
    return list(zip(bounds[:-1], bounds[1:]))


@lru_cache(maxsize=32)
def pooling_matrix(grid_h: int, grid_w: int) -> np.ndarray:
    """(14, grid_h*grid_w) averaging matrix: 1x1, then 2x2, then 3x3 row-major."""
    if grid_h < 3 or grid_w < 3:
        raise ConfigError(f"regional pooling needs a grid of at least 3x3, got {grid_h}x{grid_w}")
    rows = []
    for level in _LEVELS:
        for r0, r1 in _segments(grid_h, level):
            for c0, c1 in _segments(grid_w, level):
                cell = np.zeros((grid_h, grid_w))
                cell[r0:r1, c0:c1] = 1.0 / ((r1 - r0) * (c1 - c0))
                rows.append(cell.reshape(-1))
    mat = np.stack(rows)
    mat.setflags(write=False)
    return mat


def region_labels() -> list[str]:
    return [f"reg_{level}_{i}" for level in _LEVELS for i in range(level * level)]


def regional_pool(patches, grid_h: int, grid_w: int) -> np.ndarray:
    """Average patch features over 1x1, 2x2 and 3x3 partitions of the grid.

    ``patches`` is (..., grid_h*grid_w, D) with CLS already removed.
    Partition boundaries are ``floor(i * n / level)``.
    """
    patches = as_array(patches)
    P = pooling_matrix(grid_h, grid_w)
    if patches.shape[-2] != P.shape[1]:
        raise DimensionError(f"{patches.shape[-2]} patches do not fill a {grid_h}x{grid_w} grid")
    return np.einsum("rp,...pd->...rd", P, patches)


def regional_pool_backward(dXa: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    return np.einsum("rp,...rd->...pd", pooling_matrix(grid_h, grid_w), dXa)


# ------------------------------------------------------------------ agents

def make_agents(X, Yp) -> AgentSet:
    X, Yp = as_array(X), as_array(Yp)
    if X.shape[-2] < 2:
        raise DimensionError(f"image sequence needs CLS plus at least one patch, got M={X.shape[-2]}")
    return AgentSet(X[..., 0, :].copy(), X[..., 1:, :].mean(axis=-2), Yp[..., 0, :].copy())


def make_agents_backward(d: AgentSet, M: int, N: int):
    """Gradients of the initial agents back onto (X, Y')."""
    lead = d.z_m.shape[:-1]
    D = d.z_m.shape[-1]
    dX = np.zeros(lead + (M, D))
    dX[..., 0, :] = d.z_m
    dX[..., 1:, :] = d.z_a[..., None, :] / (M - 1)
    dY = np.zeros(lead + (N, D))
    dY[..., 0, :] = d.z_t
    return dX, dY


# ------------------------------------------------------ cross attention

def init_mca(store: ParamStore, prefix: str, D: int, rng: np.random.Generator) -> None:
    for part in ("wq", "wk", "wv", "wo"):
        store.init_linear(f"{prefix}.{part}", D, D, rng)


def init_ffn(store: ParamStore, prefix: str, D: int, rng: np.random.Generator, hidden: int | None = None) -> None:
    hidden = 4 * D if hidden is None else hidden
    store.add(f"{prefix}.ln_in.g", np.ones(D))
    store.add(f"{prefix}.ln_in.b", np.zeros(D))
    store.init_linear(f"{prefix}.fc1", D, hidden, rng)
    store.init_linear(f"{prefix}.fc2", hidden, D, rng)
    store.add(f"{prefix}.ln_out.g", np.ones(D))
    store.add(f"{prefix}.ln_out.b", np.zeros(D))


def init_fusion(store: ParamStore, D: int, L: int, rng: np.random.Generator, hidden: int | None = None) -> None:
    for b in BRANCHES:
        for layer in range(1, L + 1):
            prefix = f"fuse.{b}.{layer}"
            init_mca(store, prefix, D, rng)
            init_ffn(store, prefix, D, rng, hidden)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    return x.reshape(x.shape[:-1] + (heads, x.shape[-1] // heads))


def mca_forward(z, R, store: ParamStore, prefix: str, heads: int):
    z, R = as_array(z), as_array(R)
    D = z.shape[-1]
    if heads < 1 or D % heads:
        raise ConfigError(f"D={D} is not divisible by heads={heads}")
    if R.shape[-2] < 1:
        raise DimensionError("cross-attention needs at least one key")
    dh = D // heads
    q = linear(z, prefix + ".wq", store)
    k = linear(R, prefix + ".wk", store)
    v = linear(R, prefix + ".wv", store)
    qh = _split_heads(q, heads)                       # (..., H, dh)
    kh = _split_heads(k, heads)                       # (..., K, H, dh)
    vh = _split_heads(v, heads)
    scale = 1.0 / math.sqrt(dh)
    logits = np.einsum("...hd,...khd->...hk", qh, kh) * scale
    p = softmax(logits)                               # (..., H, K)
    oh = np.einsum("...hk,...khd->...hd", p, vh)
    o = oh.reshape(oh.shape[:-2] + (D,))
    out = linear(o, prefix + ".wo", store) + z
    cache = dict(z=z, R=R, qh=qh, kh=kh, vh=vh, p=p, o=o, scale=scale, heads=heads, prefix=prefix)
    return out, cache


def mca(z, R, store: ParamStore, prefix: str, heads: int) -> np.ndarray:
    """Multi-head cross-attention of one query agent over keys ``R``, plus residual."""
    return mca_forward(z, R, store, prefix, heads)[0]


def mca_backward(dout: np.ndarray, cache: dict, store: ParamStore):
    """Returns (dz, dR)."""
    prefix, heads, scale = cache["prefix"], cache["heads"], cache["scale"]
    qh, kh, vh, p = cache["qh"], cache["kh"], cache["vh"], cache["p"]
    D = dout.shape[-1]
    do = linear_backward(dout, cache["o"], prefix + ".wo", store)
    doh = _split_heads(do, heads)
    dp = np.einsum("...hd,...khd->...hk", doh, vh)
    dvh = np.einsum("...hk,...hd->...khd", p, doh)
    dlogits = softmax_backward(dp, p) * scale
    dqh = np.einsum("...hk,...khd->...hd", dlogits, kh)
    dkh = np.einsum("...hk,...hd->...khd", dlogits, qh)
    merge = lambda a: a.reshape(a.shape[:-2] + (D,))
    dz = dout + linear_backward(merge(dqh), cache["z"], prefix + ".wq", store)
    dR = linear_backward(merge(dkh), cache["R"], prefix + ".wk", store)
    dR = dR + linear_backward(merge(dvh), cache["R"], prefix + ".wv", store)
    return dz, dR


# --------------------------------------------------------------- LN / MLP

def ffn_forward(z_hat, store: ParamStore, prefix: str, eps: float = 1e-5, strict_eq8: bool = True):
    z_hat = as_array(z_hat)
    u, ln_in = layer_norm_forward(z_hat, store[prefix + ".ln_in.g"], store[prefix + ".ln_in.b"], eps)
    h = linear(u, prefix + ".fc1", store)
    a = relu(h)
    m = linear(a, prefix + ".fc2", store)
    r = m + z_hat
    cache = dict(u=u, ln_in=ln_in, h=h, a=a, prefix=prefix, strict=strict_eq8)
    if not strict_eq8:
        return r, cache
    out, ln_out = layer_norm_forward(r, store[prefix + ".ln_out.g"], store[prefix + ".ln_out.b"], eps)
    cache["ln_out"] = ln_out
    return out, cache


def ffn_block(z_hat, store: ParamStore, prefix: str, eps: float = 1e-5, strict_eq8: bool = True) -> np.ndarray:
    """``LN_out(MLP(LN_in(z_hat)) + z_hat)``; with ``strict_eq8=False`` the
    conventional pre-norm form ``z_hat + MLP(LN_in(z_hat))``."""
    return ffn_forward(z_hat, store, prefix, eps, strict_eq8)[0]


def _accumulate_ln(store, name, dgamma, dbeta):
    store.accumulate(name + ".g", dgamma)
    store.accumulate(name + ".b", dbeta)


def ffn_backward(dout: np.ndarray, cache: dict, store: ParamStore) -> np.ndarray:
    prefix = cache["prefix"]
    if cache["strict"]:
        dr, dg, db = layer_norm_backward(dout, cache["ln_out"])
        _accumulate_ln(store, prefix + ".ln_out", dg, db)
    else:
        dr = dout
    da = linear_backward(dr, cache["a"], prefix + ".fc2", store)
    dh = relu_backward(da, cache["h"])
    du = linear_backward(dh, cache["u"], prefix + ".fc1", store)
    dz, dg, db = layer_norm_backward(du, cache["ln_in"])
    _accumulate_ln(store, prefix + ".ln_in", dg, db)
    return dz + dr


# ------------------------------------------------------------------ fuse

@dataclass
class FusionOutput:
    agents: AgentSet
    attn: dict[str, list[np.ndarray]]
    cache: dict = field(default_factory=dict, repr=False)


def check_fusion_params(store: ParamStore, D: int, L: int, heads: int) -> None:
    if L < 1:
        raise ConfigError(f"number of fusion layers must be >= 1, got {L}")
    if heads < 1 or D % heads:
        raise ConfigError(f"D={D} is not divisible by heads={heads}")
    for b in BRANCHES:
        for layer in range(1, L + 1):
            prefix = f"fuse.{b}.{layer}"
            for part in ("wq", "wk", "wv", "wo"):
                store.require(f"{prefix}.{part}", (D, D), ConfigError)
            for ln in ("ln_in", "ln_out"):
                store.require(f"{prefix}.{ln}.g", (D,), ConfigError)
                store.require(f"{prefix}.{ln}.b", (D,), ConfigError)
            if f"{prefix}.fc1" not in store:
                raise ConfigError(f"parameter {prefix + '.fc1'!r} missing from store")
            fc1 = store[f"{prefix}.fc1"]
            if fc1.ndim != 2 or fc1.shape[0] != D:
                raise ConfigError(f"{prefix}.fc1 has shape {fc1.shape}, expected ({D}, hidden)")
            store.require(f"{prefix}.fc2", (fc1.shape[1], D), ConfigError)


def fuse(X, Yp, Xa, store: ParamStore, L: int, heads: int, eps: float = 1e-5,
         strict_eq8: bool = True) -> FusionOutput:
    """Run all three agent branches through ``L`` fusion layers.

    ``attn[branch][layer - 1]`` holds the (..., heads, keys) attention weights.
    """
    X, Yp, Xa = as_array(X), as_array(Yp), as_array(Xa)
    D = X.shape[-1]
    if Yp.shape[-1] != D or Xa.shape[-1] != D:
        raise DimensionError(f"feature dims differ: X {X.shape}, Y' {Yp.shape}, X_a {Xa.shape}")
    check_fusion_params(store, D, L, heads)
    agents = make_agents(X, Yp)
    keys = {"m": Yp, "a": Yp, "t": np.concatenate([X, Xa], axis=-2)}
    final, attn, layer_caches = {}, {}, {}
    for b in BRANCHES:
        z = agents[b]
        attn[b], layer_caches[b] = [], []
        for layer in range(1, L + 1):
            prefix = f"fuse.{b}.{layer}"
            z_hat, c_att = mca_forward(z, keys[b], store, prefix, heads)
            z, c_ffn = ffn_forward(z_hat, store, prefix, eps, strict_eq8)
            attn[b].append(c_att["p"])
            layer_caches[b].append((c_att, c_ffn))
        final[b] = z
    cache = dict(layers=layer_caches, M=X.shape[-2], N=Yp.shape[-2])
    return FusionOutput(AgentSet(final["m"], final["a"], final["t"]), attn, cache)


def fuse_backward(d: AgentSet, out: FusionOutput, store: ParamStore):
    """Accumulate parameter gradients; return (dX, dY', dX_a)."""
    M, N = out.cache["M"], out.cache["N"]
    d_init, d_keys = {}, {}
    for b in BRANCHES:
        dz = d[b]
        dR = 0.0
        for c_att, c_ffn in reversed(out.cache["layers"][b]):
            dz_hat = ffn_backward(dz, c_ffn, store)
            dz, dR_layer = mca_backward(dz_hat, c_att, store)
            dR = dR + dR_layer
        d_init[b], d_keys[b] = dz, dR
    dX, dY = make_agents_backward(AgentSet(d_init["m"], d_init["a"], d_init["t"]), M, N)
    dY = dY + d_keys["m"] + d_keys["a"]
    dX = dX + d_keys["t"][..., :M, :]
    dXa = d_keys["t"][..., M:, :]
    return dX, dY, dXa


def kink_margin(out: FusionOutput) -> float:
    """Smallest |MLP pre-activation| across all layers and branches."""
    margins = [np.min(np.abs(c_ffn["h"])) for b in BRANCHES for _, c_ffn in out.cache["layers"][b]]
    return float(min(margins))


def key_labels(branch: str, grid_h: int, grid_w: int, N: int) -> list[str]:
    if branch in ("m", "a"):
        return [str(i) for i in range(N)]
    patches = [f"patch_{r}_{c}" for r in range(grid_h) for c in range(grid_w)]
    return ["cls"] + patches + region_labels()
