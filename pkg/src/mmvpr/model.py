"""Token sequences in, retrieval descriptors out, with a matching backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import atrec, cammf
from .config import RunConfig
from .descriptor import Descriptor, Variant, compose, compose_backward
from .errors import DimensionError
from .seqcore import ParamStore, as_array


def init_params(config: RunConfig, seed: int | None = None) -> ParamStore:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    store = ParamStore()
    if config.use_atrec:
        atrec.init_atrec(store, config.M, config.N, config.T1, rng)
    cammf.init_fusion(store, config.D, config.L, rng, config.mlp_hidden)
    modules = set(config.train.modules)
    store.set_trainable("atrec.", "atrec" in modules)
    store.set_trainable("fuse.", "cammf" in modules)
    return store


@dataclass
class ForwardCache:
    X: np.ndarray
    Y: np.ndarray
    recal: atrec.RecalibrationResult | None
    fusion: cammf.FusionOutput


class FusionModel:
    """Recalibrate text, fuse agents, compose descriptors.

    Inputs are (B, M, D) image tokens and (B, N, D) text tokens; a missing
    caption is represented by all-zero text tokens.
    """

    def __init__(self, config: RunConfig, store: ParamStore | None = None):
        self.config = config
        self.store = init_params(config) if store is None else store

    def _check(self, X, Y):
        c = self.config
        if X.shape[-2:] != (c.M, c.D):
            raise DimensionError(f"image tokens have shape {X.shape[-2:]}, config expects ({c.M}, {c.D})")
        if Y.shape[-2:] != (c.N, c.D):
            raise DimensionError(f"text tokens have shape {Y.shape[-2:]}, config expects ({c.N}, {c.D})")

    def encode(self, X, Y, image_only: bool = False) -> tuple[cammf.FusionOutput, ForwardCache]:
        c = self.config
        X, Y = as_array(X), as_array(Y)
        if image_only:
            Y = np.zeros_like(Y)
        self._check(X, Y)
        Xa = cammf.regional_pool(X[..., 1:, :], c.grid_h, c.grid_w)
        recal = atrec.recalibrate(X, Y, self.store) if c.use_atrec else None
        Yp = recal.Y if recal is not None else Y
        fusion = cammf.fuse(X, Yp, Xa, self.store, c.L, c.heads, c.ln_eps, c.strict_eq8)
        return fusion, ForwardCache(X, Y, recal, fusion)

    def forward(self, X, Y, image_only: bool = False, variant=None) -> tuple[np.ndarray, ForwardCache]:
        c = self.config
        fusion, cache = self.encode(X, Y, image_only)
        desc = compose(fusion.agents, variant or c.variant, c.normalize, c.per_segment_norm)
        return desc.values, cache

    def describe(self, X, Y, image_only: bool = False, variant=None) -> Descriptor:
        values, _ = self.forward(X, Y, image_only, variant)
        return Descriptor(values, Variant(variant or self.config.variant), self.config.normalize)

    def backward(self, d_desc: np.ndarray, cache: ForwardCache, variant=None) -> tuple[np.ndarray, np.ndarray]:
        """Accumulate parameter gradients; return (dX, dY) for the raw inputs."""
        c = self.config
        d_agents = compose_backward(d_desc, cache.fusion.agents, variant or c.variant,
                                    c.normalize, c.per_segment_norm)
        dX, dYp, dXa = cammf.fuse_backward(d_agents, cache.fusion, self.store)
        dX = dX.copy()
        dX[..., 1:, :] += cammf.regional_pool_backward(dXa, c.grid_h, c.grid_w)
        if cache.recal is None:
            return dX, dYp
        dXr, dY = atrec.recalibrate_backward(dYp, cache.recal, self.store)
        return dX + dXr, dY

    def kink_margin(self, cache: ForwardCache) -> float:
        margin = cammf.kink_margin(cache.fusion)
        if cache.recal is not None:
            margin = min(margin, atrec.kink_margin(cache.recal))
        return margin

