"""Finite-difference audits of every analytic backward pass.

Each check draws random inputs and parameters from a seed, probes the
output with a fixed random linear functional, and hands the result to
:func:`grad_check`. Inputs are registered in the store as extra entries so
their gradients are verified too. Draws whose ReLU pre-activations (or MS
mining thresholds) sit within ``kink_tol`` of a discontinuity are
rejected and redrawn from the next seed.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import atrec, cammf
from .config import RunConfig
from .errors import EvaluationError
from .metric import MSHyper, mining_margin_gap, ms_loss
from .model import FusionModel, init_params
from .seqcore import GradReport, ParamStore, grad_check

KINK_TOL = 1e-3
MAX_REDRAWS = 200


def _randomize_norms(store: ParamStore, rng: np.random.Generator) -> None:
    for name in store.names():
        if name.endswith(".g"):
            store[name] = rng.uniform(0.5, 1.5, store[name].shape)
        elif name.endswith(".b"):
            store[name] = rng.normal(0.0, 0.3, store[name].shape)


def _redraw(build: Callable[[int], tuple], seed: int, kink_tol: float):
    for attempt in range(MAX_REDRAWS):
        case = build(seed + attempt)
        if case[-1] >= kink_tol:
            return case[:-1]
    raise EvaluationError(f"no draw cleared the kink margin {kink_tol} after {MAX_REDRAWS} attempts")


def _check(run, store: ParamStore, eps: float, tol: float) -> GradReport:
    return grad_check(run, store, eps, tol, grad_fn=lambda st: run(st, backward=True))


def check_atrec(seed: int = 0, M: int = 4, N: int = 3, D: int = 4, T1: int = 5, B: int = 2,
                eps: float = 1e-5, tol: float = 1e-5, kink_tol: float = KINK_TOL) -> GradReport:
    def build(s):
        rng = np.random.default_rng(s)
        store = ParamStore()
        atrec.init_atrec(store, M, N, T1, rng)
        store.add("input.X", rng.normal(size=(B, M, D)))
        store.add("input.Y", rng.normal(size=(B, N, D)))
        probe = rng.normal(size=(B, N, D))
        res = atrec.recalibrate(store["input.X"], store["input.Y"], store)
        return store, probe, atrec.kink_margin(res)

    store, probe = _redraw(build, seed, kink_tol)

    def run(st, backward=False):
        res = atrec.recalibrate(st["input.X"], st["input.Y"], st)
        if backward:
            dX, dY = atrec.recalibrate_backward(probe, res, st)
            st.accumulate("input.X", dX)
            st.accumulate("input.Y", dY)
        return float(np.sum(probe * res.Y))

    return _check(run, store, eps, tol)


def check_layer(seed: int = 0, D: int = 4, heads: int = 2, K: int = 3, B: int = 2, strict_eq8: bool = True,
                eps: float = 1e-5, tol: float = 1e-5, kink_tol: float = KINK_TOL) -> GradReport:
    """One cross-attention layer: MCA with residual followed by the LN/MLP block."""
    prefix = "layer"

    def build(s):
        rng = np.random.default_rng(s)
        store = ParamStore()
        cammf.init_mca(store, prefix, D, rng)
        cammf.init_ffn(store, prefix, D, rng)
        _randomize_norms(store, rng)
        store.add("input.z", rng.normal(size=(B, D)))
        store.add("input.R", rng.normal(size=(B, K, D)))
        probe = rng.normal(size=(B, D))
        z_hat, _ = cammf.mca_forward(store["input.z"], store["input.R"], store, prefix, heads)
        _, c_ffn = cammf.ffn_forward(z_hat, store, prefix, strict_eq8=strict_eq8)
        return store, probe, float(np.min(np.abs(c_ffn["h"])))

    store, probe = _redraw(build, seed, kink_tol)

    def run(st, backward=False):
        z_hat, c_att = cammf.mca_forward(st["input.z"], st["input.R"], st, prefix, heads)
        out, c_ffn = cammf.ffn_forward(z_hat, st, prefix, strict_eq8=strict_eq8)
        if backward:
            dz, dR = cammf.mca_backward(cammf.ffn_backward(probe, c_ffn, st), c_att, st)
            st.accumulate("input.z", dz)
            st.accumulate("input.R", dR)
        return float(np.sum(probe * out))

    return _check(run, store, eps, tol)


def check_fuse(seed: int = 0, M: int = 5, N: int = 4, D: int = 4, heads: int = 2, L: int = 2, B: int = 1,
               strict_eq8: bool = True, eps: float = 1e-5, tol: float = 1e-5,
               kink_tol: float = KINK_TOL) -> GradReport:
    """Whole fusion stack over all three branches, including input gradients."""

    def build(s):
        rng = np.random.default_rng(s)
        store = ParamStore()
        cammf.init_fusion(store, D, L, rng)
        _randomize_norms(store, rng)
        store.add("input.X", rng.normal(size=(B, M, D)))
        store.add("input.Y", rng.normal(size=(B, N, D)))
        store.add("input.Xa", rng.normal(size=(B, cammf.N_REGIONS, D)))
        probes = [rng.normal(size=(B, D)) for _ in cammf.BRANCHES]
        out = cammf.fuse(store["input.X"], store["input.Y"], store["input.Xa"], store, L, heads,
                         strict_eq8=strict_eq8)
        return store, probes, cammf.kink_margin(out)

    store, probes = _redraw(build, seed, kink_tol)
    d_agents = cammf.AgentSet(*probes)

    def run(st, backward=False):
        out = cammf.fuse(st["input.X"], st["input.Y"], st["input.Xa"], st, L, heads, strict_eq8=strict_eq8)
        if backward:
            dX, dY, dXa = cammf.fuse_backward(d_agents, out, st)
            st.accumulate("input.X", dX)
            st.accumulate("input.Y", dY)
            st.accumulate("input.Xa", dXa)
        return float(sum(np.sum(p * out.agents[b]) for p, b in zip(probes, cammf.BRANCHES)))

    return _check(run, store, eps, tol)


def check_ms_loss(seed: int = 0, P: int = 3, K: int = 3, dim: int = 6, hyper: MSHyper = MSHyper(alpha=2.0, beta=10.0),
                  eps: float = 1e-5, tol: float = 1e-5, kink_tol: float = KINK_TOL) -> GradReport:
    labels = np.repeat(np.arange(P), K)

    def build(s):
        rng = np.random.default_rng(s)
        centers = rng.normal(size=(P, dim))
        F = centers[labels] + 0.8 * rng.normal(size=(P * K, dim))
        F /= np.linalg.norm(F, axis=1, keepdims=True)
        store = ParamStore()
        store.add("descriptors", F)
        return store, mining_margin_gap(F, labels, hyper)

    (store,) = _redraw(build, seed, kink_tol)

    def run(st, backward=False):
        value, grad = ms_loss(st["descriptors"], labels, hyper)
        if backward:
            st.accumulate("descriptors", grad)
        return value

    return _check(run, store, eps, tol)


def check_pipeline(config: RunConfig, seed: int = 0, B: int = 4, eps: float = 1e-5, tol: float = 1e-5,
                   kink_tol: float = KINK_TOL) -> GradReport:
    """Tokens -> descriptors -> MS loss, gradients w.r.t. every trainable weight."""
    P = 2
    labels = np.repeat(np.arange(P), B // P)
    hyper = MSHyper(alpha=2.0, beta=10.0, lambda_threshold=config.ms_lambda, mining_margin=config.ms_margin)

    def build(s):
        rng = np.random.default_rng(s)
        store = init_params(config, seed=s)
        _randomize_norms(store, rng)
        X = rng.normal(size=(B, config.M, config.D))
        Y = rng.normal(size=(B, config.N, config.D)) + 0.5
        model = FusionModel(config, store)
        desc, cache = model.forward(X, Y)
        margin = min(model.kink_margin(cache), mining_margin_gap(desc, labels, hyper))
        return store, X, Y, margin

    store, X, Y = _redraw(build, seed, kink_tol)
    model = FusionModel(config, store)

    def run(st, backward=False):
        desc, cache = model.forward(X, Y)
        value, grad = ms_loss(desc, labels, hyper)
        if backward:
            model.backward(grad, cache)
        return value

    return _check(run, store, eps, tol)


def run_all(config: RunConfig, seed: int = 0, tol: float = 1e-5, eps: float = 1e-5) -> dict[str, GradReport]:
    """The suite behind ``mmvpr gradcheck``: sized from ``config``."""
    return {
        "atrec": check_atrec(seed, M=config.M, N=config.N, D=config.D, T1=config.T1, eps=eps, tol=tol),
        "cammf_layer": check_layer(seed, D=config.D, heads=config.heads, K=config.N,
                                   strict_eq8=config.strict_eq8, eps=eps, tol=tol),
        "fuse": check_fuse(seed, M=config.M, N=config.N, D=config.D, heads=config.heads, L=config.L,
                           strict_eq8=config.strict_eq8, eps=eps, tol=tol),
        "ms_loss": check_ms_loss(seed, eps=eps, tol=tol),
        "pipeline": check_pipeline(config, seed, eps=eps, tol=tol),
    }
