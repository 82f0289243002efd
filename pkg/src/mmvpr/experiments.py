"""Synthetic end-to-end experiments: build data, train, describe, evaluate."""

from __future__ import annotations

import dataclasses

from .config import RunConfig
from .descriptor import Descriptor, Variant
from .model import FusionModel, init_params
from .retrieval import PlaceRecord, RecallReport, recall_at_n
from .scenarios import Sample, build_scenario, stack
from .trainer import TokenPool, train_toy


def describe_samples(model: FusionModel, samples: list[Sample], variant: str | None = None,
                     image_only: bool = False) -> list[PlaceRecord]:
    X, Y = stack(samples)
    values, _ = model.forward(X, Y, image_only=image_only, variant=variant)
    v = Variant(variant or model.config.variant)
    return [PlaceRecord(s.id, s.lat, s.lon, Descriptor(values[i], v, model.config.normalize), s.heading)
            for i, s in enumerate(samples)]


def evaluate_model(model: FusionModel, data: dict[str, list[Sample]], variant: str | None = None,
                   image_only: bool = False) -> RecallReport:
    cfg = model.config
    db = describe_samples(model, data["database"], variant, image_only)
    queries = describe_samples(model, data["query"], variant, image_only)
    return recall_at_n(queries, db, cfg.rule, cfg.Ns)


@dataclasses.dataclass
class SeedOutcome:
    seed: int
    untrained_image_only: float
    trained_full: float
    initial_loss: float
    final_loss: float


def aliasing_run(config: RunConfig, seed: int) -> SeedOutcome:
    """Untrained image-only R@1 versus trained FULL R@1 on one seed."""
    cfg = dataclasses.replace(config, seed=seed)
    data = build_scenario(cfg)
    untrained = FusionModel(cfg, init_params(cfg))
    before = evaluate_model(untrained, data, variant="IM_CLS_AVG", image_only=True).recalls[1]
    result = train_toy(cfg, TokenPool.from_samples(data["train"]))
    trained = FusionModel(cfg, result.store)
    after = evaluate_model(trained, data, variant="FULL").recalls[1]
    losses = [loss for _, loss, _ in result.trace]
    return SeedOutcome(seed, before, after, losses[0] if losses else float("nan"),
                       losses[-1] if losses else float("nan"))


def trained_recall(config: RunConfig, seed: int) -> float:
    cfg = dataclasses.replace(config, seed=seed)
    data = build_scenario(cfg)
    result = train_toy(cfg, TokenPool.from_samples(data["train"]))
    return evaluate_model(FusionModel(cfg, result.store), data).recalls[1]
