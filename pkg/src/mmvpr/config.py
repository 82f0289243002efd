"""Run configuration: one JSON document covering model, data, training, evaluation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .descriptor import Variant
from .errors import ConfigError
from .metric import MSHyper
from .retrieval import MatchRule


@dataclass
class ScenarioConfig:
    name: str = "aliasing"
    n_places: int = 8
    train_per_place: int = 8
    db_per_place: int = 5
    query_per_place: int = 5
    noise_scale: float = 0.05
    text_noise_fraction: float = 0.0
    place_spacing_m: float = 100.0
    jitter_m: float = 5.0


@dataclass
class TrainConfig:
    P: int = 120
    K: int = 4
    steps: int = 1000
    lr: float = 6e-5
    lr_final_fraction: float = 0.2
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    modules: tuple[str, ...] = ("atrec", "cammf")


@dataclass
class RunConfig:
    D: int = 768
    T1: int = 256
    L: int = 3
    heads: int = 12
    grid_h: int = 16
    grid_w: int = 16
    text_len: int = 32
    mlp_hidden: int | None = None
    ln_eps: float = 1e-5
    use_atrec: bool = True
    strict_eq8: bool = True
    variant: str = "FULL"
    normalize: bool = True
    per_segment_norm: bool = False
    max_distance: float = 25.0
    max_angle: float | None = 40.0
    Ns: tuple[int, ...] = (1, 5, 10)
    seed: int = 0
    ms_alpha: float = 1.0
    ms_beta: float = 50.0
    ms_lambda: float = 0.5
    ms_margin: float = 0.1
    train: TrainConfig = field(default_factory=TrainConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)

    @property
    def M(self) -> int:
        return self.grid_h * self.grid_w + 1

    @property
    def N(self) -> int:
        return self.text_len

    @property
    def descriptor_variant(self) -> Variant:
        return Variant(self.variant)

    @property
    def descriptor_dim(self) -> int:
        return self.descriptor_variant.dim(self.D)

    @property
    def rule(self) -> MatchRule:
        return MatchRule(self.max_distance, self.max_angle)

    @property
    def ms_hyper(self) -> MSHyper:
        return MSHyper(self.ms_alpha, self.ms_beta, self.ms_lambda, self.ms_margin)

    @classmethod
    def toy(cls, **overrides) -> "RunConfig":
        """Desk-scale defaults used by the synthetic experiments and gradcheck."""
        cfg = cls(D=16, T1=32, L=2, heads=2, grid_h=4, grid_w=4, text_len=8,
                  train=TrainConfig(P=8, K=4, steps=300, lr=3e-3, weight_decay=1e-4))
        return apply_overrides(cfg, overrides)

    def validate(self) -> "RunConfig":
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{name}: {msg}")

        need(self.D >= 1, "D", "must be >= 1")
        need(self.heads >= 1 and self.D % self.heads == 0, "heads", f"D={self.D} must be divisible by heads={self.heads}")
        need(self.L >= 1, "L", "must be >= 1")
        need(self.T1 >= 1, "T1", "must be >= 1")
        need(self.grid_h >= 3 and self.grid_w >= 3, "grid_h/grid_w", "regional pooling needs at least a 3x3 grid")
        need(self.text_len >= 1, "text_len", "must be >= 1")
        need(self.ln_eps > 0, "ln_eps", "must be positive")
        need(self.variant in Variant.__members__, "variant", f"must be one of {list(Variant.__members__)}")
        need(len(self.Ns) > 0 and all(n >= 1 for n in self.Ns) and list(self.Ns) == sorted(self.Ns),
             "Ns", "must be positive and ascending")
        need(self.max_distance > 0, "max_distance", "must be positive")
        need(self.ms_alpha > 0 and self.ms_beta > 0, "ms_alpha/ms_beta", "must be positive")
        need(self.ms_margin >= 0, "ms_margin", "must be non-negative")
        t = self.train
        need(t.P >= 2 and t.K >= 2, "train.P/train.K", "need at least 2 places with 2 samples each")
        need(t.steps >= 0, "train.steps", "must be >= 0")
        need(t.lr > 0, "train.lr", "must be positive")
        need(0 < t.lr_final_fraction <= 1, "train.lr_final_fraction", "must be in (0, 1]")
        need(t.optimizer in ("adamw", "sgd"), "train.optimizer", "must be 'adamw' or 'sgd'")
        need(set(t.modules) <= {"atrec", "cammf"}, "train.modules", "allowed entries are 'atrec' and 'cammf'")
        s = self.scenario
        need(s.name in ("aliasing", "clusters"), "scenario.name", "must be 'aliasing' or 'clusters'")
        need(s.n_places >= 2, "scenario.n_places", "must be >= 2")
        need(0 <= s.text_noise_fraction <= 1, "scenario.text_noise_fraction", "must be in [0, 1]")
        need(s.noise_scale >= 0, "scenario.noise_scale", "must be non-negative")
        return self

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


_NESTED = {"train": TrainConfig, "scenario": ScenarioConfig}


def _coerce(cls, name, value):
    hints = {f.name: f for f in dataclasses.fields(cls)}
    if name not in hints:
        raise ConfigError(f"{name}: unknown config field")
    default = getattr(cls(), name) if name not in _NESTED else None
    if isinstance(default, tuple) and isinstance(value, (list, tuple)):
        return tuple(value)
    return value


def from_dict(obj: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    cfg.train = dataclasses.replace(cfg.train)
    cfg.scenario = dataclasses.replace(cfg.scenario)
    for key, value in obj.items():
        if key in _NESTED:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected an object")
            sub = getattr(cfg, key)
            for k, v in value.items():
                setattr(sub, k, _coerce(_NESTED[key], k, v))
        else:
            setattr(cfg, key, _coerce(RunConfig, key, value))
    return cfg


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply dotted ``{"train.steps": 10}``-style overrides."""
    nested: dict = {}
    for key, value in overrides.items():
        head, _, tail = key.partition(".")
        if tail:
            nested.setdefault(head, {})[tail] = value
        else:
            nested[head] = value
    return from_dict(nested, cfg)


def load_config(path) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    preset = obj.pop("preset", None)
    base = RunConfig.toy() if preset == "toy" else RunConfig()
    if preset not in (None, "toy", "full"):
        raise ConfigError(f"preset: unknown preset {preset!r}")
    return from_dict(obj, base).validate()
