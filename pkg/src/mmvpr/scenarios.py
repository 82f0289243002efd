"""Synthetic geotagged datasets built from the archetype encoder.

``aliasing``: places come in pairs that share an image archetype but have
distinct text archetypes, so images alone cannot tell the pair apart.
``clusters``: every place has its own image and text archetype.

Places sit on a meridian ``place_spacing_m`` apart; each sample is jittered
by up to ``jitter_m`` metres and a few degrees of heading.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .encoder import (ManifestRecord, SceneSpec, derive_seed, gaussian, save_manifest, save_tokens,
                      synth_encode, uniform)

BASE_LAT, BASE_LON = 47.3769, 8.5417
METERS_PER_DEG_LAT = 111_194.93
SPLIT_CODES = {"train": 1, "database": 2, "query": 3}
_NOISE_TEXT_STREAM = 0x484C43


@dataclass
class Sample:
    id: str
    place: str
    split: str
    lat: float
    lon: float
    heading: float
    X: np.ndarray
    Y: np.ndarray
    noisy_text: bool = False


def scene_for_place(config: RunConfig, place: int, seed: int) -> SceneSpec:
    sc = config.scenario
    image_arch = place // 2 if sc.name == "aliasing" else place
    # offset archetypes per seed so every seed sees a different world
    return SceneSpec(place_id=place, image_archetype=1000 * seed + image_arch,
                     text_archetype=1000 * seed + place, noise_scale=sc.noise_scale,
                     grid_h=config.grid_h, grid_w=config.grid_w, dim=config.D, text_len=config.N)


def build_split(config: RunConfig, split: str, per_place: int, seed: int | None = None) -> list[Sample]:
    sc = config.scenario
    seed = config.seed if seed is None else seed
    code = SPLIT_CODES[split]
    samples = []
    for place in range(sc.n_places):
        spec = scene_for_place(config, place, seed)
        base_lat = BASE_LAT + place * sc.place_spacing_m / METERS_PER_DEG_LAT
        base_heading = (37.0 * place) % 360.0
        for k in range(per_place):
            sample_seed = derive_seed(seed, code, place, k)
            X, Y = synth_encode(spec, sample_seed)
            u = uniform(derive_seed(sample_seed, 7), 3) * 2.0 - 1.0
            lat = base_lat + u[0] * sc.jitter_m / METERS_PER_DEG_LAT
            lon = BASE_LON + u[1] * sc.jitter_m / (METERS_PER_DEG_LAT * np.cos(np.radians(BASE_LAT)))
            heading = (base_heading + 5.0 * u[2]) % 360.0
            samples.append(Sample(f"{split}-p{place:02d}-{k:03d}", f"p{place:02d}", split,
                                  float(lat), float(lon), float(heading), X.tokens, Y.tokens))
    _replace_text_with_noise(samples, sc.text_noise_fraction, derive_seed(seed, code, 0xBAD))
    return samples


def _replace_text_with_noise(samples: list[Sample], fraction: float, seed: int) -> None:
    n_noisy = int(round(fraction * len(samples)))
    if n_noisy == 0:
        return
    keys = uniform(seed, len(samples))
    for i in np.argsort(keys, kind="stable")[:n_noisy]:
        s = samples[i]
        s.Y = gaussian(derive_seed(_NOISE_TEXT_STREAM, seed, int(i)), s.Y.shape)
        s.noisy_text = True


def build_scenario(config: RunConfig, seed: int | None = None) -> dict[str, list[Sample]]:
    sc = config.scenario
    return {
        "train": build_split(config, "train", sc.train_per_place, seed),
        "database": build_split(config, "database", sc.db_per_place, seed),
        "query": build_split(config, "query", sc.query_per_place, seed),
    }


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.X for s in samples]), np.stack([s.Y for s in samples])


def write_scenario(config: RunConfig, out_manifest, seed: int | None = None) -> list[ManifestRecord]:
    """Write token files next to the manifest and return the manifest records."""
    out_manifest = Path(out_manifest)
    token_dir = out_manifest.parent / (out_manifest.stem + "_tokens")
    token_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for split, samples in build_scenario(config, seed).items():
        for s in samples:
            img, txt = token_dir / f"{s.id}.img.mmtk", token_dir / f"{s.id}.txt.mmtk"
            save_tokens(img, s.X)
            save_tokens(txt, s.Y)
            records.append(ManifestRecord(
                id=s.id, image_tokens=str(img.relative_to(out_manifest.parent)),
                text_tokens=str(txt.relative_to(out_manifest.parent)),
                lat=s.lat, lon=s.lon, heading=s.heading, split=split, place=s.place))
    save_manifest(out_manifest, records)
    return records
