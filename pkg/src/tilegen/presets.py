"""Ready-made configurations.

``toy_*`` presets are CPU-trainable while keeping the full multi-resolution
structure (two optical groups, SAR, DEM, LULC, lat-lon, time). ``mini_*``
presets shrink everything further for fast tests. ``reference_*`` values
mirror the full-scale setup and are not meant to be trained here.
"""

from __future__ import annotations

from .backbone import BackboneConfig
from .training import TrainConfig
from .world import WorldConfig

# Reference (full-scale) schedule: 1000 steps, scaled-linear betas.
REFERENCE_SCHEDULE = {"T": 1000, "beta_start": 8.5e-4, "beta_end": 1.2e-2,
                      "kind": "scaled_linear"}

# Toy schedule: 250 steps with betas scaled 4x so the terminal signal level
# matches the reference chain (alpha_bar[T-1] < 0.01).
TOY_SCHEDULE = {"T": 250, "beta_start": 3.4e-3, "beta_end": 4.8e-2,
                "kind": "scaled_linear"}

REFERENCE_BACKBONE = BackboneConfig(layers=20, dim=1024, heads=16)


def toy_world(seed: int = 0) -> WorldConfig:
    return WorldConfig(grid=24, lo_grid=8, seed=seed)


def mini_world(seed: int = 0) -> WorldConfig:
    return WorldConfig(grid=16, lo_grid=8, seed=seed)


def toy_backbone(seed: int = 0) -> BackboneConfig:
    return BackboneConfig(layers=6, dim=128, heads=4, seed=seed)


def mini_backbone(seed: int = 0) -> BackboneConfig:
    return BackboneConfig(layers=4, dim=64, heads=4, seed=seed)


def toy_train(steps: int = 20000, seed: int = 0) -> TrainConfig:
    # EMA time constant of 1000 steps; the reference decay of 0.9999 would
    # still be dominated by the initialization at toy run lengths.
    return TrainConfig(steps=steps, batch=16, seed=seed, ema_decay=0.999)
