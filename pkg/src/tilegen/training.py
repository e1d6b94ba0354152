"""Diffusion training loop: AdamW with linear warmup, EMA, seeded noise.

All randomness (timesteps, forward noise, batch selection) is drawn from one
numpy generator, so loss traces are reproducible bit-for-bit under a fixed
seed. The loss is the exact per-example sum of squared noise-prediction
errors over all units, averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np
import torch

from .backbone import BackboneConfig, Denoiser
from .codec import LatentStore, hadamard_palette, identity_codecs
from .diffusion import NoiseSchedule, build_schedule, ema_init, ema_update, joint_loss
from .pipeline import GenerationModel
from .schema import Schema


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch: int = 16
    lr: float = 2e-4
    weight_decay: float = 0.03
    warmup: int = 500
    # cosine decay from lr to lr * lr_floor between warmup and the last step
    lr_floor: float = 0.05
    ema_decay: float = 0.9999
    seed: int = 0
    log_every: int = 100


def _corrupt_batch(schedule: NoiseSchedule, batch: dict, units, rng: np.random.Generator):
    """Per-example, per-unit timesteps and forward-noised latents."""
    b = next(iter(batch.values())).shape[0]
    t = rng.integers(0, schedule.T, size=(b, len(units)))
    sqrt_ab = np.sqrt(schedule.alpha_bars)
    sqrt_1mab = np.sqrt(1.0 - schedule.alpha_bars)
    noisy, eps = {}, {}
    for i, u in enumerate(units):
        z0 = batch[u.name]
        e = rng.standard_normal(z0.shape)
        shape = (b,) + (1,) * (z0.ndim - 1)
        noisy[u.name] = sqrt_ab[t[:, i]].reshape(shape) * z0 + \
            sqrt_1mab[t[:, i]].reshape(shape) * e
        eps[u.name] = e
    return t, noisy, eps


def train_step(model: Denoiser, opt: torch.optim.Optimizer, ema, schedule: NoiseSchedule,
               batch: dict, rng: np.random.Generator, cfg: TrainConfig,
               step: int) -> float:
    """One AdamW update plus EMA update; returns the batch loss."""
    units = model.unit_specs
    t, noisy, eps = _corrupt_batch(schedule, batch, units, rng)
    dtype = next(model.parameters()).dtype
    noisy_t = {k: torch.as_tensor(v, dtype=dtype) for k, v in noisy.items()}
    eps_t = {k: torch.as_tensor(v, dtype=dtype) for k, v in eps.items()}
    b = t.shape[0]

    warm = min(1.0, (step + 1) / max(1, cfg.warmup))
    progress = max(0.0, step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    decay = cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * progress))
    for group in opt.param_groups:
        group["lr"] = cfg.lr * warm * decay

    pred = model(noisy_t, torch.as_tensor(t))
    loss = joint_loss(eps_t, pred) / b
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss at step {step}: {float(loss)}")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    with torch.no_grad():
        ema_update(ema, dict(model.named_parameters()))
    return float(loss.detach())


def train_diffusion(schema: Schema, store: LatentStore, backbone_cfg: BackboneConfig,
                    train_cfg: TrainConfig, schedule_params: dict | None = None,
                    codecs: dict | None = None) -> tuple[GenerationModel, list]:
    """Train a denoiser on a latent store; returns the model bundle and loss trace."""
    if store.schema_hash != schema.hash():
        raise TrainingError("latent store was encoded under a different schema")
    schedule_params = dict(schedule_params or {"T": 250, "beta_start": 3.4e-3,
                                               "beta_end": 4.8e-2,
                                               "kind": "scaled_linear"})
    schedule = build_schedule(**schedule_params)
    model = Denoiser(schema, backbone_cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=train_cfg.lr,
                            weight_decay=train_cfg.weight_decay)
    ema = ema_init(dict(model.named_parameters()), train_cfg.ema_decay)
    rng = np.random.default_rng(np.random.SeedSequence((train_cfg.seed, 0xD1F)))

    train_idx = np.asarray(store.indices("train"))
    if train_idx.size == 0:
        raise TrainingError("latent store has no training tiles")
    trace = []
    for step in range(train_cfg.steps):
        idx = rng.choice(train_idx, size=min(train_cfg.batch, train_idx.size),
                         replace=True)
        batch = {k: v[idx] for k, v in store.latents.items()}
        loss = train_step(model, opt, ema, schedule, batch, rng, train_cfg, step)
        trace.append(loss)

    palette_dim = None
    classes = None
    for m in schema.modalities:
        if m.kind == "categorical_image":
            classes = m.classes
            palette_dim = m.band_groups[0].channels
    palette = hadamard_palette(classes, palette_dim) if classes else \
        hadamard_palette(2, 1)
    gm = GenerationModel(
        schema=schema,
        codecs=codecs if codecs is not None else identity_codecs(schema),
        palette=palette,
        stats=store.stats,
        schedule=schedule,
        schedule_params=schedule_params,
        backbone_cfg=backbone_cfg,
        net=model,
        ema=ema,
        year_range=store.year_range,
        step=train_cfg.steps,
        seed=train_cfg.seed,
    )
    return gm, trace
