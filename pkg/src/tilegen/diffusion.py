"""Diffusion process primitives.

Scaled-linear noise schedule, forward corruption, independent per-unit
timestep sampling, the joint epsilon-prediction loss (exact sum of squared
norms over all units), the DDPM posterior step, and parameter EMA. Array
operations are written so they work on both numpy arrays and torch tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DiffusionError(Exception):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars"):
            getattr(self, name).setflags(write=False)


def build_schedule(
    T: int = 1000,
    beta_start: float = 8.5e-4,
    beta_end: float = 1.2e-2,
    kind: str = "scaled_linear",
) -> NoiseSchedule:
    """Scaled-linear schedule: betas are the squares of linearly spaced sqrt(beta)."""
    if kind != "scaled_linear":
        raise DiffusionError(f"unknown schedule kind: {kind}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise DiffusionError(f"invalid beta bounds ({beta_start}, {beta_end})")
    if T < 1:
        raise DiffusionError(f"T must be >= 1, got {T}")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T, dtype=np.float64) ** 2
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T, betas, alphas, alpha_bars)


def q_sample(s: NoiseSchedule, z0, t: int, eps):
    """Forward corruption: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if not 0 <= t < s.T:
        raise DiffusionError(f"timestep {t} outside [0, {s.T})")
    ab = float(s.alpha_bars[t])
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def sample_timesteps(rng: np.random.Generator, M: int, T: int) -> np.ndarray:
    """One independent uniform timestep in [0, T) per unit."""
    if M < 1:
        raise DiffusionError("need at least one unit")
    return rng.integers(0, T, size=M)


def joint_loss(eps_true: dict, eps_pred: dict):
    """Sum over units of squared Euclidean norms of the prediction error."""
    if not eps_true or set(eps_true) != set(eps_pred):
        raise DiffusionError("eps_true and eps_pred must cover the same units")
    total = None
    for name in eps_true:
        a, b = eps_true[name], eps_pred[name]
        if tuple(a.shape) != tuple(b.shape):
            raise DiffusionError(f"unit {name}: shape {tuple(a.shape)} != {tuple(b.shape)}")
        term = ((a - b) ** 2).sum()
        total = term if total is None else total + term
    return total


def joint_loss_per_element(eps_true: dict, eps_pred: dict) -> float:
    """Per-element-normalized variant, for logging only."""
    loss = float(joint_loss(eps_true, eps_pred))
    n = sum(int(np.prod(a.shape)) for a in eps_true.values())
    return loss / n


def posterior_variance(s: NoiseSchedule, t: int) -> float:
    """beta~_t = beta_t (1 - abar_{t-1}) / (1 - abar_t); zero at t = 0."""
    if t == 0:
        return 0.0
    ab_prev = float(s.alpha_bars[t - 1])
    ab = float(s.alpha_bars[t])
    return float(s.betas[t]) * (1.0 - ab_prev) / (1.0 - ab)


def ddpm_step(s: NoiseSchedule, z_t, eps_hat, t: int, rng: np.random.Generator):
    """One ancestral reverse step from t to t-1; deterministic at t = 0."""
    if not 0 <= t < s.T:
        raise DiffusionError(f"timestep {t} outside [0, {s.T})")
    beta = float(s.betas[t])
    alpha = float(s.alphas[t])
    ab = float(s.alpha_bars[t])
    mean = (z_t - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(alpha)
    if t == 0:
        return mean
    noise = rng.standard_normal(size=np.shape(z_t))
    if not isinstance(z_t, np.ndarray):  # torch tensor path
        import torch

        noise = torch.as_tensor(noise, dtype=z_t.dtype, device=z_t.device)
    else:
        noise = noise.astype(z_t.dtype, copy=False)
    return mean + math.sqrt(posterior_variance(s, t)) * noise


@dataclass
class EmaState:
    """Exponential moving average of named parameter arrays."""

    shadow: dict
    decay: float = 0.9999


def ema_init(params: dict, decay: float = 0.9999) -> EmaState:
    def _copy(v):
        return v.detach().clone() if hasattr(v, "detach") else np.array(v, copy=True)

    return EmaState({k: _copy(v) for k, v in params.items()}, decay)


def ema_update(e: EmaState, params: dict) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    if set(e.shadow) != set(params):
        raise DiffusionError("EMA shadow and parameters must have the same names")
    for k, p in params.items():
        sh = e.shadow[k]
        if tuple(sh.shape) != tuple(p.shape):
            raise DiffusionError(f"EMA shape mismatch for {k}")
        e.shadow[k] = e.decay * sh + (1.0 - e.decay) * p
    return e
