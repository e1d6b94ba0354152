"""U-ViT style denoiser over the unified multimodal token sequence.

Per-unit patch embeddings (2x2 raster-scan patches of each latent), one
sinusoidal timestep token per unit, a learned positional embedding over the
full layout, pre-norm attention/MLP blocks with long skip connections
(concatenate + linear re-projection pairing block k with block L-1-k), and
per-unit linear output heads that unpatchify back to latent-shaped noise
predictions. Timestep tokens attend everywhere; their output slots are
dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import einops
import numpy as np
import torch
from torch import nn

from .schema import Schema, TokenLayout, token_layout


class BackboneError(Exception):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 6
    dim: int = 128
    heads: int = 4
    mlp_ratio: int = 4
    patch: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise BackboneError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.layers % 2 != 0:
            raise BackboneError(f"layers must be even for skip pairing, got {self.layers}")


def patchify(latent, patch: int = 2):
    """(..., C, H, W) -> (..., H*W/patch^2, C*patch^2), raster-scan patch order."""
    h = latent.shape[-2]
    w = latent.shape[-1]
    if h % patch or w % patch:
        raise BackboneError(f"grid {h}x{w} not divisible by patch {patch}")
    return einops.rearrange(latent, "... c (h p1) (w p2) -> ... (h w) (c p1 p2)",
                            p1=patch, p2=patch)


def unpatchify(tokens, grid: int, channels: int, patch: int = 2):
    """Inverse of patchify for a square grid."""
    n = (grid // patch) ** 2
    if tokens.shape[-2] != n or tokens.shape[-1] != channels * patch * patch:
        raise BackboneError(
            f"token shape {tuple(tokens.shape[-2:])} does not match grid {grid}, "
            f"channels {channels}"
        )
    return einops.rearrange(tokens, "... (h w) (c p1 p2) -> ... c (h p1) (w p2)",
                            h=grid // patch, w=grid // patch, c=channels,
                            p1=patch, p2=patch)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """(B,) integer timesteps -> (B, dim); frequencies geometric from 1 to 1e-4."""
    half = dim // 2
    exponent = torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    freqs = torch.pow(torch.tensor(1e-4, dtype=torch.float64), exponent)
    angles = t.double()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    return emb


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return x


class Denoiser(nn.Module):
    """Joint noise predictor for all units of a schema."""

    def __init__(self, schema: Schema, cfg: BackboneConfig):
        super().__init__()
        if cfg.patch != schema.patch:
            raise BackboneError("backbone patch size must match schema patch size")
        self.cfg = cfg
        self.unit_specs = schema.units
        self.layout: TokenLayout = token_layout(schema)
        torch.manual_seed(cfg.seed)

        d = cfg.dim
        self.in_proj = nn.ModuleDict()
        self.out_head = nn.ModuleDict()
        for u in self.unit_specs:
            width = u.channels if u.kind == "scalar" else u.channels * cfg.patch**2
            self.in_proj[u.name] = nn.Linear(width, d)
            head = nn.Linear(d, width)
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            self.out_head[u.name] = head
        self.pos = nn.Parameter(torch.randn(self.layout.total, d) * 0.02)
        self.blocks = nn.ModuleList(
            [_Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers)]
        )
        self.skip_proj = nn.ModuleList(
            [nn.Linear(2 * d, d) for _ in range(cfg.layers // 2)]
        )
        self.final_norm = nn.LayerNorm(d)

    def assemble_sequence(self, latents: dict, timesteps: torch.Tensor) -> torch.Tensor:
        """Embed latents and timesteps into the (B, total, dim) layout order.

        ``timesteps`` is (B, M) with one column per unit in schema order. The
        learned positional embedding is added to every slot, timestep slots
        included.
        """
        some = next(iter(latents.values()))
        batch = some.shape[0]
        dtype = some.dtype
        if timesteps.shape != (batch, len(self.unit_specs)):
            raise BackboneError(
                f"timesteps shape {tuple(timesteps.shape)} != "
                f"{(batch, len(self.unit_specs))}"
            )
        seq = some.new_zeros((batch, self.layout.total, self.cfg.dim))
        for i, u in enumerate(self.unit_specs):
            z = latents[u.name]
            if tuple(z.shape[1:]) != u.latent_shape:
                raise BackboneError(
                    f"unit {u.name}: latent shape {tuple(z.shape[1:])} != {u.latent_shape}"
                )
            tokens = z[:, None, :] if u.kind == "scalar" else patchify(z, self.cfg.patch)
            off, length = self.layout.ranges[u.name]
            seq[:, off : off + length] = self.in_proj[u.name](tokens)
            temb = sinusoidal_embedding(timesteps[:, i], self.cfg.dim).to(dtype)
            seq[:, self.layout.timestep_slots[u.name]] = temb
        return seq + self.pos.to(dtype)

    def forward(self, latents: dict, timesteps: torch.Tensor) -> dict:
        x = self.assemble_sequence(latents, timesteps)
        half = self.cfg.layers // 2
        stored = []
        for k in range(half):
            x = self.blocks[k](x)
            stored.append(x)
        for i in range(half, self.cfg.layers):
            k = self.cfg.layers - 1 - i
            x = self.skip_proj[k](torch.cat([x, stored[k]], dim=-1))
            x = self.blocks[i](x)
        x = self.final_norm(x)
        eps = {}
        for u in self.unit_specs:
            off, length = self.layout.ranges[u.name]
            out = self.out_head[u.name](x[:, off : off + length])
            if u.kind == "scalar":
                eps[u.name] = out[:, 0, :]
            else:
                eps[u.name] = unpatchify(out, u.latent_grid, u.channels, self.cfg.patch)
        return eps


def params_dict(model: nn.Module) -> dict:
    """Live named parameter tensors (the mutable parameter store)."""
    return dict(model.named_parameters())


def params_to_numpy(model: nn.Module) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.named_parameters()}


def load_params(model: nn.Module, arrays: dict) -> None:
    with torch.no_grad():
        for k, v in model.named_parameters():
            if k not in arrays:
                raise BackboneError(f"missing parameter {k} in checkpoint")
            src = torch.as_tensor(np.asarray(arrays[k]), dtype=v.dtype)
            if src.shape != v.shape:
                raise BackboneError(f"parameter {k}: shape mismatch")
            v.copy_(src)


def grads(model: nn.Module, loss_closure) -> dict:
    """Exact gradients of the scalar returned by ``loss_closure``.

    Non-finite gradients raise, naming the offending parameter.
    """
    model.zero_grad(set_to_none=True)
    loss = loss_closure()
    if not torch.isfinite(loss):
        raise BackboneError(f"non-finite loss: {float(loss)}")
    loss.backward()
    out = {}
    for k, v in model.named_parameters():
        g = v.grad
        g = torch.zeros_like(v) if g is None else g
        if not torch.isfinite(g).all():
            raise BackboneError(f"non-finite gradient in parameter {k}")
        out[k] = g.detach().cpu().numpy().copy()
    return out
