"""Per-band-group latent codecs and dataset pre-encoding.

Two codec families share one interface (numpy in, numpy out):

* ``ConvCodec`` -- a small KL-regularized convolutional VAE (ResNet blocks,
  group norm, SiLU) trained with L1 + MSE reconstruction and a weight-1e-6 KL
  term.
* ``IdentityCodec`` -- patch-average downsampling with bilinear upsampling,
  no learning; used for fast pipeline runs.

Categorical maps enter their codec through a fixed class palette (signed
Hadamard rows), which makes them diffusable as continuous images and gives a
nearest-row decoder with per-class scores. ``preencode_dataset`` encodes a
whole dataset once, standardizes every unit's latents with training-split
statistics, and returns a LatentStore that the diffusion trainer consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.linalg import hadamard
from scipy.ndimage import zoom
from torch import nn

from . import blobs
from .geotime import encode_latlon, encode_timestamp, DateStamp
from .schema import Schema, CATEGORICAL_IMAGE, SCALAR_VECTOR


class CodecError(Exception):
    pass


@dataclass(frozen=True)
class CodecConfig:
    channels: int
    downsample_factor: int = 4
    latent_channels: int = 8
    hidden: tuple = (32, 64)
    kl_weight: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        f = self.downsample_factor
        if f < 1 or (f & (f - 1)) != 0:
            raise CodecError(f"downsample_factor must be a power of 2, got {f}")
        if self.latent_channels < 1:
            raise CodecError("latent_channels must be >= 1")
        if len(self.hidden) != int(math.log2(f)) + 1:
            raise CodecError(
                f"need {int(math.log2(f)) + 1} hidden widths for factor {f}"
            )


# ---------------------------------------------------------------------------
# Class palette


@dataclass(frozen=True)
class ClassPalette:
    vectors: np.ndarray  # (K, D), pairwise distinct rows

    def __post_init__(self):
        v = self.vectors
        if v.ndim != 2:
            raise CodecError("palette must be a (K, D) matrix")
        for i in range(len(v)):
            for j in range(i + 1, len(v)):
                if np.array_equal(v[i], v[j]):
                    raise CodecError(f"palette rows {i} and {j} coincide")
        v.setflags(write=False)

    @property
    def classes(self) -> int:
        return self.vectors.shape[0]


def hadamard_palette(classes: int, dim: int) -> ClassPalette:
    """K distinct signed-Hadamard rows of length ``dim``."""
    m = 1
    while True:
        h = hadamard(m)[:, :dim] if m >= dim else None
        if h is not None:
            rows = []
            for cand in list(h) + list(-h):
                if not any(np.array_equal(cand, r) for r in rows):
                    rows.append(cand)
                if len(rows) == classes:
                    return ClassPalette(np.array(rows, dtype=np.float64))
        m *= 2
        if m > 4096:
            raise CodecError(f"cannot build palette for K={classes}, dim={dim}")


def class_to_continuous(cmap: np.ndarray, palette: ClassPalette) -> np.ndarray:
    """(H, W) class map -> (D, H, W) palette image."""
    if cmap.min() < 0 or cmap.max() >= palette.classes:
        raise CodecError("class values outside [0, K)")
    return palette.vectors[cmap].transpose(2, 0, 1).astype(np.float64)


def class_scores(image: np.ndarray, palette: ClassPalette) -> np.ndarray:
    """(D, H, W) image -> (K, H, W) scores = negative distances to palette rows."""
    diff = image[None] - palette.vectors[:, :, None, None]
    return -np.sqrt((diff**2).sum(axis=1))


def continuous_to_class(image: np.ndarray, palette: ClassPalette) -> np.ndarray:
    """Nearest palette row per pixel."""
    return class_scores(image, palette).argmax(axis=0).astype(np.int32)


# ---------------------------------------------------------------------------
# Identity codec


class IdentityCodec:
    """Patch-average encoder with bilinear-upsample decoder; no parameters."""

    def __init__(self, channels: int, downsample_factor: int):
        self.channels = channels
        self.factor = downsample_factor
        self.latent_channels = channels

    def encode(self, image: np.ndarray):
        c, h, w = image.shape
        if c != self.channels or h % self.factor or w % self.factor:
            raise CodecError(f"bad input shape {image.shape}")
        f = self.factor
        mu = image.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))
        return mu, np.full_like(mu, -np.inf)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return zoom(latent, (1, self.factor, self.factor), order=1, mode="nearest",
                    grid_mode=True)

    def spec(self) -> dict:
        return {"kind": "identity", "channels": self.channels,
                "downsample_factor": self.factor}


# ---------------------------------------------------------------------------
# Convolutional KL-VAE


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(1, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(1, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return x + h


class _VaeNet(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        stages = int(math.log2(cfg.downsample_factor))
        widths = cfg.hidden
        enc = [nn.Conv2d(cfg.channels, widths[0], 3, padding=1)]
        for i in range(stages):
            enc += [_ResBlock(widths[i]), nn.Conv2d(widths[i], widths[i + 1], 3,
                                                    stride=2, padding=1)]
        enc += [nn.GroupNorm(1, widths[-1]), nn.SiLU(),
                nn.Conv2d(widths[-1], 2 * cfg.latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv2d(cfg.latent_channels, widths[-1], 3, padding=1)]
        for i in reversed(range(stages)):
            dec += [_ResBlock(widths[i + 1]), nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(widths[i + 1], widths[i], 3, padding=1)]
        dec += [nn.GroupNorm(1, widths[0]), nn.SiLU(),
                nn.Conv2d(widths[0], cfg.channels, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)


class ConvCodec:
    """Numpy-facing wrapper around the torch VAE."""

    def __init__(self, cfg: CodecConfig, dtype: torch.dtype = torch.float32):
        self.cfg = cfg
        self.dtype = dtype
        torch.manual_seed(cfg.seed)
        self.net = _VaeNet(cfg).to(dtype)
        self.channels = cfg.channels
        self.latent_channels = cfg.latent_channels
        self.factor = cfg.downsample_factor

    def encode_batch(self, images: torch.Tensor):
        out = self.net.encoder(images)
        mu, logvar = out.chunk(2, dim=1)
        return mu, logvar

    def decode_batch(self, latents: torch.Tensor) -> torch.Tensor:
        return self.net.decoder(latents)

    def encode(self, image: np.ndarray):
        x = torch.as_tensor(image[None], dtype=self.dtype)
        with torch.no_grad():
            mu, logvar = self.encode_batch(x)
        return mu[0].numpy().astype(np.float64), logvar[0].numpy().astype(np.float64)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        z = torch.as_tensor(latent[None], dtype=self.dtype)
        with torch.no_grad():
            y = self.decode_batch(z)
        return y[0].numpy().astype(np.float64)

    def spec(self) -> dict:
        from dataclasses import asdict

        return {"kind": "conv_vae", **asdict(self.cfg)}


def codec_init(cfg: CodecConfig) -> ConvCodec:
    """Deterministically initialized VAE codec."""
    return ConvCodec(cfg)


def reparameterize(mu, logvar, rng: np.random.Generator):
    """latent = mu + exp(logvar / 2) * eps with eps ~ N(0, I)."""
    eps = rng.standard_normal(np.shape(mu))
    with np.errstate(over="ignore"):
        std = np.exp(0.5 * np.asarray(logvar, dtype=np.float64))
    std = np.where(np.isneginf(logvar), 0.0, std)
    return np.asarray(mu, dtype=np.float64) + std * eps


def kl_term(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """0.5 sum(mu^2 + e^logvar - 1 - logvar) per sample, averaged over batch."""
    per = 0.5 * (mu**2 + torch.exp(logvar) - 1.0 - logvar)
    return per.reshape(per.shape[0], -1).sum(dim=1).mean()


def codec_loss(codec: ConvCodec, images: torch.Tensor,
               generator: torch.Generator | None = None) -> dict:
    """L1 + MSE reconstruction plus KL, as torch scalars."""
    mu, logvar = codec.encode_batch(images)
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    z = mu + torch.exp(0.5 * logvar) * eps
    recon = codec.decode_batch(z)
    l1 = (recon - images).abs().mean()
    mse = ((recon - images) ** 2).mean()
    kl = kl_term(mu, logvar)
    return {"l1": l1, "mse": mse, "kl": kl,
            "total": l1 + mse + codec.cfg.kl_weight * kl}


@dataclass
class CodecTrainOpts:
    steps: int = 2000
    batch: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    holdout_fraction: float = 0.1


def train_codec(codec: ConvCodec, images: np.ndarray, opts: CodecTrainOpts):
    """Train on (N, C, H, W) images; returns (codec, history dict).

    Aborts with CodecError if the loss turns non-finite. The held-out MSE is
    reported against the variance of the held-out data (the predict-the-mean
    baseline).
    """
    if len(images) == 0:
        raise CodecError("empty dataset")
    n_hold = max(1, int(opts.holdout_fraction * len(images)))
    train = torch.as_tensor(images[:-n_hold], dtype=codec.dtype)
    hold = torch.as_tensor(images[-n_hold:], dtype=codec.dtype)
    gen = torch.Generator().manual_seed(opts.seed)
    opt = torch.optim.AdamW(codec.net.parameters(), lr=opts.lr,
                            weight_decay=opts.weight_decay)
    trace = []
    for step in range(opts.steps):
        idx = torch.randint(0, len(train), (min(opts.batch, len(train)),),
                            generator=gen)
        batch = train[idx]
        losses = codec_loss(codec, batch, gen)
        if not torch.isfinite(losses["total"]):
            raise CodecError(f"non-finite loss at step {step}: {losses}")
        opt.zero_grad()
        losses["total"].backward()
        opt.step()
        trace.append(float(losses["total"].detach()))
    with torch.no_grad():
        mu, _ = codec.encode_batch(hold)
        recon = codec.decode_batch(mu)
        holdout_mse = float(((recon - hold) ** 2).mean())
        data_var = float(hold.var())
    return codec, {"loss_trace": trace, "holdout_mse": holdout_mse,
                   "holdout_var": data_var}


# ---------------------------------------------------------------------------
# Latent statistics, pre-encoding, and the latent store


@dataclass
class LatentStats:
    mean: dict  # unit name -> (C,) float64
    std: dict  # unit name -> (C,) float64

    def to_json(self) -> dict:
        return {
            "mean": {k: v.tolist() for k, v in self.mean.items()},
            "std": {k: v.tolist() for k, v in self.std.items()},
        }

    @staticmethod
    def from_json(d: dict) -> "LatentStats":
        return LatentStats(
            {k: np.asarray(v, dtype=np.float64) for k, v in d["mean"].items()},
            {k: np.asarray(v, dtype=np.float64) for k, v in d["std"].items()},
        )


def compute_latent_stats(latents: dict) -> LatentStats:
    """Per-channel mean/std over the first (sample) axis of every unit."""
    mean, std = {}, {}
    for name, arr in latents.items():
        axes = (0,) if arr.ndim == 2 else (0, 2, 3)
        m = arr.mean(axis=axes)
        s = arr.std(axis=axes)
        bad = np.nonzero(s <= 0)[0]
        if bad.size:
            raise CodecError(f"degenerate latent std for unit {name}, channel {bad[0]}")
        mean[name], std[name] = m, s
    return LatentStats(mean, std)


def _apply_stats(arr: np.ndarray, m: np.ndarray, s: np.ndarray, invert: bool):
    shape = (1, -1) if arr.ndim == 2 else (1, -1, 1, 1)
    m = m.reshape(shape)
    s = s.reshape(shape)
    return arr * s + m if invert else (arr - m) / s


@dataclass
class LatentStore:
    """Standardized per-unit latents for a list of tiles."""

    latents: dict  # unit name -> (N, C, H, W) or (N, C) float64, standardized
    stats: LatentStats
    splits: list  # per-tile split labels
    schema_hash: str
    year_range: tuple
    codec_specs: dict = field(default_factory=dict)
    schema_config: dict = field(default_factory=dict)

    def count(self) -> int:
        return len(self.splits)

    def tile(self, i: int) -> dict:
        return {k: v[i] for k, v in self.latents.items()}

    def indices(self, split: str) -> list:
        return [i for i, s in enumerate(self.splits) if s == split]


def encode_tile(schema: Schema, codecs: dict, palette: ClassPalette, rec,
                year_range: tuple) -> dict:
    """Raw (unstandardized) per-unit latents for one TileRecord."""
    out = {}
    for m in schema.modalities:
        if m.kind == SCALAR_VECTOR:
            if m.name == "latlon":
                out[m.name] = np.asarray(encode_latlon(rec.lat, rec.lon).as_tuple())
            elif m.name == "time":
                tv = encode_timestamp(rec.time, *year_range)
                out[m.name] = np.asarray(tv.as_tuple())
            else:
                raise CodecError(f"no encoder for scalar modality {m.name}")
            continue
        for g in m.band_groups:
            if m.kind == CATEGORICAL_IMAGE:
                img = class_to_continuous(rec.maps[m.name], palette)
            else:
                img = rec.images[g.name].astype(np.float64)
            mu, _ = codecs[g.name].encode(img)
            out[g.name] = mu
    return out


def preencode_dataset(schema: Schema, codecs: dict, palette: ClassPalette,
                      records: list, splits: list, year_range: tuple,
                      stats: LatentStats | None = None) -> LatentStore:
    """Encode every tile (deterministic mu path) and standardize per channel.

    Statistics are computed on the training split unless ``stats`` is given
    (e.g. when encoding a validation set with training statistics).
    """
    raw = {}
    for rec in records:
        enc = encode_tile(schema, codecs, palette, rec, year_range)
        for k, v in enc.items():
            raw.setdefault(k, []).append(v)
    arrays = {k: np.stack(v) for k, v in raw.items()}
    if stats is None:
        train_idx = [i for i, s in enumerate(splits) if s == "train"]
        if not train_idx:
            raise CodecError("no training tiles to compute statistics from")
        stats = compute_latent_stats({k: v[train_idx] for k, v in arrays.items()})
    standardized = {
        k: _apply_stats(v, stats.mean[k], stats.std[k], invert=False)
        for k, v in arrays.items()
    }
    return LatentStore(standardized, stats, list(splits), schema.hash(), tuple(year_range),
                       {name: c.spec() for name, c in codecs.items()},
                       schema.to_config())


def destandardize(store_stats: LatentStats, unit: str, latent: np.ndarray) -> np.ndarray:
    return _apply_stats(latent[None], store_stats.mean[unit], store_stats.std[unit],
                        invert=True)[0]


def save_latent_store(store: LatentStore, path: str | Path) -> dict:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    refs = {}
    for name, arr in store.latents.items():
        fname = f"latents_{name}.bin"
        refs[name] = {"file": fname, "sha256": blobs.write_blob(path / fname, arr)}
    manifest = {
        "kind": "latent_store",
        "schema_hash": store.schema_hash,
        "stats": store.stats.to_json(),
        "splits": store.splits,
        "year_range": list(store.year_range),
        "codec_specs": store.codec_specs,
        "schema_config": store.schema_config,
        "blobs": refs,
    }
    blobs.write_manifest(path / "manifest.json", manifest)
    return manifest


def load_latent_store(path: str | Path) -> LatentStore:
    path = Path(path)
    manifest = blobs.read_manifest(path / "manifest.json")
    latents = {
        name: blobs.read_blob(path / ref["file"], ref["sha256"])
        for name, ref in manifest["blobs"].items()
    }
    return LatentStore(latents, LatentStats.from_json(manifest["stats"]),
                       manifest["splits"], manifest["schema_hash"],
                       tuple(manifest["year_range"]), manifest["codec_specs"],
                       manifest.get("schema_config", {}))


def identity_codecs(schema: Schema) -> dict:
    """Identity codec per band group, sized from the schema."""
    out = {}
    for m in schema.modalities:
        for g in m.band_groups:
            out[g.name] = IdentityCodec(g.channels, schema.downsample_factor)
    return out
