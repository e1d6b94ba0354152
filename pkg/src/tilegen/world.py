"""Procedural multimodal tile generator with closed-form conditional oracles.

Each tile is built from a small causal graph: smooth elevation and moisture
fields drive a deterministic land-cover classification; terrain slope and
roughness drive SAR-like backscatter (with multiplicative speckle); land
cover, season, and per-tile nuisance variables (illumination scale s,
atmospheric offset a, pixel noise) drive the optical bands. The nuisances
make the conditioning-to-observation map one-to-many by construction, and
their distributions are known, so conditional means and variances of the
optical bands are available in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import blobs
from .geotime import DateStamp, days_in_year, snap_to_grid
from .schema import Schema, build_schema, validate_sample

CLASS_NAMES = ("water", "trees", "crops", "built", "bare", "snow")
WATER, TREES, CROPS, BUILT, BARE, SNOW = range(6)
VEGETATION = (TREES, CROPS)

# Per-class band means for [red, green, blue, nir, swir1, swir2, rededge].
_REFLECTANCE_6 = np.array(
    [
        [0.06, 0.08, 0.10, 0.04, 0.03, 0.02, 0.05],  # water
        [0.08, 0.18, 0.06, 0.55, 0.20, 0.10, 0.30],  # trees
        [0.12, 0.25, 0.08, 0.45, 0.25, 0.15, 0.35],  # crops
        [0.35, 0.33, 0.30, 0.38, 0.40, 0.38, 0.36],  # built
        [0.45, 0.38, 0.30, 0.50, 0.55, 0.50, 0.45],  # bare
        [0.85, 0.88, 0.90, 0.80, 0.20, 0.15, 0.60],  # snow
    ]
)


class WorldError(Exception):
    pass


@dataclass(frozen=True)
class WorldConfig:
    grid: int = 24  # native grid of hi-res optical, SAR, DEM, LULC
    lo_grid: int = 8  # native grid of the low-res optical group
    n_hi_bands: int = 4
    n_lo_bands: int = 3
    classes: int = 6
    palette_dim: int = 4
    downsample_factor: int = 4
    octaves: tuple = ((6.0, 1.0), (3.0, 0.5), (1.5, 0.25))  # (sigma, amplitude)
    moisture_sigma: float = 4.0
    dem_base: float = 500.0
    dem_scale: float = 300.0
    illum_low: float = 0.7
    illum_high: float = 1.3
    atm_sigma: float = 0.05
    pix_sigma: float = 0.02
    speckle_sigma: float = 0.25
    seasonal_amp: float = 0.15
    sar_slope_gain: float = 1.2
    sar_rough_gain: float = 0.6
    lo_offsets: tuple = (0.02, -0.01, 0.015)
    year_min: int = 2018
    year_max: int = 2024
    seed: int = 0

    def __post_init__(self):
        if self.illum_low <= 0 or self.illum_high <= self.illum_low:
            raise WorldError("illumination range must be positive and increasing")
        for _, amp in self.octaves:
            if amp <= 0:
                raise WorldError("octave amplitudes must be positive")
        if self.grid % self.lo_grid != 0:
            raise WorldError("grid must be a multiple of lo_grid")
        if len(self.lo_offsets) != self.n_lo_bands:
            raise WorldError("need one lo offset per lo band")

    @property
    def n_bands(self) -> int:
        return self.n_hi_bands + self.n_lo_bands

    @property
    def illum_mean(self) -> float:
        return 0.5 * (self.illum_low + self.illum_high)

    @property
    def illum_var(self) -> float:
        return (self.illum_high - self.illum_low) ** 2 / 12.0

    def reflectance(self) -> np.ndarray:
        """(K, n_bands) per-class mean band values."""
        if self.classes == 6 and self.n_bands == 7:
            return _REFLECTANCE_6.copy()
        rng = np.random.default_rng(12345)
        return rng.uniform(0.05, 0.9, size=(self.classes, self.n_bands))

    def schema_config(self) -> dict:
        return {
            "patch": 2,
            "downsample_factor": self.downsample_factor,
            "modalities": [
                {
                    "name": "optical",
                    "kind": "continuous_image",
                    "band_groups": [
                        {"name": "optical_hi", "channels": self.n_hi_bands,
                         "grid": self.grid, "resolution_tag": "10m",
                         "latent_channels": self.n_hi_bands},
                        {"name": "optical_lo", "channels": self.n_lo_bands,
                         "grid": self.lo_grid, "resolution_tag": "30m",
                         "latent_channels": self.n_lo_bands},
                    ],
                },
                {
                    "name": "sar",
                    "kind": "continuous_image",
                    "band_groups": [
                        {"name": "sar", "channels": 2, "grid": self.grid,
                         "resolution_tag": "10m", "latent_channels": 2},
                    ],
                },
                {
                    "name": "dem",
                    "kind": "continuous_image",
                    "band_groups": [
                        {"name": "dem", "channels": 1, "grid": self.grid,
                         "resolution_tag": "30m", "latent_channels": 1},
                    ],
                },
                {
                    "name": "lulc",
                    "kind": "categorical_image",
                    "classes": self.classes,
                    "band_groups": [
                        {"name": "lulc", "channels": self.palette_dim,
                         "grid": self.grid, "resolution_tag": "10m",
                         "latent_channels": self.palette_dim},
                    ],
                },
                {"name": "latlon", "kind": "scalar_vector", "vector_len": 3},
                {"name": "time", "kind": "scalar_vector", "vector_len": 3},
            ],
        }

    def schema(self) -> Schema:
        return build_schema(self.schema_config())


@dataclass
class TileRecord:
    """One tile's multimodal sample plus hidden nuisance latents."""

    images: dict  # band-group name -> float32 (C, H, W)
    maps: dict  # categorical modality name -> int32 (H, W)
    lat: float
    lon: float
    time: DateStamp
    hidden: dict = field(default_factory=dict)


@dataclass(frozen=True)
class OracleStats:
    """Closed-form conditional mean/variance of hi-res optical bands."""

    mean: np.ndarray  # (n_hi_bands, H, W)
    var: np.ndarray  # (n_hi_bands, H, W)


def _smooth_field(rng: np.random.Generator, grid: int, sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal((grid, grid)), sigma, mode="wrap")
    sd = f.std()
    return f / sd if sd > 0 else f


def _terrain(cfg: WorldConfig, rng: np.random.Generator):
    elev = np.zeros((cfg.grid, cfg.grid))
    for sigma, amp in cfg.octaves:
        elev += amp * _smooth_field(rng, cfg.grid, sigma)
    elev /= math.sqrt(sum(a * a for _, a in cfg.octaves))
    moisture = _smooth_field(rng, cfg.grid, cfg.moisture_sigma)
    return elev, moisture


def classify_lulc(cfg: WorldConfig, elev_norm: np.ndarray, moisture: np.ndarray,
                  lat_deg: float) -> np.ndarray:
    """Deterministic land-cover rules over (elevation, moisture, |latitude|)."""
    conds = [
        elev_norm < -1.0,
        (elev_norm > 1.3) | (abs(lat_deg) > 66.5),
        moisture > 0.45,
        moisture > -0.25,
        (moisture <= -0.25) & (elev_norm < 0.0),
    ]
    choices = [WATER, SNOW, TREES, CROPS, BUILT]
    return np.select(conds, choices, default=BARE).astype(np.int32)


def season_multiplier(cfg: WorldConfig, time: DateStamp) -> np.ndarray:
    """(K,) per-class multiplier; only vegetation classes vary with season."""
    phase = 2.0 * math.pi * (time.day_of_year - 1) / days_in_year(time.year)
    mult = np.ones(cfg.classes)
    for k in VEGETATION:
        if k < cfg.classes:
            mult[k] = 1.0 + cfg.seasonal_amp * math.sin(phase)
    return mult


def effective_reflectance(cfg: WorldConfig, time: DateStamp) -> np.ndarray:
    """(K, n_bands) class/band means after the seasonal multiplier."""
    return cfg.reflectance() * season_multiplier(cfg, time)[:, None]


def _block_average(img: np.ndarray, factor: int) -> np.ndarray:
    c, h, w = img.shape
    return img.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def _render_optical(cfg: WorldConfig, lulc: np.ndarray, time: DateStamp,
                    illum: float, atm: float, rng: np.random.Generator):
    """Render both optical groups from shared per-tile nuisances."""
    r_eff = effective_reflectance(cfg, time)  # (K, B)
    base = r_eff[lulc]  # (H, W, B)
    hi = base[:, :, : cfg.n_hi_bands].transpose(2, 0, 1) * illum + atm
    hi = hi + cfg.pix_sigma * rng.standard_normal(hi.shape)
    lo_full = base[:, :, cfg.n_hi_bands :].transpose(2, 0, 1) * illum + atm
    lo = _block_average(lo_full, cfg.grid // cfg.lo_grid)
    lo = lo + np.asarray(cfg.lo_offsets)[:, None, None]
    lo = lo + cfg.pix_sigma * rng.standard_normal(lo.shape)
    return hi, lo


def _render_sar(cfg: WorldConfig, dem: np.ndarray, speckle_rng: np.random.Generator):
    gy, gx = np.gradient(dem)
    slope = np.hypot(gx, gy) / 300.0
    rough = gaussian_filter(np.abs(dem - gaussian_filter(dem, 2.0, mode="wrap")), 1.0,
                            mode="wrap") / 150.0
    ch0 = np.clip(cfg.sar_slope_gain * slope + cfg.sar_rough_gain * rough, 0.0, 1.5)
    ch1 = np.clip(0.5 * cfg.sar_slope_gain * slope + 1.5 * cfg.sar_rough_gain * rough,
                  0.0, 1.5)
    base = np.stack([ch0, ch1])
    g = speckle_rng.standard_normal(base.shape)
    speckle = np.exp(cfg.speckle_sigma * g - 0.5 * cfg.speckle_sigma**2)
    return base * speckle


def generate_tile(cfg: WorldConfig, rng: np.random.Generator) -> TileRecord:
    """Draw one tile from the world's generative process."""
    u = rng.random()
    lat = math.degrees(math.asin(2.0 * u - 1.0))
    lon = rng.uniform(-180.0, 180.0)
    lat, lon = snap_to_grid(lat, lon, 10.0)

    year = int(rng.integers(cfg.year_min, cfg.year_max + 1))
    day = int(rng.integers(1, days_in_year(year) + 1))
    time = DateStamp(year, day)

    elev_norm, moisture = _terrain(cfg, rng)
    dem = cfg.dem_base + cfg.dem_scale * elev_norm
    lulc = classify_lulc(cfg, elev_norm, moisture, lat)

    illum = rng.uniform(cfg.illum_low, cfg.illum_high)
    atm = cfg.atm_sigma * rng.standard_normal()
    speckle_seed = int(rng.integers(0, 2**31))
    hi, lo = _render_optical(cfg, lulc, time, illum, atm, rng)
    sar = _render_sar(cfg, dem, np.random.default_rng(speckle_seed))

    return TileRecord(
        images={
            "optical_hi": hi.astype(np.float32),
            "optical_lo": lo.astype(np.float32),
            "sar": sar.astype(np.float32),
            "dem": dem[None].astype(np.float32),
        },
        maps={"lulc": lulc},
        lat=lat,
        lon=lon,
        time=time,
        hidden={"illum": illum, "atm": atm, "speckle_seed": speckle_seed},
    )


def tile_rng(cfg: WorldConfig, index: int) -> np.random.Generator:
    """Per-tile generator derived from the world seed; parallel-safe."""
    return np.random.default_rng(np.random.SeedSequence((cfg.seed, index)))


def oracle_conditional_stats(cfg: WorldConfig, lulc: np.ndarray,
                             time: DateStamp) -> OracleStats:
    """Conditional mean/variance of hi-res optical given (lulc, time).

    mean = R_eff[class, band] * E[s]; var = R_eff^2 Var(s) + sigma_a^2 +
    sigma_pix^2, with s the illumination scale and a the atmospheric offset.
    """
    r_eff = effective_reflectance(cfg, time)[:, : cfg.n_hi_bands]
    per_px = r_eff[lulc].transpose(2, 0, 1)  # (B, H, W)
    mean = per_px * cfg.illum_mean
    var = per_px**2 * cfg.illum_var + cfg.atm_sigma**2 + cfg.pix_sigma**2
    return OracleStats(mean, var)


def oracle_sample_optical(cfg: WorldConfig, lulc: np.ndarray, time: DateStamp,
                          rng: np.random.Generator) -> np.ndarray:
    """Redraw the hi-res optical group with fresh nuisances, fixed (lulc, time)."""
    illum = rng.uniform(cfg.illum_low, cfg.illum_high)
    atm = cfg.atm_sigma * rng.standard_normal()
    hi, _ = _render_optical(cfg, lulc, time, illum, atm, rng)
    return hi


# ---------------------------------------------------------------------------
# Dataset persistence


def split_of(index: int, n: int) -> str:
    """Deterministic 80/10/10 split by tile index."""
    if index < int(0.8 * n):
        return "train"
    if index < int(0.9 * n):
        return "val"
    return "test"


def write_dataset(cfg: WorldConfig, n: int, path: str | Path) -> dict:
    """Generate n tiles and write them as blobs plus a manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    schema = cfg.schema()
    tiles = []
    for i in range(n):
        rec = generate_tile(cfg, tile_rng(cfg, i))
        validate_sample(schema, rec)
        entry = {
            "index": i,
            "split": split_of(i, n),
            "lat": rec.lat,
            "lon": rec.lon,
            "year": rec.time.year,
            "day_of_year": rec.time.day_of_year,
            "hidden": rec.hidden,
            "blobs": {},
        }
        for name, arr in {**rec.images, **rec.maps}.items():
            fname = f"tile{i:05d}_{name}.bin"
            entry["blobs"][name] = {
                "file": fname,
                "sha256": blobs.write_blob(path / fname, arr),
            }
        tiles.append(entry)
    manifest = {
        "kind": "dataset",
        "world_config": asdict(cfg),
        "world_hash": blobs.hash_json(asdict(cfg)),
        "schema_hash": schema.hash(),
        "count": n,
        "tiles": tiles,
    }
    blobs.write_manifest(path / "manifest.json", manifest)
    return manifest


def read_dataset(path: str | Path, split: str | None = None,
                 expect_schema_hash: str | None = None):
    """Read tiles back; verifies blob hashes and, optionally, the schema hash."""
    path = Path(path)
    manifest = blobs.read_manifest(path / "manifest.json")
    if expect_schema_hash is not None and manifest["schema_hash"] != expect_schema_hash:
        raise WorldError(
            f"schema hash mismatch: dataset has {manifest['schema_hash']}"
        )
    cfg = world_config_from_dict(manifest["world_config"])
    records = []
    for entry in manifest["tiles"]:
        if split is not None and entry["split"] != split:
            continue
        arrays = {}
        for name, ref in entry["blobs"].items():
            arrays[name] = blobs.read_blob(path / ref["file"], ref["sha256"])
        maps = {"lulc": arrays.pop("lulc")}
        records.append(
            TileRecord(
                images=arrays,
                maps=maps,
                lat=entry["lat"],
                lon=entry["lon"],
                time=DateStamp(entry["year"], entry["day_of_year"]),
                hidden=entry["hidden"],
            )
        )
    return cfg, records, manifest


def world_config_from_dict(d: dict) -> WorldConfig:
    d = dict(d)
    d["octaves"] = tuple(tuple(o) for o in d["octaves"])
    d["lo_offsets"] = tuple(d["lo_offsets"])
    return WorldConfig(**d)
