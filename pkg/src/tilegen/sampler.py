"""Joint and any-to-any conditional sampling via per-unit timestep control.

Units in the conditioning set C keep their clean (standardized) latents at
every reverse step with timestep token 0; units in the generation set G start
from unit Gaussian noise and follow the full reverse chain, all units
attending to one another at every step. Ensembles run chains batched through
the denoiser, each chain drawing its noise from its own seeded generator:
chains are statistically independent and a given (spec, n, seeds) call is
fully reproducible. The forward pass is shared across the batch, so bitwise
chain outputs can shift at float rounding level between batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import blobs
from .codec import class_scores, continuous_to_class, destandardize
from .diffusion import ddpm_step
from .geotime import GeoVec, TimeVec, decode_latlon, decode_timestamp
from .pipeline import GenerationModel


class SamplerError(Exception):
    pass


@dataclass
class ConditioningSpec:
    """Partition of units into pinned conditioning values and generated units."""

    condition: dict  # unit name -> standardized latent array
    generate: tuple  # unit names denoised from pure noise

    def validate(self, gm: GenerationModel) -> None:
        unit_names = [u.name for u in gm.schema.units]
        overlap = set(self.condition) & set(self.generate)
        if overlap:
            raise SamplerError(f"units in both C and G: {sorted(overlap)}")
        covered = set(self.condition) | set(self.generate)
        if covered != set(unit_names):
            missing = set(unit_names) - covered
            extra = covered - set(unit_names)
            raise SamplerError(f"C and G must partition units; missing={sorted(missing)}, "
                               f"unknown={sorted(extra)}")
        for name, val in self.condition.items():
            want = gm.schema.unit(name).latent_shape
            if tuple(np.shape(val)) != want:
                raise SamplerError(f"conditioning value for {name} has shape "
                                   f"{np.shape(val)}, expected {want}")

    def to_json(self) -> dict:
        return {"condition": sorted(self.condition), "generate": sorted(self.generate)}


@dataclass
class GenerationEnsemble:
    samples: list  # list of per-sample dicts from sample_conditional
    seeds: list
    spec_json: dict
    manifest: dict = field(default_factory=dict)


def conditioning_from_tile(gm: GenerationModel, tile_latents: dict,
                           condition_units: list) -> ConditioningSpec:
    """Build a spec pinning the named units to one tile's standardized latents."""
    unit_names = [u.name for u in gm.schema.units]
    cond = {name: tile_latents[name] for name in condition_units}
    gen = tuple(n for n in unit_names if n not in cond)
    return ConditioningSpec(cond, gen)


def _reverse_chain(gm: GenerationModel, spec: ConditioningSpec, rngs: list) -> dict:
    """Run len(rngs) chains batched; returns unit -> (B, ...) standardized latents.

    Each chain's noise comes only from its own generator, drawn in schema
    unit order per step; the denoiser forward pass is shared across chains.
    """
    spec.validate(gm)
    net = gm.ema_net()
    schedule = gm.schedule
    units = gm.schema.units
    b = len(rngs)

    latents = {}
    for u in units:
        if u.name in spec.condition:
            base = np.asarray(spec.condition[u.name], dtype=np.float64)
            latents[u.name] = np.broadcast_to(base, (b,) + base.shape).copy()
        else:
            latents[u.name] = np.stack(
                [rng.standard_normal(u.latent_shape) for rng in rngs]
            )

    t_row = np.zeros(len(units), dtype=np.int64)
    gen_idx = {u.name: i for i, u in enumerate(units)}
    with torch.no_grad():
        for t in reversed(range(schedule.T)):
            for u in units:
                t_row[gen_idx[u.name]] = 0 if u.name in spec.condition else t
            tv = np.broadcast_to(t_row, (b, len(units))).copy()
            inputs = {k: torch.as_tensor(v, dtype=torch.float32)
                      for k, v in latents.items()}
            eps = net(inputs, torch.as_tensor(tv))
            for u in units:
                if u.name in spec.condition:
                    continue
                eps_u = eps[u.name].double().numpy()
                z = latents[u.name]
                nxt = np.empty_like(z)
                for i, rng in enumerate(rngs):
                    nxt[i] = ddpm_step(schedule, z[i], eps_u[i], t, rng)
                latents[u.name] = nxt
    return latents


def decode_sample(gm: GenerationModel, latents: dict) -> dict:
    """Destandardize and decode one sample's per-unit latents.

    Uses the deterministic codec path. Categorical maps come back as class
    indices plus per-class scores; scalar units decode to (lat, lon) degrees
    and a DateStamp.
    """
    out = {"images": {}, "maps": {}, "scores": {}}
    for m in gm.schema.modalities:
        if m.kind == "scalar_vector":
            raw = destandardize(gm.stats, m.name, latents[m.name])
            if m.name == "latlon":
                out["geovec"] = GeoVec(*raw.tolist())
                out["lat"], out["lon"] = decode_latlon(out["geovec"])
            elif m.name == "time":
                out["timevec"] = TimeVec(*raw.tolist())
                out["time"] = decode_timestamp(out["timevec"], *gm.year_range)
            continue
        for g in m.band_groups:
            raw = destandardize(gm.stats, g.name, latents[g.name])
            img = gm.codecs[g.name].decode(raw)
            if m.kind == "categorical_image":
                out["maps"][m.name] = continuous_to_class(img, gm.palette)
                out["scores"][m.name] = class_scores(img, gm.palette)
            else:
                out["images"][g.name] = img
    return out


def sample_conditional(gm: GenerationModel, spec: ConditioningSpec,
                       rng: np.random.Generator) -> dict:
    """One conditional sample; C latents are returned bit-identical to inputs."""
    chain = _reverse_chain(gm, spec, [rng])
    latents = {}
    for u in gm.schema.units:
        if u.name in spec.condition:
            latents[u.name] = spec.condition[u.name]
        else:
            latents[u.name] = chain[u.name][0]
    return {"latents": latents, "decoded": decode_sample(gm, latents),
            "spec": spec.to_json()}


def sample_joint(gm: GenerationModel, rng: np.random.Generator) -> dict:
    """Unconditional joint sample: every unit denoised from pure noise."""
    spec = ConditioningSpec({}, tuple(u.name for u in gm.schema.units))
    return sample_conditional(gm, spec, rng)


def band_infill(gm: GenerationModel, available: dict, rng: np.random.Generator) -> dict:
    """Generate everything not in ``available`` (band-group name -> latent)."""
    unit_names = [u.name for u in gm.schema.units]
    unknown = set(available) - set(unit_names)
    if unknown:
        raise SamplerError(f"unknown band groups: {sorted(unknown)}")
    spec = ConditioningSpec(dict(available),
                            tuple(n for n in unit_names if n not in available))
    return sample_conditional(gm, spec, rng)


def sample_ensemble(gm: GenerationModel, spec: ConditioningSpec, n: int,
                    base_seed: int) -> GenerationEnsemble:
    """n independent chains with seeds base_seed .. base_seed + n - 1."""
    if n < 1:
        raise SamplerError("ensemble size must be >= 1")
    seeds = [base_seed + i for i in range(n)]
    rngs = [np.random.default_rng(s) for s in seeds]
    chain = _reverse_chain(gm, spec, rngs)
    samples = []
    for i in range(n):
        latents = {}
        for u in gm.schema.units:
            if u.name in spec.condition:
                latents[u.name] = spec.condition[u.name]
            else:
                latents[u.name] = chain[u.name][i]
        samples.append({"latents": latents, "decoded": decode_sample(gm, latents),
                        "spec": spec.to_json()})
    manifest = {"spec": spec.to_json(), "seeds": seeds, "n": n}
    return GenerationEnsemble(samples, seeds, spec.to_json(), manifest)


# ---------------------------------------------------------------------------
# Ensemble persistence (one subdirectory per tile, one blob per sample/unit)


def write_ensemble(ensemble: GenerationEnsemble, path: str | Path, tile_id: int,
                   checkpoint_hash: str = "") -> dict:
    path = Path(path) / f"tile{tile_id:05d}"
    path.mkdir(parents=True, exist_ok=True)
    refs = {}
    for si, sample in enumerate(ensemble.samples):
        for name, arr in sample["latents"].items():
            fname = f"sample{si:03d}_{name}.bin"
            refs[f"{si}/{name}"] = {
                "file": fname,
                "sha256": blobs.write_blob(path / fname, np.asarray(arr)),
            }
    manifest = {
        "kind": "ensemble",
        "tile_id": tile_id,
        "spec": ensemble.spec_json,
        "seeds": ensemble.seeds,
        "checkpoint_hash": checkpoint_hash,
        "blobs": refs,
    }
    blobs.write_manifest(path / "manifest.json", manifest)
    return manifest


def read_ensemble(gm: GenerationModel, path: str | Path, tile_id: int) -> GenerationEnsemble:
    path = Path(path) / f"tile{tile_id:05d}"
    manifest = blobs.read_manifest(path / "manifest.json")
    n = len(manifest["seeds"])
    samples = []
    for si in range(n):
        latents = {}
        for key, ref in manifest["blobs"].items():
            idx, name = key.split("/", 1)
            if int(idx) == si:
                latents[name] = blobs.read_blob(path / ref["file"], ref["sha256"])
        samples.append({"latents": latents, "decoded": decode_sample(gm, latents),
                        "spec": manifest["spec"]})
    return GenerationEnsemble(samples, manifest["seeds"], manifest["spec"], manifest)
