"""Model bundle: everything needed to sample and evaluate from one checkpoint.

A GenerationModel ties together the schema, the per-group codecs, latent
statistics, the class palette, the noise schedule, the denoiser, and its EMA
shadow. Checkpoints are directories of named parameter blobs plus a JSON
manifest (step, schedule parameters, EMA decay, seeds, schema config, latent
statistics), hash-verified on load.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import blobs
from .backbone import BackboneConfig, Denoiser, load_params, params_to_numpy
from .codec import (ClassPalette, CodecConfig, ConvCodec, IdentityCodec,
                    LatentStats, hadamard_palette)
from .diffusion import EmaState, NoiseSchedule, build_schedule
from .schema import Schema, build_schema


class PipelineError(Exception):
    pass


@dataclass
class GenerationModel:
    schema: Schema
    codecs: dict
    palette: ClassPalette
    stats: LatentStats
    schedule: NoiseSchedule
    schedule_params: dict
    backbone_cfg: BackboneConfig
    net: "Denoiser"
    ema: EmaState
    year_range: tuple
    step: int = 0
    seed: int = 0
    _ema_net: object = field(default=None, repr=False)

    def ema_net(self) -> Denoiser:
        """Denoiser carrying the EMA shadow weights (cached)."""
        if self._ema_net is None:
            net = Denoiser(self.schema, self.backbone_cfg)
            load_params(net, {k: np.asarray(v) for k, v in self.ema.shadow.items()})
            net.eval()
            self._ema_net = net
        return self._ema_net

    def invalidate_ema_net(self) -> None:
        self._ema_net = None


def _codec_from_spec(spec: dict, group_channels: int, factor: int):
    if spec["kind"] == "identity":
        return IdentityCodec(spec["channels"], spec["downsample_factor"])
    if spec["kind"] == "conv_vae":
        cfg = CodecConfig(
            channels=spec["channels"],
            downsample_factor=spec["downsample_factor"],
            latent_channels=spec["latent_channels"],
            hidden=tuple(spec["hidden"]),
            kl_weight=spec["kl_weight"],
            seed=spec["seed"],
        )
        return ConvCodec(cfg)
    raise PipelineError(f"unknown codec kind {spec['kind']}")


def save_checkpoint(gm: GenerationModel, path: str | Path) -> dict:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    refs = {}
    live = params_to_numpy(gm.net)
    for name, arr in live.items():
        fname = "param__" + name.replace(".", "_") + ".bin"
        refs["live/" + name] = {"file": fname,
                                "sha256": blobs.write_blob(path / fname, arr)}
    for name, sh in gm.ema.shadow.items():
        arr = np.asarray(sh.detach().cpu().numpy() if hasattr(sh, "detach") else sh)
        fname = "ema__" + name.replace(".", "_") + ".bin"
        refs["ema/" + name] = {"file": fname,
                               "sha256": blobs.write_blob(path / fname, arr)}
    codec_specs = {}
    for gname, codec in gm.codecs.items():
        codec_specs[gname] = codec.spec()
        if isinstance(codec, ConvCodec):
            for pname, tensor in codec.net.state_dict().items():
                fname = f"codec__{gname}__" + pname.replace(".", "_") + ".bin"
                refs[f"codec/{gname}/{pname}"] = {
                    "file": fname,
                    "sha256": blobs.write_blob(path / fname, tensor.numpy()),
                }
    manifest = {
        "kind": "checkpoint",
        "step": gm.step,
        "seed": gm.seed,
        "schema": gm.schema.to_config(),
        "schema_hash": gm.schema.hash(),
        "backbone": {
            "layers": gm.backbone_cfg.layers,
            "dim": gm.backbone_cfg.dim,
            "heads": gm.backbone_cfg.heads,
            "mlp_ratio": gm.backbone_cfg.mlp_ratio,
            "patch": gm.backbone_cfg.patch,
            "seed": gm.backbone_cfg.seed,
        },
        "schedule": gm.schedule_params,
        "ema_decay": gm.ema.decay,
        "stats": gm.stats.to_json(),
        "year_range": list(gm.year_range),
        "palette": {"classes": gm.palette.classes,
                    "dim": gm.palette.vectors.shape[1]},
        "codec_specs": codec_specs,
        "blobs": refs,
    }
    blobs.write_manifest(path / "manifest.json", manifest)
    return manifest


def load_checkpoint(path: str | Path) -> GenerationModel:
    import torch

    path = Path(path)
    manifest = blobs.read_manifest(path / "manifest.json")
    if manifest.get("kind") != "checkpoint":
        raise PipelineError(f"{path} is not a checkpoint directory")
    schema = build_schema(manifest["schema"])
    if schema.hash() != manifest["schema_hash"]:
        raise PipelineError("schema hash mismatch in checkpoint")
    bcfg = BackboneConfig(**manifest["backbone"])
    net = Denoiser(schema, bcfg)

    def _load(prefix):
        out = {}
        for key, ref in manifest["blobs"].items():
            if key.startswith(prefix):
                out[key[len(prefix):]] = blobs.read_blob(path / ref["file"],
                                                         ref["sha256"])
        return out

    load_params(net, _load("live/"))
    ema = EmaState(_load("ema/"), manifest["ema_decay"])

    codecs = {}
    for gname, spec in manifest["codec_specs"].items():
        codec = _codec_from_spec(spec, spec["channels"], spec["downsample_factor"])
        if isinstance(codec, ConvCodec):
            state = {}
            prefix = f"codec/{gname}/"
            for key, ref in manifest["blobs"].items():
                if key.startswith(prefix):
                    state[key[len(prefix):]] = torch.as_tensor(
                        blobs.read_blob(path / ref["file"], ref["sha256"])
                    )
            codec.net.load_state_dict(state)
        codecs[gname] = codec

    sched_params = manifest["schedule"]
    schedule = build_schedule(**sched_params)
    palette = hadamard_palette(manifest["palette"]["classes"],
                               manifest["palette"]["dim"])
    return GenerationModel(
        schema=schema,
        codecs=codecs,
        palette=palette,
        stats=LatentStats.from_json(manifest["stats"]),
        schedule=schedule,
        schedule_params=sched_params,
        backbone_cfg=bcfg,
        net=net,
        ema=ema,
        year_range=tuple(manifest["year_range"]),
        step=manifest["step"],
        seed=manifest["seed"],
    )


def tile_latents(gm: GenerationModel, record) -> dict:
    """Standardized per-unit latents of one TileRecord under this model's codecs."""
    from .codec import _apply_stats, encode_tile

    raw = encode_tile(gm.schema, gm.codecs, gm.palette, record, gm.year_range)
    return {
        k: _apply_stats(v[None], gm.stats.mean[k], gm.stats.std[k], invert=False)[0]
        for k, v in raw.items()
    }
