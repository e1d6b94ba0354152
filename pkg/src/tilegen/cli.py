"""Operator surface: each pipeline stage as a reproducible, manifest-driven run.

Subcommands: dataset | train-codec | preencode | train | sample | eval.
Structural settings live in JSON config files (--config); flags only select
files and override scalars. Every run writes a ``run.json`` manifest into the
output directory recording the command, config hash, schema hash, seeds,
input artifact hashes, output paths, timestamps, and code version.

Seed policy: a single --seed root per run; each stage derives its generator
from ``SeedSequence((seed, crc32(stage_name)))`` so stages are independently
reproducible from the same root.
"""

from __future__ import annotations

import json
import sys
import time as time_mod
import zlib
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np
import torch

from . import __version__, blobs
from .backbone import BackboneConfig
from .codec import (CodecConfig, CodecError, CodecTrainOpts, ConvCodec,
                    codec_init, hadamard_palette, identity_codecs,
                    load_latent_store, preencode_dataset, save_latent_store,
                    train_codec)
from .evaluation import (EvaluationError, LadderSpec, distribution_narrowing,
                         latlon_dispersion, leave_one_out, spectral_profile,
                         write_report)
from .metrics import MetricError, categorical_metrics, geodesic_km, mae, psnr, rmse, ssim
from .pipeline import PipelineError, load_checkpoint, save_checkpoint, tile_latents
from .sampler import (ConditioningSpec, SamplerError, read_ensemble,
                      sample_ensemble, write_ensemble)
from .schema import SchemaError, build_schema
from .training import TrainConfig, TrainingError, train_diffusion
from .world import (WorldConfig, WorldError, read_dataset, world_config_from_dict,
                    write_dataset)

_KNOWN_ERRORS = (CodecError, EvaluationError, MetricError, PipelineError,
                 SamplerError, SchemaError, TrainingError, WorldError,
                 blobs.BlobError, FileNotFoundError, KeyError, ValueError)


def stage_seed(root: int, stage: str) -> np.random.SeedSequence:
    """Per-stage seed stream: stage name hashed into the root seed."""
    return np.random.SeedSequence((root, zlib.crc32(stage.encode())))


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _write_run_manifest(out: Path, command: str, config: dict, seed: int,
                        schema_hash: str | None, input_hashes: dict,
                        outputs: list) -> None:
    manifest = {
        "kind": "run",
        "command": command,
        "config": config,
        "config_hash": blobs.hash_json(config),
        "schema_hash": schema_hash,
        "seed": seed,
        "input_hashes": input_hashes,
        "outputs": [str(p) for p in outputs],
        "timestamp": time_mod.strftime("%Y-%m-%dT%H:%M:%SZ", time_mod.gmtime()),
        "version": __version__,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _fail(exc: Exception) -> None:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)})
                     + "\n")
    sys.exit(1)


def _manifest_hash(path: Path) -> str:
    return blobs.hash_json(blobs.read_manifest(path / "manifest.json"))


@click.group()
def main() -> None:
    """Multimodal latent diffusion pipeline."""


def _common(fn):
    fn = click.option("--config", "config_path", default=None,
                      help="JSON config file.")(fn)
    fn = click.option("--seed", default=0, show_default=True, type=int)(fn)
    fn = click.option("--threads", default=0, show_default=True, type=int,
                      help="Cap torch worker threads (0 = leave unchanged).")(fn)
    fn = click.option("--out", "out_path", required=True,
                      help="Output directory.")(fn)
    return fn


def _set_threads(threads: int) -> None:
    if threads > 0:
        torch.set_num_threads(threads)


@main.command()
@_common
@click.option("--n", default=None, type=int, help="Override tile count.")
def dataset(config_path, seed, threads, out_path, n):
    """Generate a synthetic world dataset."""
    try:
        _set_threads(threads)
        cfg_dict = _load_config(config_path)
        count = n if n is not None else cfg_dict.pop("n", 256)
        world_seed = int(stage_seed(seed, "dataset").generate_state(1)[0])
        world = world_config_from_dict({**asdict(WorldConfig()), **cfg_dict,
                                        "seed": world_seed})
        out = Path(out_path)
        manifest = write_dataset(world, count, out)
        _write_run_manifest(out, "dataset", {**cfg_dict, "n": count}, seed,
                            manifest["schema_hash"], {}, [out])
    except _KNOWN_ERRORS as exc:
        _fail(exc)


@main.command("train-codec")
@_common
@click.option("--dataset", "dataset_path", required=True)
@click.option("--band-group", "band_group", required=True)
def cmd_train_codec(config_path, seed, threads, out_path, dataset_path, band_group):
    """Train a convolutional VAE codec for one band group."""
    try:
        _set_threads(threads)
        cfg_dict = _load_config(config_path)
        world, records, ds_manifest = read_dataset(dataset_path, split="train")
        schema = world.schema()
        group = schema.unit(band_group)
        if band_group in {m.name for m in schema.modalities if m.kind == "categorical_image"}:
            palette = hadamard_palette(world.classes, world.palette_dim)
            from .codec import class_to_continuous
            images = np.stack([class_to_continuous(r.maps[band_group], palette)
                               for r in records])
        else:
            images = np.stack([r.images[band_group] for r in records])
        codec_seed = int(stage_seed(seed, "train-codec").generate_state(1)[0]) % 2**31
        ccfg = CodecConfig(
            channels=images.shape[1],
            downsample_factor=cfg_dict.get("downsample_factor",
                                           world.downsample_factor),
            latent_channels=cfg_dict.get("latent_channels", group.channels),
            hidden=tuple(cfg_dict.get("hidden", (32, 64, 64))),
            kl_weight=cfg_dict.get("kl_weight", 1e-6),
            seed=codec_seed,
        )
        opts = CodecTrainOpts(
            steps=cfg_dict.get("steps", 2000),
            batch=cfg_dict.get("batch", 16),
            lr=cfg_dict.get("lr", 1e-3),
            seed=codec_seed,
        )
        codec, history = train_codec(codec_init(ccfg), images, opts)
        out = Path(out_path)
        out.mkdir(parents=True, exist_ok=True)
        refs = {}
        for pname, tensor in codec.net.state_dict().items():
            fname = "param__" + pname.replace(".", "_") + ".bin"
            refs[pname] = {"file": fname,
                           "sha256": blobs.write_blob(out / fname, tensor.numpy())}
        blobs.write_manifest(out / "manifest.json", {
            "kind": "codec",
            "band_group": band_group,
            "spec": codec.spec(),
            "holdout_mse": history["holdout_mse"],
            "holdout_var": history["holdout_var"],
            "blobs": refs,
        })
        _write_run_manifest(out, "train-codec", cfg_dict, seed, schema.hash(),
                            {"dataset": _manifest_hash(Path(dataset_path))}, [out])
    except _KNOWN_ERRORS as exc:
        _fail(exc)


def _load_codec_dir(path: Path) -> tuple[str, ConvCodec]:
    manifest = blobs.read_manifest(path / "manifest.json")
    if manifest.get("kind") != "codec":
        raise CodecError(f"{path} is not a codec directory")
    spec = dict(manifest["spec"])
    spec.pop("kind")
    codec = ConvCodec(CodecConfig(**{**spec, "hidden": tuple(spec["hidden"])}))
    state = {pname: torch.as_tensor(blobs.read_blob(path / ref["file"], ref["sha256"]))
             for pname, ref in manifest["blobs"].items()}
    codec.net.load_state_dict(state)
    return manifest["band_group"], codec


@main.command()
@_common
@click.option("--dataset", "dataset_path", required=True)
@click.option("--codec", "codec_paths", multiple=True,
              help="Codec directory from train-codec; repeatable. "
                   "Band groups without one use the identity codec.")
def preencode(config_path, seed, threads, out_path, dataset_path, codec_paths):
    """Encode a dataset into standardized per-unit latents."""
    try:
        _set_threads(threads)
        cfg_dict = _load_config(config_path)
        world, records, ds_manifest = read_dataset(dataset_path)
        schema = world.schema()
        codecs = identity_codecs(schema)
        input_hashes = {"dataset": _manifest_hash(Path(dataset_path))}
        for cp in codec_paths:
            gname, codec = _load_codec_dir(Path(cp))
            codecs[gname] = codec
            input_hashes[f"codec/{gname}"] = _manifest_hash(Path(cp))
        palette = hadamard_palette(world.classes, world.palette_dim)
        splits = [t["split"] for t in ds_manifest["tiles"]]
        store = preencode_dataset(schema, codecs, palette, records, splits,
                                  (world.year_min, world.year_max))
        out = Path(out_path)
        save_latent_store(store, out)
        _write_run_manifest(out, "preencode", cfg_dict, seed, schema.hash(),
                            input_hashes, [out])
    except _KNOWN_ERRORS as exc:
        _fail(exc)


@main.command()
@_common
@click.option("--store", "store_path", required=True,
              help="Latent store from preencode.")
@click.option("--steps", default=None, type=int, help="Override training steps.")
@click.option("--codec", "codec_paths", multiple=True,
              help="Codec directories to bundle into the checkpoint.")
def train(config_path, seed, threads, out_path, store_path, steps, codec_paths):
    """Train the joint denoiser on a latent store."""
    try:
        _set_threads(threads)
        cfg_dict = _load_config(config_path)
        store = load_latent_store(store_path)
        schema = build_schema(store.schema_config)
        bcfg = BackboneConfig(**{**cfg_dict.get("backbone", {}),
                                 "seed": seed})
        train_seed = int(stage_seed(seed, "train").generate_state(1)[0]) % 2**31
        tcfg_fields = dict(cfg_dict.get("train", {}))
        if steps is not None:
            tcfg_fields["steps"] = steps
        tcfg = TrainConfig(**{**tcfg_fields, "seed": train_seed})
        codecs = identity_codecs(schema)
        input_hashes = {"store": _manifest_hash(Path(store_path))}
        for cp in codec_paths:
            gname, codec = _load_codec_dir(Path(cp))
            codecs[gname] = codec
            input_hashes[f"codec/{gname}"] = _manifest_hash(Path(cp))
        gm, trace = train_diffusion(schema, store, bcfg, tcfg,
                                    cfg_dict.get("schedule"), codecs=codecs)
        out = Path(out_path)
        save_checkpoint(gm, out)
        (out / "loss_trace.json").write_text(json.dumps(trace) + "\n")
        _write_run_manifest(out, "train", cfg_dict, seed, schema.hash(),
                            input_hashes, [out])
    except _KNOWN_ERRORS as exc:
        _fail(exc)


@main.command()
@_common
@click.option("--checkpoint", "ckpt_path", required=True)
@click.option("--dataset", "dataset_path", default=None,
              help="Dataset supplying conditioning tiles.")
@click.option("--n", default=4, show_default=True, type=int,
              help="Chains per tile.")
def sample(config_path, seed, threads, out_path, ckpt_path, dataset_path, n):
    """Sample joint or conditional ensembles from a checkpoint.

    Config keys: "condition" (unit names pinned to a tile's latents,
    default none), "generate" (optional explicit list; must not overlap
    "condition"), "tiles" (dataset tile indices, default [0]).
    """
    try:
        _set_threads(threads)
        cfg_dict = _load_config(config_path)
        cond_units = list(cfg_dict.get("condition", []))
        explicit_gen = cfg_dict.get("generate")
        if explicit_gen is not None:
            overlap = set(cond_units) & set(explicit_gen)
            if overlap:
                raise SamplerError(f"units in both C and G: {sorted(overlap)}")
        gm = load_checkpoint(ckpt_path)
        unit_names = [u.name for u in gm.schema.units]
        unknown = set(cond_units) - set(unit_names)
        if unknown:
            raise SamplerError(f"unknown conditioning units: {sorted(unknown)}")
        input_hashes = {"checkpoint": _manifest_hash(Path(ckpt_path))}
        tile_ids = list(cfg_dict.get("tiles", [0])) if cond_units else [0]
        if cond_units:
            if dataset_path is None:
                raise SamplerError("conditioning requires --dataset")
            world, records, _ = read_dataset(
                dataset_path, expect_schema_hash=gm.schema.hash())
            input_hashes["dataset"] = _manifest_hash(Path(dataset_path))
        out = Path(out_path)
        base = int(stage_seed(seed, "sample").generate_state(1)[0]) % 2**31
        for t_i, tile_id in enumerate(tile_ids):
            if cond_units:
                latents = tile_latents(gm, records[tile_id])
                spec = ConditioningSpec(
                    {name: latents[name] for name in cond_units},
                    tuple(u for u in unit_names if u not in cond_units))
            else:
                spec = ConditioningSpec({}, tuple(unit_names))
            spec.validate(gm)
            ens = sample_ensemble(gm, spec, n, base + 1000 * t_i)
            write_ensemble(ens, out, tile_id,
                           checkpoint_hash=input_hashes["checkpoint"])
        _write_run_manifest(out, "sample", cfg_dict, seed, gm.schema.hash(),
                            input_hashes, [out])
    except _KNOWN_ERRORS as exc:
        _fail(exc)


def _tile_level_rows(gm, world, records, ens_root: Path) -> list:
    rows = []
    for sub in sorted(ens_root.glob("tile*")):
        tile_id = int(sub.name[4:])
        rec = records[tile_id]
        ens = read_ensemble(gm, ens_root, tile_id)
        for si, s in enumerate(ens.samples):
            dec = s["decoded"]
            row = {"tile": tile_id, "sample": si}
            for gname, img in dec["images"].items():
                gt = rec.images[gname]
                row[f"{gname}_mae"] = mae(img, gt)
                row[f"{gname}_rmse"] = rmse(img, gt)
                rng_span = float(gt.max() - gt.min()) or 1.0
                row[f"{gname}_psnr"] = psnr(img, gt, rng_span)
                if min(gt.shape[-2:]) >= 11:
                    row[f"{gname}_ssim"] = ssim(img, gt, rng_span)
            for mname, cmap in dec["maps"].items():
                cm = categorical_metrics(cmap, rec.maps[mname], world.classes,
                                         scores=dec["scores"][mname])
                for k, v in cm.items():
                    row[f"{mname}_{k}"] = v
            if "lat" in dec:
                row["latlon_km"] = geodesic_km((dec["lat"], dec["lon"]),
                                               (rec.lat, rec.lon))
            rows.append(row)
    return rows


@main.command("eval")
@_common
@click.option("--ensemble", "ens_path", required=True)
@click.option("--dataset", "dataset_path", required=True)
@click.option("--checkpoint", "ckpt_path", required=True)
@click.option("--protocol", default="tile-level", show_default=True,
              type=click.Choice(["tile-level", "latlon"]))
def cmd_eval(config_path, seed, threads, out_path, ens_path, dataset_path,
             ckpt_path, protocol):
    """Evaluate a stored ensemble against ground truth."""
    try:
        _set_threads(threads)
        cfg_dict = _load_config(config_path)
        gm = load_checkpoint(ckpt_path)
        world, records, _ = read_dataset(dataset_path,
                                         expect_schema_hash=gm.schema.hash())
        ens_root = Path(ens_path)
        input_hashes = {"checkpoint": _manifest_hash(Path(ckpt_path)),
                        "dataset": _manifest_hash(Path(dataset_path))}
        rows = _tile_level_rows(gm, world, records, ens_root)
        if protocol == "latlon":
            rows = [r for r in rows if "latlon_km" in r]
        summary = {"protocol": protocol, "rows": len(rows)}
        first_manifest = None
        subs = sorted(ens_root.glob("tile*"))
        if subs:
            first_manifest = blobs.read_manifest(subs[0] / "manifest.json")
        out = Path(out_path)
        write_report(out, rows, summary, ensemble_manifest=first_manifest)
        _write_run_manifest(out, "eval", cfg_dict, seed, gm.schema.hash(),
                            input_hashes, [out])
    except _KNOWN_ERRORS as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
