"""Evaluation protocols over generation ensembles.

Peak-capability (best-of-n oracle) selection, leave-one-out conditioning
ablations, distribution-narrowing analysis along a conditioning ladder,
per-class spectral profiles, and lat-lon dispersion. Reports are emitted as
CSV rows plus a JSON summary carrying the ensemble manifest hash and the
analysis settings (sample counts, KDE bandwidth rule, mIoU class handling).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import gaussian_kde

from . import world as world_mod
from .blobs import hash_json
from .metrics import MetricError, geodesic_km, geo_stats, mae, wasserstein_1d
from .sampler import (ConditioningSpec, conditioning_from_tile, sample_ensemble)

SCORE_METRICS = {"ssim", "psnr", "top1", "top3", "miou", "fw_iou", "mean_f1"}


class EvaluationError(Exception):
    pass


@dataclass
class LadderSpec:
    """Ordered conditioning sets; each rung's C must contain the previous."""

    rungs: list  # list of lists of unit names

    def __post_init__(self):
        prev: set = set()
        for rung in self.rungs:
            cur = set(rung)
            if not prev <= cur:
                raise EvaluationError(f"ladder rung {sorted(cur)} does not contain "
                                      f"{sorted(prev)}")
            prev = cur


def peak_capability(per_tile_values, direction: str) -> dict:
    """Best value per tile (min for errors, max for scores) plus aggregates."""
    if direction not in ("min", "max"):
        raise EvaluationError(f"direction must be 'min' or 'max', got {direction!r}")
    rows = [np.asarray(v, dtype=np.float64) for v in per_tile_values]
    if not rows or any(r.size == 0 for r in rows):
        raise EvaluationError("every tile needs at least one sample")
    best = np.array([r.min() if direction == "min" else r.max() for r in rows])
    flat = np.concatenate(rows)
    return {
        "best_per_tile": best,
        "best_mean": float(best.mean()),
        "mean": float(flat.mean()),
        "std": float(flat.std()),
    }


def _target_units(gm, target_modality: str):
    mod = gm.schema.modality(target_modality)
    if mod.kind == "scalar_vector":
        return [mod.name]
    return [g.name for g in mod.band_groups]


def _tile_target_error(gm, sample: dict, record, target_modality: str) -> float:
    """Per-sample target error: image MAE, map error rate, or geodesic km."""
    mod = gm.schema.modality(target_modality)
    dec = sample["decoded"]
    if mod.kind == "continuous_image":
        return float(np.mean([mae(dec["images"][g.name], record.images[g.name])
                              for g in mod.band_groups]))
    if mod.kind == "categorical_image":
        return float((dec["maps"][mod.name] != record.maps[mod.name]).mean())
    if target_modality == "latlon":
        return geodesic_km((dec["lat"], dec["lon"]), (record.lat, record.lon))
    raise EvaluationError(f"no target error defined for {target_modality}")


def leave_one_out(gm, tiles, target_modality: str, n: int, base_seed: int,
                  removable: list | None = None) -> list:
    """Conditioning ablation table for one target modality.

    ``tiles`` is a list of (tile_latents, record) pairs. For each removable
    input modality r, conditions on all units except the target's and r's,
    generates the target n times per tile, and reports mean, std, and
    best-of-n of the per-tile target error.
    """
    target_units = set(_target_units(gm, target_modality))
    if removable is None:
        removable = [m.name for m in gm.schema.modalities if m.name != target_modality]
    rows = []
    for r_i, removed in enumerate(removable):
        removed_units = set(_target_units(gm, removed))
        per_tile = []
        for t_i, (tile_latents, record) in enumerate(tiles):
            cond_units = [u.name for u in gm.schema.units
                          if u.name not in target_units | removed_units]
            spec = ConditioningSpec(
                {name: tile_latents[name] for name in cond_units},
                tuple(u.name for u in gm.schema.units if u.name not in cond_units),
            )
            seed = base_seed + 1000 * r_i + 10 * t_i
            ens = sample_ensemble(gm, spec, n, seed)
            per_tile.append([_tile_target_error(gm, s, record, target_modality)
                             for s in ens.samples])
        agg = peak_capability(per_tile, "min")
        rows.append({
            "target": target_modality,
            "removed": removed,
            "n": n,
            "mean": agg["mean"],
            "std": agg["std"],
            "best": agg["best_mean"],
            "best_per_tile": agg["best_per_tile"].tolist(),
        })
    return rows


def oracle_band_distribution(world_cfg, record, n_draws: int, seed: int) -> np.ndarray:
    """(B, n_draws * H * W) pooled oracle redraws of the hi-res optical bands."""
    rng = np.random.default_rng(seed)
    draws = [world_mod.oracle_sample_optical(world_cfg, record.maps["lulc"],
                                             record.time, rng)
             for _ in range(n_draws)]
    stacked = np.stack(draws)  # (n, B, H, W)
    return stacked.transpose(1, 0, 2, 3).reshape(stacked.shape[1], -1)


def distribution_narrowing(gm, tile_latents: dict, record, world_cfg,
                           ladder: LadderSpec, n: int = 25, base_seed: int = 0,
                           band_group: str = "optical_hi", bins: int = 64,
                           oracle_draws: int = 25) -> dict:
    """Spread/divergence of generated optical bands along a conditioning ladder.

    Per rung and band: pooled sample values over n chains, a histogram over
    the oracle range, a Silverman-bandwidth Gaussian KDE, the pooled standard
    deviation, and the 1-D Wasserstein distance to the oracle conditional
    distribution (nuisance redraws with fixed lulc and time).
    """
    oracle = oracle_band_distribution(world_cfg, record, oracle_draws,
                                      base_seed + 90001)
    n_bands = oracle.shape[0]
    lo = oracle.min(axis=1)
    hi = oracle.max(axis=1)
    rungs_out = []
    for r_i, rung in enumerate(ladder.rungs):
        spec = conditioning_from_tile(gm, tile_latents, list(rung))
        ens = sample_ensemble(gm, spec, n, base_seed + 100 * r_i)
        pooled = np.stack(
            [s["decoded"]["images"][band_group] for s in ens.samples]
        ).transpose(1, 0, 2, 3).reshape(n_bands, -1)
        bands = []
        for b in range(n_bands):
            hist, edges = np.histogram(pooled[b], bins=bins, range=(lo[b], hi[b]))
            kde = gaussian_kde(pooled[b], bw_method="silverman")
            bands.append({
                "hist": hist.tolist(),
                "bin_edges": edges.tolist(),
                "kde_bandwidth": float(kde.factor * pooled[b].std(ddof=1)),
                "spread": float(pooled[b].std()),
                "wasserstein_to_oracle": wasserstein_1d(pooled[b], oracle[b]),
            })
        rungs_out.append({"condition": sorted(rung), "n": n, "bands": bands})
    oracle_bands = [{"spread": float(oracle[b].std())} for b in range(n_bands)]
    return {"rungs": rungs_out, "oracle": oracle_bands,
            "kde_rule": "silverman", "bins": bins}


def spectral_profile(images: list, lulc: np.ndarray, pixels_per_class: int,
                     rng: np.random.Generator, classes: int) -> dict:
    """Per-class mean band vectors over randomly sampled pixels.

    ``images`` is a list of (B, H, W) arrays (e.g. ground truth and several
    generations); all are sampled at the same pixel coordinates. Classes
    absent from the tile are reported in ``skipped``.
    """
    profiles: dict = {}
    skipped = []
    for k in range(classes):
        ys, xs = np.nonzero(lulc == k)
        if ys.size == 0:
            skipped.append(k)
            continue
        take = min(pixels_per_class, ys.size)
        idx = rng.choice(ys.size, size=take, replace=False)
        curves = [img[:, ys[idx], xs[idx]].mean(axis=1) for img in images]
        profiles[k] = np.stack(curves)  # (len(images), B)
    return {"profiles": profiles, "skipped": skipped}


def latlon_dispersion(geovecs: list, gt: tuple) -> dict:
    """Geodesic errors of predicted locations plus pairwise spread."""
    from .geotime import decode_latlon

    if not geovecs:
        raise EvaluationError("need at least one prediction")
    points = []
    for v in geovecs:
        points.append(decode_latlon(v))
    errors = np.array([geodesic_km(p, gt) for p in points])
    pairwise = []
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            pairwise.append(geodesic_km(points[i], points[j]))
    spread = {"mean_pairwise_km": float(np.mean(pairwise)) if pairwise else 0.0,
              "max_pairwise_km": float(np.max(pairwise)) if pairwise else 0.0}
    return {"errors_km": errors, "stats": geo_stats(errors), "spread": spread,
            "points": points}


# ---------------------------------------------------------------------------
# Report output


def write_report(path: str | Path, rows: list, summary: dict,
                 ensemble_manifest: dict | None = None) -> None:
    """CSV per-tile rows plus a JSON summary embedding the manifest hash."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if rows:
        fields = sorted({k for row in rows for k in row})
        with open(path / "report.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)
    summary = dict(summary)
    summary["miou_class_handling"] = "present in GT or prediction"
    if ensemble_manifest is not None:
        summary["ensemble_manifest_hash"] = hash_json(ensemble_manifest)
    (path / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True,
                                                  default=str) + "\n")
