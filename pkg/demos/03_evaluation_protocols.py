"""Evaluation protocols: narrowing ladders, peak capability, ablations.

Works with ensembles of generations per tile rather than single samples,
because the world is one-to-many: a good model should concentrate around the
conditional distribution, not hit the realized pixels exactly.

Uses a quickly trained small model, so the numbers here illustrate the
protocols rather than showcase sample quality.

Run: python3 demos/03_evaluation_protocols.py
"""

import numpy as np

from tilegen.backbone import BackboneConfig
from tilegen.codec import hadamard_palette, identity_codecs, preencode_dataset
from tilegen.evaluation import (LadderSpec, distribution_narrowing,
                                leave_one_out, peak_capability)
from tilegen.metrics import mae
from tilegen.pipeline import tile_latents
from tilegen.presets import mini_world
from tilegen.sampler import conditioning_from_tile, sample_ensemble
from tilegen.training import TrainConfig, train_diffusion
from tilegen.world import generate_tile, split_of, tile_rng

cfg = mini_world(seed=0)
schema = cfg.schema()
n = 200
records = [generate_tile(cfg, tile_rng(cfg, i)) for i in range(n)]
splits = [split_of(i, n) for i in range(n)]
store = preencode_dataset(schema, identity_codecs(schema),
                          hadamard_palette(cfg.classes, cfg.palette_dim),
                          records, splits, (cfg.year_min, cfg.year_max))
gm, _ = train_diffusion(
    schema, store,
    BackboneConfig(layers=4, dim=64, heads=4, seed=0),
    TrainConfig(steps=1500, batch=16, warmup=100, ema_decay=0.99, seed=0),
    {"T": 100, "beta_start": 8.5e-3, "beta_end": 0.12, "kind": "scaled_linear"},
)
test_idx = [i for i, s in enumerate(splits) if s == "test"]

# ---------------------------------------------------------------------------
# Distribution narrowing. As the conditioning set grows along a nested
# ladder, the spread of generated optical bands should shrink toward the
# oracle conditional spread.

i = test_idx[0]
tl = tile_latents(gm, records[i])
ladder = LadderSpec([[], ["dem"], ["dem", "lulc"], ["dem", "lulc", "time"]])
res = distribution_narrowing(gm, tl, records[i], cfg, ladder, n=8, base_seed=0)
print("pooled optical std per rung (-> oracle):")
for rung, row in zip(ladder.rungs, res["rungs"]):
    spread = np.mean([b["spread"] for b in row["bands"]])
    w1 = np.mean([b["wasserstein_to_oracle"] for b in row["bands"]])
    print(f"  C={str(rung):32s} std={spread:.3f} W1-to-oracle={w1:.3f}")
oracle_spread = np.mean([b["spread"] for b in res["oracle"]])
print(f"  oracle conditional std:               {oracle_spread:.3f}")

# ---------------------------------------------------------------------------
# Peak capability. With n generations per tile, best-of-n error measures what
# the model can do, mean-of-n what it typically does.

per_tile = []
for i in test_idx[:8]:
    tl = tile_latents(gm, records[i])
    spec = conditioning_from_tile(gm, tl, ["dem", "lulc"])
    ens = sample_ensemble(gm, spec, 6, base_seed=100 + i)
    per_tile.append([mae(s["decoded"]["images"]["optical_hi"],
                         records[i].images["optical_hi"]) for s in ens.samples])
agg = peak_capability(per_tile, "min")
print(f"\noptical MAE over 8 tiles x 6 chains: "
      f"mean={agg['mean']:.3f} best-of-6={agg['best_mean']:.3f}")

# ---------------------------------------------------------------------------
# Leave-one-out ablation. Drop one conditioning modality at a time and watch
# which absence hurts the target most; that exposes what the model actually
# uses. For optical the land-cover map should matter more than the date.

tiles = [(tile_latents(gm, records[i]), records[i]) for i in test_idx[:6]]
rows = leave_one_out(gm, tiles, "optical", n=2, base_seed=0,
                     removable=["lulc", "dem", "time", "latlon"])
print("\nleave-one-out, target=optical (best-of-2 MAE, higher = more needed):")
for row in rows:
    print(f"  without {row['removed']:7s} {row['best']:.3f}")
