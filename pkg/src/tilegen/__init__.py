"""Unified multimodal latent diffusion over synthetic Earth-observation tiles.

The package couples a procedural multimodal world (optical bands at two
resolutions, SAR, DEM, land cover, location, time) with a single diffusion
transformer in which every modality unit carries its own diffusion timestep.
Holding a unit clean at timestep zero while others denoise turns the one
trained model into an any-to-any conditional generator.
"""

from .backbone import BackboneConfig, Denoiser, patchify, unpatchify
from .codec import (ClassPalette, CodecConfig, ConvCodec, IdentityCodec,
                    LatentStore, class_to_continuous, codec_init,
                    continuous_to_class, hadamard_palette, identity_codecs,
                    load_latent_store, preencode_dataset, save_latent_store,
                    train_codec)
from .diffusion import (NoiseSchedule, build_schedule, ddpm_step, ema_init,
                        ema_update, joint_loss, q_sample, sample_timesteps)
from .evaluation import (LadderSpec, distribution_narrowing, latlon_dispersion,
                         leave_one_out, peak_capability, spectral_profile)
from .geotime import (DateStamp, GeoVec, TimeVec, decode_latlon,
                      decode_timestamp, encode_latlon, encode_timestamp,
                      midpoint_timestamp, snap_to_grid)
from .metrics import (categorical_metrics, geodesic_km, mae, psnr, rmse, ssim,
                      wasserstein_1d)
from .pipeline import GenerationModel, load_checkpoint, save_checkpoint, tile_latents
from .sampler import (ConditioningSpec, band_infill, conditioning_from_tile,
                      read_ensemble, sample_conditional, sample_ensemble,
                      sample_joint, write_ensemble)
from .schema import Schema, build_schema, token_layout, validate_sample
from .training import TrainConfig, train_diffusion
from .world import (TileRecord, WorldConfig, generate_tile,
                    oracle_conditional_stats, read_dataset, write_dataset)

__version__ = "0.1.0"
