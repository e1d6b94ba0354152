"""Declarative description of modalities, band groups, and the token layout.

A schema lists the modalities of one tile (image band groups, categorical
maps, scalar vectors) together with their native grids and latent grids. For
diffusion purposes every band group is its own unit with its own timestep, so
the schema also exposes a flat list of "units" and the layout of the unified
token sequence: for each unit, one timestep token followed by its content
tokens, in declaration order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .blobs import hash_json

PATCH = 2

CONTINUOUS_IMAGE = "continuous_image"
CATEGORICAL_IMAGE = "categorical_image"
SCALAR_VECTOR = "scalar_vector"
_KINDS = (CONTINUOUS_IMAGE, CATEGORICAL_IMAGE, SCALAR_VECTOR)


class SchemaError(Exception):
    """Raised for invalid schema configurations or nonconforming samples."""


@dataclass(frozen=True)
class BandGroupSpec:
    name: str
    channels: int
    grid: int
    resolution_tag: str
    latent_grid: int
    latent_channels: int


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    kind: str
    band_groups: tuple[BandGroupSpec, ...] = ()
    classes: int | None = None
    vector_len: int | None = None


@dataclass(frozen=True)
class UnitSpec:
    """One diffusion unit: a band group or a scalar-vector modality."""

    name: str
    modality: str
    kind: str  # "image" or "scalar"
    channels: int  # latent channels (image) or vector length (scalar)
    latent_grid: int  # 0 for scalar units
    resolution_tag: str = ""

    @property
    def tokens(self) -> int:
        if self.kind == "scalar":
            return 1
        return (self.latent_grid // PATCH) ** 2

    @property
    def latent_shape(self) -> tuple[int, ...]:
        if self.kind == "scalar":
            return (self.channels,)
        return (self.channels, self.latent_grid, self.latent_grid)


@dataclass(frozen=True)
class Schema:
    modalities: tuple[ModalitySpec, ...]
    patch: int = PATCH
    downsample_factor: int = 4

    @property
    def units(self) -> tuple[UnitSpec, ...]:
        out = []
        for m in self.modalities:
            if m.kind == SCALAR_VECTOR:
                out.append(UnitSpec(m.name, m.name, "scalar", m.vector_len, 0))
            else:
                for g in m.band_groups:
                    out.append(
                        UnitSpec(g.name, m.name, "image", g.latent_channels,
                                 g.latent_grid, g.resolution_tag)
                    )
        return tuple(out)

    def unit(self, name: str) -> UnitSpec:
        for u in self.units:
            if u.name == name:
                return u
        raise SchemaError(f"unknown unit: {name}")

    def modality(self, name: str) -> ModalitySpec:
        for m in self.modalities:
            if m.name == name:
                return m
        raise SchemaError(f"unknown modality: {name}")

    def to_config(self) -> dict:
        mods = []
        for m in self.modalities:
            entry: dict = {"name": m.name, "kind": m.kind}
            if m.kind == SCALAR_VECTOR:
                entry["vector_len"] = m.vector_len
            else:
                if m.kind == CATEGORICAL_IMAGE:
                    entry["classes"] = m.classes
                entry["band_groups"] = [
                    {
                        "name": g.name,
                        "channels": g.channels,
                        "grid": g.grid,
                        "resolution_tag": g.resolution_tag,
                        "latent_channels": g.latent_channels,
                    }
                    for g in m.band_groups
                ]
            mods.append(entry)
        return {
            "patch": self.patch,
            "downsample_factor": self.downsample_factor,
            "modalities": mods,
        }

    def hash(self) -> str:
        return hash_json(self.to_config())


@dataclass(frozen=True)
class TokenLayout:
    """Slot assignment of the unified sequence.

    ``ranges`` maps unit name to (offset, length) of its content tokens;
    ``timestep_slots`` maps unit name to the index of its timestep token.
    """

    ranges: dict[str, tuple[int, int]] = field(hash=False)
    timestep_slots: dict[str, int] = field(hash=False)
    total: int = 0


def build_schema(config: dict) -> Schema:
    """Validate a declarative config and return a Schema.

    Ordering is declaration order and deterministic. Raises SchemaError for
    divisibility violations, duplicate names, or missing class counts.
    """
    patch = int(config.get("patch", PATCH))
    down = int(config.get("downsample_factor", 4))
    if down < 1:
        raise SchemaError(f"downsample_factor must be positive, got {down}")
    raw_mods = config.get("modalities", [])
    if len(raw_mods) < 2:
        raise SchemaError("config must list at least 2 modalities")

    mods = []
    seen_mod = set()
    seen_group = set()
    n_image = 0
    for rm in raw_mods:
        name = rm["name"]
        kind = rm["kind"]
        if kind not in _KINDS:
            raise SchemaError(f"modality {name}: unknown kind {kind!r}")
        if name in seen_mod:
            raise SchemaError(f"duplicate modality name: {name}")
        seen_mod.add(name)
        if kind == SCALAR_VECTOR:
            vlen = int(rm.get("vector_len", 0))
            if vlen < 1:
                raise SchemaError(f"modality {name}: vector_len must be >= 1")
            mods.append(ModalitySpec(name, kind, (), None, vlen))
            continue
        classes = None
        if kind == CATEGORICAL_IMAGE:
            classes = rm.get("classes")
            if classes is None or int(classes) < 2:
                raise SchemaError(f"modality {name}: categorical requires classes >= 2")
            classes = int(classes)
        groups = []
        for rg in rm.get("band_groups", []):
            gname = rg["name"]
            if gname in seen_group:
                raise SchemaError(f"duplicate band-group name: {gname}")
            seen_group.add(gname)
            grid = int(rg["grid"])
            channels = int(rg["channels"])
            if grid < 1 or channels < 1:
                raise SchemaError(f"group {gname}: grid and channels must be positive")
            if grid % down != 0:
                raise SchemaError(f"group {gname}: grid {grid} not divisible by downsample {down}")
            latent_grid = grid // down
            if latent_grid % patch != 0:
                raise SchemaError(
                    f"group {gname}: latent grid {latent_grid} not divisible by patch {patch}"
                )
            groups.append(
                BandGroupSpec(gname, channels, grid, rg.get("resolution_tag", ""),
                              latent_grid, int(rg.get("latent_channels", 8)))
            )
        if not groups:
            raise SchemaError(f"modality {name}: image modality needs band groups")
        n_image += 1
        mods.append(ModalitySpec(name, kind, tuple(groups), classes, None))

    if n_image < 1:
        raise SchemaError("config must list at least 1 image modality")
    schema = Schema(tuple(mods), patch, down)
    # Unit names (band groups plus scalar modalities) must be unique, since
    # latents and token ranges are keyed by them.
    names = [u.name for u in schema.units]
    for name in names:
        if names.count(name) > 1:
            raise SchemaError(f"duplicate unit name: {name}")
    return schema


def token_layout(schema: Schema) -> TokenLayout:
    """Slot layout: per unit, one timestep token then its content tokens."""
    ranges: dict[str, tuple[int, int]] = {}
    tslots: dict[str, int] = {}
    cursor = 0
    for u in schema.units:
        tslots[u.name] = cursor
        cursor += 1
        ranges[u.name] = (cursor, u.tokens)
        cursor += u.tokens
    return TokenLayout(ranges, tslots, cursor)


def validate_sample(schema: Schema, sample) -> None:
    """Check a TileRecord-like sample against the schema.

    Expects ``sample.images`` keyed by band-group name with (C, H, W) arrays,
    ``sample.maps`` keyed by categorical modality name with (H, W) integer
    arrays in [0, K).
    """
    for m in schema.modalities:
        if m.kind == SCALAR_VECTOR:
            continue
        if m.kind == CATEGORICAL_IMAGE:
            if m.name not in sample.maps:
                raise SchemaError(f"missing categorical modality: {m.name}")
            arr = sample.maps[m.name]
            grid = m.band_groups[0].grid
            if arr.shape != (grid, grid):
                raise SchemaError(
                    f"modality {m.name}: shape {arr.shape} != {(grid, grid)}"
                )
            if arr.min() < 0 or arr.max() >= m.classes:
                raise SchemaError(
                    f"modality {m.name}: class values outside [0, {m.classes})"
                )
            continue
        for g in m.band_groups:
            if g.name not in sample.images:
                raise SchemaError(f"missing band group: {g.name}")
            arr = sample.images[g.name]
            want = (g.channels, g.grid, g.grid)
            if arr.shape != want:
                raise SchemaError(f"band group {g.name}: shape {arr.shape} != {want}")
