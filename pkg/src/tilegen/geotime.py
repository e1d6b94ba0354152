"""Geolocation and acquisition-time encodings.

Latitude/longitude become 3D Cartesian unit vectors on the sphere (continuous
everywhere, no pole singularity); dates become (sin, cos) of the day-of-year
phase plus a normalized year scalar. Both are consumed as scalar-vector
modalities of the diffusion model, and decoded again for geodesic scoring.
"""

from __future__ import annotations

import calendar
import datetime
import math
from dataclasses import dataclass

DEG_PER_KM = 1.0 / 111.32  # equatorial degrees of latitude per km


class GeoTimeError(Exception):
    pass


@dataclass(frozen=True)
class GeoVec:
    x: float
    y: float
    z: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)


@dataclass(frozen=True)
class TimeVec:
    s: float  # sin of day-of-year phase
    c: float  # cos of day-of-year phase
    y: float  # normalized year in [0, 1]

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.s, self.c, self.y)


@dataclass(frozen=True, order=True)
class DateStamp:
    year: int
    day_of_year: int

    def __post_init__(self):
        n = days_in_year(self.year)
        if not 1 <= self.day_of_year <= n:
            raise GeoTimeError(
                f"day_of_year {self.day_of_year} outside [1, {n}] for year {self.year}"
            )

    def to_ordinal(self) -> int:
        return datetime.date(self.year, 1, 1).toordinal() + self.day_of_year - 1

    @staticmethod
    def from_ordinal(n: int) -> "DateStamp":
        d = datetime.date.fromordinal(n)
        return DateStamp(d.year, d.timetuple().tm_yday)


def days_in_year(year: int) -> int:
    return 366 if calendar.isleap(year) else 365


def encode_latlon(lat_deg: float, lon_deg: float) -> GeoVec:
    """Map (lat, lon) degrees to a unit vector on the sphere."""
    if not -90.0 <= lat_deg <= 90.0:
        raise GeoTimeError(f"latitude {lat_deg} outside [-90, 90]")
    if not -180.0 <= lon_deg <= 180.0:
        raise GeoTimeError(f"longitude {lon_deg} outside [-180, 180]")
    lat = math.radians(lat_deg)
    lon = math.radians(lon_deg)
    return GeoVec(math.cos(lat) * math.cos(lon), math.cos(lat) * math.sin(lon), math.sin(lat))


def decode_latlon(v: GeoVec) -> tuple[float, float]:
    """Inverse of encode_latlon; renormalizes, and uses lon = 0 at the poles."""
    norm = math.sqrt(v.x * v.x + v.y * v.y + v.z * v.z)
    if norm == 0.0:
        raise GeoTimeError("cannot decode zero vector")
    x, y, z = v.x / norm, v.y / norm, v.z / norm
    lat = math.degrees(math.asin(max(-1.0, min(1.0, z))))
    if abs(x) < 1e-15 and abs(y) < 1e-15:
        return (lat, 0.0)
    return (lat, math.degrees(math.atan2(y, x)))


def snap_to_grid(lat_deg: float, lon_deg: float, cell_km: float = 10.0) -> tuple[float, float]:
    """Snap to the center of the enclosing equal-angle cell of side ``cell_km``.

    Latitude cells have constant angular size; longitude cells are widened by
    1/cos(lat) at the cell row, so cells are roughly square in km.
    """
    if not -90.0 <= lat_deg <= 90.0 or not -180.0 <= lon_deg <= 180.0:
        raise GeoTimeError("coordinates out of range")
    dlat = cell_km * DEG_PER_KM
    n_rows = max(1, int(round(180.0 / dlat)))
    dlat = 180.0 / n_rows
    row = min(n_rows - 1, int((lat_deg + 90.0) / dlat))
    lat_c = -90.0 + (row + 0.5) * dlat
    cos_row = max(math.cos(math.radians(lat_c)), dlat / 360.0)
    dlon = min(360.0, dlat / cos_row)
    n_cols = max(1, int(round(360.0 / dlon)))
    dlon = 360.0 / n_cols
    col = min(n_cols - 1, int((lon_deg + 180.0) / dlon))
    lon_c = -180.0 + (col + 0.5) * dlon
    return (lat_c, lon_c)


def encode_timestamp(d: DateStamp, year_min: int, year_max: int) -> TimeVec:
    """Encode a date as (sin, cos) of day-of-year phase plus normalized year.

    The phase denominator is the actual number of days in that calendar year,
    so the encoding is exactly circular per year.
    """
    if year_min >= year_max:
        raise GeoTimeError(f"year_min {year_min} must be < year_max {year_max}")
    if not year_min <= d.year <= year_max:
        raise GeoTimeError(f"year {d.year} outside [{year_min}, {year_max}]")
    phase = 2.0 * math.pi * (d.day_of_year - 1) / days_in_year(d.year)
    return TimeVec(math.sin(phase), math.cos(phase), (d.year - year_min) / (year_max - year_min))


def decode_timestamp(v: TimeVec, year_min: int, year_max: int) -> DateStamp:
    """Nearest DateStamp for a (possibly noisy) TimeVec."""
    year = int(round(year_min + max(0.0, min(1.0, v.y)) * (year_max - year_min)))
    year = max(year_min, min(year_max, year))
    n = days_in_year(year)
    phase = math.atan2(v.s, v.c) % (2.0 * math.pi)
    day = int(round(phase * n / (2.0 * math.pi))) % n + 1
    return DateStamp(year, day)


def midpoint_timestamp(a: DateStamp, b: DateStamp) -> DateStamp:
    """Floor midpoint of two dates in whole days."""
    if a.to_ordinal() > b.to_ordinal():
        raise GeoTimeError("midpoint requires a <= b")
    return DateStamp.from_ordinal((a.to_ordinal() + b.to_ordinal()) // 2)
