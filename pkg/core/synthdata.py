# core/synthdata.py
"""Deterministic synthetic worlds: cities of query/database sequences whose features encode the place they see."""
import logging
import math
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ConfigError
from .geo import DEFAULT_POSITIVE_RADIUS_M, GeoSample, GeoTag, Role, geo_distances, local_offset_to_tag, samples_to_arrays
from .manifest import Manifest
from .seeding import rng_for

logger = logging.getLogger(__name__)

_CELL_OFFSET = 1 << 20  # keeps negative grid indices non-negative for seeding


class WorldSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_cities: int = Field(8, ge=1)
    city_centers: tuple[tuple[float, float], ...] | None = None
    n_continents: int = Field(4, ge=1)
    continents: tuple[str, ...] | None = None
    sequences_per_city: int = Field(32, ge=1)
    images_per_sequence: int = Field(12, ge=1)
    place_grid_cell: float = Field(20.0, gt=0)
    city_extent: float = Field(2500.0, gt=0)
    step_length: float = Field(12.0, gt=0)
    gps_jitter: float = Field(4.0, ge=0)
    feature_dim: int = Field(32, ge=1)
    place_dim: int = Field(8, ge=1)
    place_signal_strength: float = Field(1.0, ge=0, le=1)
    noise_scale: float = Field(0.15, ge=0)
    condition_scale: float = Field(0.3, ge=0)
    place_noise_ratio: float = Field(0.25, ge=0)
    min_usable_fraction: float = Field(0.95, ge=0, le=1)
    seed: int = Field(0, ge=0)

    @field_validator("city_centers", mode="before")
    @classmethod
    def _parse_centers(cls, value):
        # INI form: "45.07:7.68; 48.85:2.35"
        if isinstance(value, str):
            pairs = [p.strip() for p in value.split(";") if p.strip()]
            return tuple(tuple(float(v) for v in p.split(":")) for p in pairs)
        return value

    @field_validator("continents", mode="before")
    @classmethod
    def _parse_continents(cls, value):
        if isinstance(value, str):
            return tuple(p.strip() for p in value.split(",") if p.strip())
        return value

    @model_validator(mode="after")
    def _check(self):
        if self.place_dim > self.feature_dim:
            raise ValueError(f"place_dim ({self.place_dim}) exceeds feature_dim ({self.feature_dim})")
        if self.city_centers is not None and len(self.city_centers) != self.n_cities:
            raise ValueError(f"{len(self.city_centers)} city centers given for {self.n_cities} cities")
        if self.continents is not None and len(self.continents) != self.n_cities:
            raise ValueError(f"{len(self.continents)} continents given for {self.n_cities} cities")
        for center in self.city_centers or ():
            if len(center) != 2 or not (-90 <= center[0] <= 90 and -180 <= center[1] <= 180):
                raise ValueError(f"invalid city center {center}")
        return self


@dataclass(frozen=True)
class WorldStats:
    n_samples: int
    n_cities: int
    n_sequences: int
    n_queries: int
    n_database: int
    usable_query_fraction: float

    def as_rows(self) -> list[tuple[str, object]]:
        return [("samples", self.n_samples), ("cities", self.n_cities), ("sequences", self.n_sequences),
                ("queries", self.n_queries), ("database images", self.n_database),
                ("queries with a 25 m positive", f"{100.0 * self.usable_query_fraction:.1f}%")]


def auto_city_centers(n_cities: int) -> list[tuple[float, float]]:
    """Cities spread over the globe on a golden-angle spiral, |lat| <= ~58 degrees."""
    centers = []
    for i in range(n_cities):
        z = 0.85 * (1.0 - 2.0 * (i + 0.5) / n_cities)
        lat = math.degrees(math.asin(z))
        lon = ((i * 137.50776405) % 360.0) - 180.0
        centers.append((round(lat, 6), round(lon, 6)))
    return centers


class _PlaceCodebook:
    """Lazily drawn unit place code per (city, grid cell)."""

    def __init__(self, spec: WorldSpec, city_index: int):
        self.spec = spec
        self.city_index = city_index
        self._codes = {}

    def code(self, east: float, north: float) -> np.ndarray:
        cell = (int(math.floor(east / self.spec.place_grid_cell)), int(math.floor(north / self.spec.place_grid_cell)))
        if cell not in self._codes:
            rng = rng_for(self.spec.seed, "place", self.city_index, cell[0] + _CELL_OFFSET, cell[1] + _CELL_OFFSET)
            v = rng.standard_normal(self.spec.place_dim)
            self._codes[cell] = v / np.linalg.norm(v)
        return self._codes[cell]


def _random_walk(spec: WorldSpec, rng: np.random.Generator) -> np.ndarray:
    half = spec.city_extent / 2.0
    pos = rng.uniform(-half, half, size=2)
    heading = rng.uniform(0.0, 2.0 * math.pi)
    points = []
    for _ in range(spec.images_per_sequence):
        points.append(pos.copy())
        heading += rng.normal(0.0, 0.3)
        nxt = pos + spec.step_length * np.array([math.cos(heading), math.sin(heading)])
        if np.any(np.abs(nxt) > half):
            heading += math.pi
            nxt = np.clip(pos + spec.step_length * np.array([math.cos(heading), math.sin(heading)]), -half, half)
        pos = nxt
    return np.array(points)


def generate_world(spec: WorldSpec) -> Manifest:
    """Builds the manifest. Database sequences walk random routes; each query sequence re-traverses the
    preceding database route under GPS jitter, possibly in reverse, with its own capture condition."""
    f, pd = spec.feature_dim, spec.place_dim
    basis, _ = np.linalg.qr(rng_for(spec.seed, "basis").standard_normal((f, f)))
    nuisance_weights = np.concatenate([np.full(pd, spec.place_noise_ratio), np.ones(f - pd)])
    centers = spec.city_centers or auto_city_centers(spec.n_cities)
    half = spec.city_extent / 2.0

    samples = []
    next_id = 0
    for c in range(spec.n_cities):
        city_id = f"city{c:02d}"
        continent_id = spec.continents[c] if spec.continents else f"continent{c % spec.n_continents:02d}"
        origin = GeoTag(*centers[c])
        codebook = _PlaceCodebook(spec, c)
        route = None
        for s in range(spec.sequences_per_city):
            seq_rng = rng_for(spec.seed, "sequence", c, s)
            role = Role.DATABASE if s % 2 == 0 else Role.QUERY
            if role == Role.DATABASE:
                route = _random_walk(spec, seq_rng)
                points = route
            else:
                points = route[::-1] if seq_rng.random() < 0.5 else route
                points = np.clip(points + seq_rng.normal(0.0, spec.gps_jitter, size=points.shape), -half, half)
            condition = spec.condition_scale * seq_rng.standard_normal(f)
            for east, north in points:
                latent = np.zeros(f)
                latent[:pd] = spec.place_signal_strength * codebook.code(east, north)
                latent += nuisance_weights * (condition + spec.noise_scale * seq_rng.standard_normal(f))
                samples.append(GeoSample(
                    id=next_id, tag=local_offset_to_tag(origin, float(east), float(north)), feat=basis @ latent,
                    seq_id=f"{city_id}_s{s:03d}", city_id=city_id, role=role, continent_id=continent_id,
                ))
                next_id += 1

    manifest = Manifest(samples, f)
    stats = world_stats(manifest)
    if stats.usable_query_fraction < spec.min_usable_fraction:
        raise ConfigError(f"generate_world: only {100 * stats.usable_query_fraction:.1f}% of queries have a "
                          f"database positive within {DEFAULT_POSITIVE_RADIUS_M} m "
                          f"(required {100 * spec.min_usable_fraction:.1f}%)")
    logger.info(f"generate_world: {stats.n_samples} samples in {stats.n_cities} cities, "
                f"{100 * stats.usable_query_fraction:.1f}% usable queries.")
    return manifest


def world_stats(manifest: Manifest, radius: float = DEFAULT_POSITIVE_RADIUS_M) -> WorldStats:
    queries = manifest.queries()
    database = manifest.database()
    usable = 0
    for city in manifest.city_ids:
        city_db = [s for s in database if s.city_id == city]
        if not city_db:
            continue
        _, lats, lons = samples_to_arrays(city_db)
        for q in (q for q in queries if q.city_id == city):
            if np.any(geo_distances(q.tag, lats, lons) < radius):
                usable += 1
    return WorldStats(
        n_samples=len(manifest), n_cities=len(manifest.city_ids), n_sequences=len(manifest.sequences),
        n_queries=len(queries), n_database=len(database),
        usable_query_fraction=usable / len(queries) if queries else 1.0,
    )
