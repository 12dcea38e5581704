# core/geo.py
"""Geographic primitives: GPS tags, haversine distance and GPS-label candidate sets."""
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import GeoInputError

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_POSITIVE_RADIUS_M = 25.0


class Role(str, enum.Enum):
    QUERY = "query"
    DATABASE = "database"


@dataclass(frozen=True)
class GeoTag:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise GeoInputError(f"GeoTag: non-finite coordinates ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise GeoInputError(f"GeoTag: latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise GeoInputError(f"GeoTag: longitude {self.lon} outside [-180, 180]")


@dataclass(frozen=True, eq=False)
class GeoSample:
    """One geo-tagged feature vector. `feat` is stored read-only."""
    id: int
    tag: GeoTag
    feat: np.ndarray
    seq_id: str
    city_id: str
    role: Role
    continent_id: str = ""

    def __post_init__(self):
        feat = np.array(self.feat, dtype=np.float64)
        if feat.ndim != 1:
            raise GeoInputError(f"GeoSample {self.id}: feature must be 1-D, got shape {feat.shape}")
        feat.setflags(write=False)
        object.__setattr__(self, "feat", feat)
        object.__setattr__(self, "role", Role(self.role))


@dataclass(frozen=True)
class CandidateSets:
    positives: tuple = field(default_factory=tuple)
    negatives: tuple = field(default_factory=tuple)


def _haversine(lat1, lon1, lat2, lon2):
    # abs() on the deltas keeps the formula exactly symmetric in its arguments
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    dlat = np.abs(lat2 - lat1)
    dlon = np.abs(lon2 - lon1)
    a = np.sin(dlat / 2.0) ** 2 + (np.cos(lat1) * np.cos(lat2)) * np.sin(dlon / 2.0) ** 2
    a = np.clip(a, 0.0, 1.0)
    return 2.0 * EARTH_RADIUS_M * np.arctan2(np.sqrt(a), np.sqrt(1.0 - a))


def geo_distance(a: GeoTag, b: GeoTag) -> float:
    """Great-circle distance in meters between two tags."""
    for tag in (a, b):
        if not (math.isfinite(tag.lat) and math.isfinite(tag.lon)):
            raise GeoInputError(f"geo_distance: non-finite coordinates ({tag.lat}, {tag.lon})")
    return float(_haversine(np.float64(a.lat), np.float64(a.lon), np.float64(b.lat), np.float64(b.lon)))


def geo_distances(origin: GeoTag, lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    """Vectorized distances from `origin` to every (lat, lon) pair, in meters."""
    lats = np.asarray(lats, dtype=np.float64)
    lons = np.asarray(lons, dtype=np.float64)
    if not (np.all(np.isfinite(lats)) and np.all(np.isfinite(lons))):
        raise GeoInputError("geo_distances: non-finite coordinates in target arrays")
    return _haversine(np.float64(origin.lat), np.float64(origin.lon), lats, lons)


def samples_to_arrays(samples: Sequence[GeoSample]):
    """(ids, lats, lons) arrays for a list of samples, in input order."""
    ids = np.fromiter((s.id for s in samples), dtype=np.int64, count=len(samples))
    lats = np.fromiter((s.tag.lat for s in samples), dtype=np.float64, count=len(samples))
    lons = np.fromiter((s.tag.lon for s in samples), dtype=np.float64, count=len(samples))
    return ids, lats, lons


def candidate_masks(origin: GeoTag, lats: np.ndarray, lons: np.ndarray, tau: float, tau_neg: float):
    """Boolean (positive, negative) masks over a coordinate array."""
    if tau > tau_neg:
        raise GeoInputError(f"candidate sets: tau ({tau}) must not exceed tau_neg ({tau_neg})")
    dists = geo_distances(origin, lats, lons)
    return dists < tau, dists >= tau_neg


def candidate_sets(q: GeoSample, db: Sequence[GeoSample], tau: float = DEFAULT_POSITIVE_RADIUS_M,
                   tau_neg: float | None = None) -> CandidateSets:
    """Positives within `tau` meters of the query, negatives at least `tau_neg` away.

    Both lists come back sorted by sample id, so the result does not depend on
    the order of `db`. An empty positive list is returned as-is.
    """
    tau_neg = tau if tau_neg is None else tau_neg
    if not db:
        raise GeoInputError("candidate_sets: database is empty")
    ids, lats, lons = samples_to_arrays(db)
    pos_mask, neg_mask = candidate_masks(q.tag, lats, lons, tau, tau_neg)
    return CandidateSets(
        positives=tuple(int(i) for i in np.sort(ids[pos_mask])),
        negatives=tuple(int(i) for i in np.sort(ids[neg_mask])),
    )


def local_offset_to_tag(origin: GeoTag, east_m: float, north_m: float) -> GeoTag:
    """Tag displaced from `origin` by a small east/north offset in meters (equirectangular)."""
    lat = origin.lat + math.degrees(north_m / EARTH_RADIUS_M)
    lon = origin.lon + math.degrees(east_m / (EARTH_RADIUS_M * math.cos(math.radians(origin.lat))))
    return GeoTag(lat=lat, lon=lon)


def centroid_tag(tags: Sequence[GeoTag]) -> GeoTag:
    """Arithmetic mean of latitudes and longitudes; adequate at city scale."""
    if not tags:
        raise GeoInputError("centroid_tag: no tags given")
    return GeoTag(lat=float(np.mean([t.lat for t in tags])), lon=float(np.mean([t.lon for t in tags])))
