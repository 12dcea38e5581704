# core/manifest.py
"""In-memory manifest of geo-tagged samples, grouped into sequences and cities, plus its CSV file format."""
import logging
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import ManifestError
from .geo import GeoSample, GeoTag, Role

logger = logging.getLogger(__name__)

_META_PREFIX = "# feature_dim="
_BASE_COLUMNS = ["id", "lat", "lon", "seq_id", "city_id", "continent_id", "role"]


@dataclass(frozen=True)
class SequenceInfo:
    seq_id: str
    city_id: str
    continent_id: str
    role: Role
    sample_ids: tuple


class Manifest:
    def __init__(self, samples: Sequence[GeoSample], feature_dim: int):
        self.feature_dim = int(feature_dim)
        self.samples = tuple(samples)
        self._by_id = {}
        grouped = {}
        for sample in self.samples:
            if sample.feat.shape[0] != self.feature_dim:
                raise ManifestError(f"Manifest: sample {sample.id} has {sample.feat.shape[0]} features, expected {self.feature_dim}")
            if sample.id in self._by_id:
                raise ManifestError(f"Manifest: duplicate sample id {sample.id}")
            self._by_id[sample.id] = sample
            grouped.setdefault(sample.seq_id, []).append(sample)

        self.sequences = {}
        for seq_id, members in grouped.items():
            first = members[0]
            for member in members[1:]:
                if (member.role, member.city_id) != (first.role, first.city_id):
                    raise ManifestError(f"Manifest: sequence '{seq_id}' mixes roles or cities")
            self.sequences[seq_id] = SequenceInfo(seq_id, first.city_id, first.continent_id, first.role,
                                                  tuple(m.id for m in members))

    def __len__(self) -> int:
        return len(self.samples)

    def sample(self, sample_id: int) -> GeoSample:
        return self._by_id[sample_id]

    def sequence(self, seq_id: str) -> SequenceInfo:
        try:
            return self.sequences[seq_id]
        except KeyError:
            raise ManifestError(f"Manifest: unknown sequence '{seq_id}'") from None

    @property
    def city_ids(self) -> list[str]:
        return sorted({info.city_id for info in self.sequences.values()})

    def sequences_in_city(self, city_id: str, role: Role | None = None) -> list[str]:
        return sorted(seq_id for seq_id, info in self.sequences.items()
                      if info.city_id == city_id and (role is None or info.role == role))

    def samples_of(self, seq_id: str) -> list[GeoSample]:
        return [self._by_id[i] for i in self.sequence(seq_id).sample_ids]

    def sequence_centroid_feat(self, seq_id: str) -> np.ndarray:
        return np.mean(np.stack([s.feat for s in self.samples_of(seq_id)]), axis=0)

    def collect(self, seq_ids: Iterable[str]) -> list[GeoSample]:
        """Samples of the given sequences, each sample once, in sequence order."""
        seen, out = set(), []
        for seq_id in seq_ids:
            for sample in self.samples_of(seq_id):
                if sample.id not in seen:
                    seen.add(sample.id)
                    out.append(sample)
        return out

    def queries(self) -> list[GeoSample]:
        return [s for s in self.samples if s.role == Role.QUERY]

    def database(self) -> list[GeoSample]:
        return [s for s in self.samples if s.role == Role.DATABASE]


def write_manifest(manifest: Manifest, path) -> None:
    f = manifest.feature_dim
    feature_columns = [f"f{i}" for i in range(f)]
    feats = np.stack([s.feat for s in manifest.samples]) if manifest.samples else np.zeros((0, f))
    frame = pd.DataFrame({
        "id": [s.id for s in manifest.samples],
        "lat": [s.tag.lat for s in manifest.samples],
        "lon": [s.tag.lon for s in manifest.samples],
        "seq_id": [s.seq_id for s in manifest.samples],
        "city_id": [s.city_id for s in manifest.samples],
        "continent_id": [s.continent_id for s in manifest.samples],
        "role": [s.role.value for s in manifest.samples],
    })
    frame = pd.concat([frame, pd.DataFrame(feats, columns=feature_columns)], axis=1)

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(f"{_META_PREFIX}{f}\n")
        frame.to_csv(handle, index=False, float_format="%.17g", lineterminator="\n")
    logger.info(f"write_manifest: wrote {len(manifest)} samples (f={f}) to {path}")


def read_manifest(path) -> Manifest:
    if not os.path.exists(path):
        raise ManifestError(f"read_manifest: file not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        header = handle.readline().strip()
        if not header.startswith(_META_PREFIX):
            raise ManifestError(f"read_manifest: {path} does not start with '{_META_PREFIX}<f>'")
        try:
            feature_dim = int(header[len(_META_PREFIX):])
        except ValueError:
            raise ManifestError(f"read_manifest: bad feature_dim header '{header}'") from None
        frame = pd.read_csv(handle, dtype={"seq_id": str, "city_id": str, "continent_id": str, "role": str},
                            keep_default_na=False, float_precision="round_trip")

    feature_columns = [f"f{i}" for i in range(feature_dim)]
    expected = _BASE_COLUMNS + feature_columns
    if list(frame.columns) != expected:
        raise ManifestError(f"read_manifest: expected {len(expected)} columns ({feature_dim} features), "
                            f"found {len(frame.columns)}")
    feats = frame[feature_columns].to_numpy(dtype=np.float64)
    samples = []
    try:
        for row, feat in zip(frame.itertuples(index=False), feats):
            samples.append(GeoSample(id=int(row.id), tag=GeoTag(float(row.lat), float(row.lon)), feat=feat,
                                     seq_id=row.seq_id, city_id=row.city_id, role=Role(row.role),
                                     continent_id=row.continent_id))
    except ValueError as e:
        raise ManifestError(f"read_manifest: malformed record in {path}: {e}") from e
    logger.info(f"read_manifest: loaded {len(samples)} samples, {feature_dim} features from {path}")
    return Manifest(samples, feature_dim)
