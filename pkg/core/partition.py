# core/partition.py
"""Turns a manifest into federated clients: proximity, clustering and random splits."""
import enum
import json
import logging
import os
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from sklearn.cluster import KMeans

from .errors import ManifestError
from .geo import GeoTag, Role, geo_distances, samples_to_arrays
from .manifest import Manifest
from .seeding import rng_for

logger = logging.getLogger(__name__)


class SplitKind(str, enum.Enum):
    PROXIMITY = "proximity"
    CLUSTERING = "clustering"
    RANDOM = "random"


class PartitionSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: SplitKind = SplitKind.PROXIMITY
    radius: float = Field(1000.0, gt=0)
    k_total: int = Field(40, ge=1)
    n_clients: int = Field(40, ge=1)
    min_query_seqs: int = Field(2, ge=0)
    min_db_seqs: int = Field(2, ge=0)
    validation_clients: int = Field(12, ge=0)
    seed: int = Field(0, ge=0)


@dataclass(frozen=True)
class ClientManifest:
    client_id: str
    query_seqs: tuple
    db_seqs: tuple
    city_ids: tuple
    continent_id: str
    anchor_id: int | None = None
    split: str = "train"

    @property
    def city_id(self) -> str:
        return self.city_ids[0] if self.city_ids else ""

    @property
    def all_seqs(self) -> tuple:
        return self.query_seqs + self.db_seqs

    def is_valid(self, min_query_seqs: int = 2, min_db_seqs: int = 2) -> bool:
        return len(self.query_seqs) >= min_query_seqs and len(self.db_seqs) >= min_db_seqs


@dataclass(frozen=True)
class PartitionStats:
    n_clients: int
    seqs_mean: float
    seqs_std: float
    images_mean: float
    images_std: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    n_iter: int = 0


def _make_client(manifest: Manifest, client_id: str, seq_ids: Sequence[str], anchor_id: int | None = None) -> ClientManifest:
    infos = [manifest.sequence(s) for s in seq_ids]
    query_seqs = tuple(i.seq_id for i in infos if i.role == Role.QUERY)
    db_seqs = tuple(i.seq_id for i in infos if i.role == Role.DATABASE)
    cities = tuple(sorted({i.city_id for i in infos}))
    continent_counts = Counter(i.continent_id for i in infos)
    # most common continent, ties broken alphabetically
    continent = min(continent_counts, key=lambda c: (-continent_counts[c], c)) if continent_counts else ""
    return ClientManifest(client_id, query_seqs, db_seqs, cities, continent, anchor_id)


def _keep_valid(candidates: list[ClientManifest], spec_min_q: int, spec_min_db: int, split_name: str) -> list[ClientManifest]:
    valid = [c for c in candidates if c.is_valid(spec_min_q, spec_min_db)]
    dropped = len(candidates) - len(valid)
    if dropped:
        logger.info(f"{split_name}: dropped {dropped} of {len(candidates)} candidate clients failing the "
                    f">={spec_min_q} query / >={spec_min_db} database sequence rule.")
    return sorted(valid, key=lambda c: c.client_id)


def split_proximity(manifest: Manifest, radius: float, seed: int = 0, min_query_seqs: int = 2,
                    min_db_seqs: int = 2) -> list[ClientManifest]:
    """Greedy per-city grouping of sequences around founding query images.

    A sequence joins a candidate when any of its images lies within `radius` of the founding
    image. Sequences of invalid candidates are consumed too, so the loop always terminates.
    """
    candidates = []
    for city in manifest.city_ids:
        city_seqs = manifest.sequences_in_city(city)
        seq_coords = {s: samples_to_arrays(manifest.samples_of(s))[1:] for s in city_seqs}
        city_queries = manifest.sequences_in_city(city, Role.QUERY)
        query_order = [city_queries[i] for i in rng_for(seed, "proximity", city).permutation(len(city_queries))]
        unassigned = set(city_seqs)
        n_founded = 0
        for founding_seq in query_order:
            if founding_seq not in unassigned:
                continue
            anchor = manifest.samples_of(founding_seq)[0]
            members = [s for s in city_seqs if s in unassigned
                       and np.min(geo_distances(anchor.tag, *seq_coords[s])) <= radius]
            unassigned.difference_update(members)
            candidates.append(_make_client(manifest, f"{city}-p{n_founded:04d}", members, anchor.id))
            n_founded += 1
    return _keep_valid(candidates, min_query_seqs, min_db_seqs, "split_proximity")


def allocate_cluster_counts(seq_counts: dict[str, int], k_total: int) -> dict[str, int]:
    """Per-city K proportional to sequence count, largest-remainder rounding, at least 1, at most the count."""
    total = sum(seq_counts.values())
    quotas = {city: k_total * n / total for city, n in seq_counts.items()}
    alloc = {city: int(np.floor(q)) for city, q in quotas.items()}
    remainder = k_total - sum(alloc.values())
    by_fraction = sorted(quotas, key=lambda city: (-(quotas[city] - alloc[city]), city))
    for city in by_fraction[:max(remainder, 0)]:
        alloc[city] += 1
    return {city: min(max(k, 1), seq_counts[city]) for city, k in alloc.items()}


def lloyd_kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 100) -> KMeansResult:
    """k-means++ seeded Lloyd iterations run to strict convergence (assignments stable)."""
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=max_iter, tol=0.0,
                algorithm="lloyd", random_state=seed)
    labels = km.fit_predict(points)
    # centers as exact means of the final assignment
    centers = np.stack([points[labels == j].mean(axis=0) if np.any(labels == j) else km.cluster_centers_[j]
                        for j in range(k)])
    return KMeansResult(labels=labels, centers=centers, n_iter=int(km.n_iter_))


def split_clustering(manifest: Manifest, k_total: int, seed: int = 0, min_query_seqs: int = 2,
                     min_db_seqs: int = 2) -> list[ClientManifest]:
    """Per-city k-means over sequence feature centroids; each cluster is a candidate client."""
    seq_counts = {city: len(manifest.sequences_in_city(city)) for city in manifest.city_ids}
    allocation = allocate_cluster_counts(seq_counts, k_total)
    candidates = []
    for city in manifest.city_ids:
        city_seqs = manifest.sequences_in_city(city)
        k = allocation[city]
        centroids = np.stack([manifest.sequence_centroid_feat(s) for s in city_seqs])
        if k == 1:
            labels = np.zeros(len(city_seqs), dtype=np.int64)
        else:
            labels = lloyd_kmeans(centroids, k, seed=int(rng_for(seed, "clustering", city).integers(2**31 - 1))).labels
        for j in range(k):
            members = [s for s, label in zip(city_seqs, labels) if label == j]
            if members:
                candidates.append(_make_client(manifest, f"{city}-k{j:04d}", members))
    logger.info(f"split_clustering: {len(candidates)} clusters over {len(manifest.city_ids)} cities (K target {k_total}).")
    return _keep_valid(candidates, min_query_seqs, min_db_seqs, "split_clustering")


def split_random(manifest: Manifest, n_clients: int, seed: int = 0, min_query_seqs: int = 2,
                 min_db_seqs: int = 2) -> list[ClientManifest]:
    """Every client gets at least one sequence of every city; short cities are duplicated cyclically.

    One round-robin cursor runs across all cities, so client sizes differ by at most one sequence.
    """
    if n_clients < 1:
        raise ValueError(f"split_random: n_clients must be >= 1, got {n_clients}")
    assigned = [[] for _ in range(n_clients)]
    cursor = 0
    for city in manifest.city_ids:
        seqs = manifest.sequences_in_city(city)
        seqs = [seqs[i] for i in rng_for(seed, "random", city).permutation(len(seqs))]
        n_draws = max(len(seqs), n_clients)
        for i in range(n_draws):
            assigned[(cursor + i) % n_clients].append(seqs[i % len(seqs)])
        cursor = (cursor + n_draws) % n_clients
        if len(seqs) < n_clients:
            logger.debug(f"split_random: city {city} duplicated {n_clients - len(seqs)} sequence copies.")
    candidates = [_make_client(manifest, f"r{i:04d}", seqs) for i, seqs in enumerate(assigned)]
    return _keep_valid(candidates, min_query_seqs, min_db_seqs, "split_random")


def make_split(manifest: Manifest, spec: PartitionSpec) -> list[ClientManifest]:
    common = dict(seed=spec.seed, min_query_seqs=spec.min_query_seqs, min_db_seqs=spec.min_db_seqs)
    if spec.kind == SplitKind.PROXIMITY:
        return split_proximity(manifest, spec.radius, **common)
    if spec.kind == SplitKind.CLUSTERING:
        return split_clustering(manifest, spec.k_total, **common)
    return split_random(manifest, spec.n_clients, **common)


def hold_out_validation(clients: Sequence[ClientManifest], n_val: int = 12, seed: int = 0):
    """(train, val) with `n_val` clients chosen at random for validation; at least one client stays in train."""
    if n_val >= len(clients):
        logger.warning(f"hold_out_validation: {n_val} validation clients requested but only {len(clients)} exist; "
                       f"holding out {max(len(clients) - 1, 0)}.")
        n_val = max(len(clients) - 1, 0)
    picked = set(rng_for(seed, "validation").choice(len(clients), size=n_val, replace=False).tolist())
    train = [c for i, c in enumerate(clients) if i not in picked]
    val = [ClientManifest(c.client_id, c.query_seqs, c.db_seqs, c.city_ids, c.continent_id, c.anchor_id, "val")
           for i, c in enumerate(clients) if i in picked]
    return train, val


def partition_stats(clients: Sequence[ClientManifest], manifest: Manifest) -> PartitionStats:
    """Mean and population std of sequences and images per client."""
    if not clients:
        raise ValueError("partition_stats: no clients")
    seqs = np.array([len(c.all_seqs) for c in clients], dtype=np.float64)
    images = np.array([sum(len(manifest.sequence(s).sample_ids) for s in c.all_seqs) for c in clients],
                      dtype=np.float64)
    return PartitionStats(len(clients), float(seqs.mean()), float(seqs.std()), float(images.mean()), float(images.std()))


def write_partition(clients: Sequence[ClientManifest], path) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for c in sorted(clients, key=lambda c: c.client_id):
            record = {"client_id": c.client_id, "split": c.split, "query_seqs": list(c.query_seqs),
                      "db_seqs": list(c.db_seqs), "city_ids": list(c.city_ids), "continent_id": c.continent_id,
                      "anchor_id": c.anchor_id}
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    logger.info(f"write_partition: wrote {len(clients)} client records to {path}")


def read_partition(path, manifest: Manifest | None = None) -> list[ClientManifest]:
    if not os.path.exists(path):
        raise ManifestError(f"read_partition: file not found: {path}")
    clients = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                client = ClientManifest(r["client_id"], tuple(r["query_seqs"]), tuple(r["db_seqs"]),
                                        tuple(r["city_ids"]), r["continent_id"], r.get("anchor_id"),
                                        r.get("split", "train"))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ManifestError(f"read_partition: bad record on line {line_no} of {path}: {e}") from e
            if manifest is not None:
                for seq_id in client.all_seqs:
                    manifest.sequence(seq_id)
            clients.append(client)
    return clients


def anchor_tag(manifest: Manifest, client: ClientManifest) -> GeoTag | None:
    return manifest.sample(client.anchor_id).tag if client.anchor_id is not None else None
