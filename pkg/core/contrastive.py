# core/contrastive.py
"""Client-local contrastive training: GPS-label mining, triplet loss, local optimizer and feature augmentation."""
import enum
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import UnusableQueryError
from .geo import GeoSample, GeoTag, candidate_masks, centroid_tag, geo_distances, samples_to_arrays
from .model import EmbedderSpec, ParamVector, embed, forward_backward
from .optimizers import OptimizerHyperparams, OptimizerKind, OptimizerState, apply_update, init_state
from .seeding import rng_for, seed_for, stable_hash

logger = logging.getLogger(__name__)


class NegativeStrategy(str, enum.Enum):
    HARD = "hard"
    RANDOM = "random"


class AugmentMode(str, enum.Enum):
    NONE = "none"
    UNIFORM = "uniform"
    CLIENT_SPECIFIC = "client_specific"


class MiningConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    tau: float = Field(25.0, gt=0)
    tau_neg: float | None = Field(None, gt=0)
    margin: float = Field(0.1, ge=0)
    n_neg: int = Field(5, ge=1)
    pool_max_sequences: int | None = Field(None, ge=1)
    pool_images_per_sequence: int | None = Field(None, ge=1)
    negative_strategy: NegativeStrategy = NegativeStrategy.HARD
    pool_seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.tau_neg is not None and self.tau_neg < self.tau:
            raise ValueError(f"tau_neg ({self.tau_neg}) must be >= tau ({self.tau})")
        if (self.pool_max_sequences is None) != (self.pool_images_per_sequence is None):
            raise ValueError("pool_max_sequences and pool_images_per_sequence must be set together")
        return self

    @property
    def negative_radius(self) -> float:
        return self.tau if self.tau_neg is None else self.tau_neg

    @property
    def pool_restriction(self) -> tuple[int, int] | None:
        if self.pool_max_sequences is None:
            return None
        return self.pool_max_sequences, self.pool_images_per_sequence


class AugmentSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: AugmentMode = AugmentMode.NONE
    jitter_scale: float = Field(0.2, ge=0)
    crop_fraction: float = Field(1.0, gt=0, le=1)
    probability: float = Field(0.5, ge=0, le=1)
    seed: int = Field(0, ge=0)


class LocalTrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    batch_triplets: int = Field(2, ge=1)
    local_lr: float = Field(1e-5, gt=0)
    local_optimizer: OptimizerKind = OptimizerKind.ADAM
    max_local_iterations: int = Field(2500, ge=0)
    fixed_iterations: int | None = Field(None, ge=0)
    reset_optimizer: bool = True
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.local_optimizer not in (OptimizerKind.ADAM, OptimizerKind.SGD):
            raise ValueError(f"local_optimizer must be adam or sgd, got {self.local_optimizer.value}")
        return self


@dataclass(frozen=True)
class Triplet:
    query_id: int
    positive_id: int
    negative_ids: tuple


@dataclass
class LocalStats:
    client_id: str
    n_samples: int = 0
    iterations: int = 0
    mean_loss: float = 0.0
    unusable_queries: int = 0
    negative_shortfalls: int = 0
    optimizer_state: OptimizerState | None = field(default=None, repr=False)

    def to_record(self) -> dict:
        return {
            "client_id": self.client_id,
            "n_samples": self.n_samples,
            "iterations": self.iterations,
            "mean_loss": self.mean_loss,
            "unusable_queries": self.unusable_queries,
            "negative_shortfalls": self.negative_shortfalls,
        }


class _SequenceIndex:
    """Sequence membership and GPS centroids of a database, computed once."""

    def __init__(self, database: Sequence[GeoSample]):
        members = {}
        for i, sample in enumerate(database):
            members.setdefault(sample.seq_id, []).append(i)
        self.seq_ids = sorted(members)
        self.members = [np.array(members[s], dtype=np.int64) for s in self.seq_ids]
        centroids = [centroid_tag([database[i].tag for i in members[s]]) for s in self.seq_ids]
        self.centroid_lats = np.array([c.lat for c in centroids], dtype=np.float64)
        self.centroid_lons = np.array([c.lon for c in centroids], dtype=np.float64)

    def restrict(self, center: GeoTag, n_seq: int, imgs_per_seq: int, seed: int) -> np.ndarray:
        """Database positions of the restricted pool, ascending."""
        dists = geo_distances(center, self.centroid_lats, self.centroid_lons)
        order = sorted(range(len(self.seq_ids)), key=lambda k: (dists[k], self.seq_ids[k]))[:n_seq]
        chosen = []
        for k in order:
            positions = self.members[k]
            if positions.size > imgs_per_seq:
                picks = rng_for(seed, self.seq_ids[k]).choice(positions.size, size=imgs_per_seq, replace=False)
                positions = positions[np.sort(picks)]
            chosen.append(positions)
        return np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)


def restrict_mining_pool(database: Sequence[GeoSample], center: GeoTag, n_seq: int, imgs_per_seq: int,
                         seed: int = 0) -> list[GeoSample]:
    """The `n_seq` sequences whose GPS centroid is nearest to `center`, `imgs_per_seq` random images each."""
    if n_seq < 1 or imgs_per_seq < 1:
        raise ValueError(f"restrict_mining_pool: n_seq and imgs_per_seq must be >= 1, got {n_seq}, {imgs_per_seq}")
    if not database:
        return []
    index = _SequenceIndex(database)
    chosen = [database[i] for i in index.restrict(center, n_seq, imgs_per_seq, seed)]
    return sorted(chosen, key=lambda s: s.id)


@dataclass(eq=False)
class ClientDataset:
    """A client's private data: usable queries, the local database used as mining pool, and
    per-query candidate positions into that database (precomputed from GPS labels)."""
    client_id: str
    queries: tuple
    database: tuple
    positive_index: tuple
    negative_index: tuple
    city_id: str = ""
    continent_id: str = ""
    unusable_queries: int = 0
    source_client_id: str = ""

    def __post_init__(self):
        self.source_client_id = self.source_client_id or self.client_id
        self.query_feats = np.stack([q.feat for q in self.queries]) if self.queries else np.zeros((0, 0))
        self.db_feats = np.stack([s.feat for s in self.database]) if self.database else np.zeros((0, 0))
        self.db_ids = np.array([s.id for s in self.database], dtype=np.int64)

    @classmethod
    def build(cls, client_id: str, queries: Sequence[GeoSample], database: Sequence[GeoSample],
              mining: MiningConfig, city_id: str = "", continent_id: str = "") -> "ClientDataset":
        database = tuple(sorted(database, key=lambda s: s.id))
        usable, positives, negatives = [], [], []
        unusable = 0
        if database:
            _, lats, lons = samples_to_arrays(database)
            restriction = mining.pool_restriction
            seq_index = _SequenceIndex(database) if restriction else None
            for q in queries:
                pos_mask, neg_mask = candidate_masks(q.tag, lats, lons, mining.tau, mining.negative_radius)
                neg_positions = np.flatnonzero(neg_mask)
                if restriction:
                    pool = seq_index.restrict(q.tag, restriction[0], restriction[1], mining.pool_seed)
                    neg_positions = np.intersect1d(neg_positions, pool)
                if not pos_mask.any() or neg_positions.size == 0:
                    unusable += 1
                    continue
                usable.append(q)
                positives.append(np.flatnonzero(pos_mask))
                negatives.append(neg_positions)
        else:
            unusable = len(queries)
        if unusable:
            logger.info(f"ClientDataset.build: client '{client_id}' excluded {unusable} of {len(queries)} queries "
                        f"without GPS positives/negatives.")
        return cls(client_id, tuple(usable), database, tuple(positives), tuple(negatives),
                   city_id=city_id, continent_id=continent_id, unusable_queries=unusable)

    @property
    def n_queries(self) -> int:
        return len(self.queries)

    def subset(self, query_positions: Sequence[int], client_id: str) -> "ClientDataset":
        """A dataset sharing this database, restricted (possibly with repeats) to the given query positions."""
        positions = list(query_positions)
        return ClientDataset(client_id, tuple(self.queries[i] for i in positions), self.database,
                             tuple(self.positive_index[i] for i in positions),
                             tuple(self.negative_index[i] for i in positions),
                             city_id=self.city_id, continent_id=self.continent_id,
                             source_client_id=self.source_client_id)


# ---- mining -----------------------------------------------------------------

def _select_positive(query_desc: np.ndarray, cand_desc: np.ndarray, cand_ids: np.ndarray) -> int:
    """Position of the nearest candidate; ties go to the smallest sample id."""
    diff = cand_desc - query_desc[None, :]
    dists = np.sqrt(np.sum(diff * diff, axis=1))
    return int(np.lexsort((cand_ids, dists))[0])


def _select_negatives(query_desc: np.ndarray, cand_desc: np.ndarray, cand_ids: np.ndarray, n_neg: int) -> np.ndarray:
    """Positions of the `n_neg` nearest candidates, ascending distance, ties by id."""
    diff = cand_desc - query_desc[None, :]
    dists = np.sqrt(np.sum(diff * diff, axis=1))
    return np.lexsort((cand_ids, dists))[:n_neg]


def _query_candidates(q: GeoSample, pool: Sequence[GeoSample], mining: MiningConfig):
    if not pool:
        raise UnusableQueryError(f"query {q.id}: mining pool is empty")
    ids, lats, lons = samples_to_arrays(pool)
    pos_mask, neg_mask = candidate_masks(q.tag, lats, lons, mining.tau, mining.negative_radius)
    feats = np.stack([s.feat for s in pool])
    return ids, feats, pos_mask, neg_mask


def mine_positive(q: GeoSample, pool: Sequence[GeoSample], theta: ParamVector, spec: EmbedderSpec,
                  mining: MiningConfig = MiningConfig()) -> int:
    """Id of the GPS positive closest to the query in descriptor space."""
    ids, feats, pos_mask, _ = _query_candidates(q, pool, mining)
    if not pos_mask.any():
        raise UnusableQueryError(f"query {q.id}: no database sample within {mining.tau} m")
    q_desc = embed(theta, spec, q.feat)[0]
    cand_ids = ids[pos_mask]
    return int(cand_ids[_select_positive(q_desc, embed(theta, spec, feats[pos_mask]), cand_ids)])


def mine_negatives(q: GeoSample, pool: Sequence[GeoSample], theta: ParamVector, spec: EmbedderSpec,
                   mining: MiningConfig = MiningConfig(), n_neg: int | None = None) -> list[int]:
    """Ids of the hardest GPS negatives, nearest first."""
    n_neg = mining.n_neg if n_neg is None else n_neg
    ids, feats, _, neg_mask = _query_candidates(q, pool, mining)
    if not neg_mask.any():
        raise UnusableQueryError(f"query {q.id}: no database sample at least {mining.negative_radius} m away")
    cand_ids = ids[neg_mask]
    if cand_ids.size < n_neg:
        logger.warning(f"mine_negatives: query {q.id} has only {cand_ids.size} negatives (wanted {n_neg}); using all.")
    q_desc = embed(theta, spec, q.feat)[0]
    positions = _select_negatives(q_desc, embed(theta, spec, feats[neg_mask]), cand_ids, n_neg)
    return [int(i) for i in cand_ids[positions]]


# ---- loss -------------------------------------------------------------------

def triplet_loss(d_qp: float, d_qn: float, m: float) -> float:
    return max(d_qp * d_qp - d_qn * d_qn + m, 0.0)


def triplet_loss_and_upstream(desc: np.ndarray, triplet_rows: Sequence[tuple], margin: float):
    """Batch-mean of per-query summed hinge terms, and its gradient w.r.t. each descriptor row.

    `triplet_rows` holds (query_row, positive_row, negative_rows) into `desc`.
    """
    upstream = np.zeros_like(desc)
    total = 0.0
    for q_row, p_row, n_rows in triplet_rows:
        dq, dp = desc[q_row], desc[p_row]
        diff_qp = dq - dp
        d_qp2 = float(np.sum(diff_qp * diff_qp))
        for n_row in n_rows:
            dn = desc[n_row]
            diff_qn = dq - dn
            term = d_qp2 - float(np.sum(diff_qn * diff_qn)) + margin
            if term > 0.0:
                total += term
                upstream[q_row] += 2.0 * (dn - dp)
                upstream[p_row] -= 2.0 * diff_qp
                upstream[n_row] += 2.0 * diff_qn
    scale = 1.0 / max(len(triplet_rows), 1)
    return total * scale, upstream * scale


def triplet_objective(theta: ParamVector, spec: EmbedderSpec, x: np.ndarray, triplet_rows: Sequence[tuple],
                      margin: float) -> tuple[float, ParamVector]:
    """Full objective through the embedder: (loss, gradient)."""
    loss, grad = forward_backward(theta, spec, x, lambda desc: triplet_loss_and_upstream(desc, triplet_rows, margin))
    return loss, ParamVector(grad, theta.layout)


# ---- augmentation -----------------------------------------------------------

def _crop(x: np.ndarray, crop_fraction: float, rng: np.random.Generator) -> np.ndarray:
    n_zero = int(round((1.0 - crop_fraction) * x.shape[0]))
    if n_zero <= 0:
        return x
    start = int(rng.integers(0, x.shape[0] - n_zero + 1))
    x[start:start + n_zero] = 0.0
    return x


def client_jitter(spec: AugmentSpec, client_seed: int, dim: int) -> np.ndarray:
    return np.random.default_rng(client_seed).uniform(1.0 - spec.jitter_scale, 1.0 + spec.jitter_scale, size=dim)


def apply_augmentation(x, spec: AugmentSpec, client_seed: int, sample_seed: int) -> np.ndarray:
    """Feature-space jitter (multiplicative) and crop (zeroed contiguous block)."""
    x = np.array(x, dtype=np.float64)
    if spec.mode == AugmentMode.NONE:
        return x
    rng = np.random.default_rng(sample_seed)
    if spec.mode == AugmentMode.UNIFORM:
        if rng.random() < spec.probability:
            x = x * rng.uniform(1.0 - spec.jitter_scale, 1.0 + spec.jitter_scale, size=x.shape[0])
            x = _crop(x, spec.crop_fraction, rng)
        return x
    x = x * client_jitter(spec, client_seed, x.shape[0])
    if spec.crop_fraction < 1.0 and rng.random() < spec.probability:
        x = _crop(x, spec.crop_fraction, rng)
    return x


# ---- local training ---------------------------------------------------------

def planned_iterations(n_queries: int, cfg: LocalTrainConfig) -> int:
    if n_queries == 0:
        return 0
    if cfg.fixed_iterations is not None:
        return cfg.fixed_iterations
    return min(n_queries // cfg.batch_triplets, cfg.max_local_iterations)


def _batch_order(n_queries: int, n_needed: int, rng: np.random.Generator) -> np.ndarray:
    """Query positions for `n_needed` draws: reshuffled passes over the data, back to back."""
    passes = []
    remaining = n_needed
    while remaining > 0:
        passes.append(rng.permutation(n_queries))
        remaining -= n_queries
    return np.concatenate(passes)[:n_needed] if passes else np.zeros(0, dtype=np.int64)


def local_train(theta_start: ParamVector, client: ClientDataset, spec: EmbedderSpec, mining: MiningConfig,
                cfg: LocalTrainConfig, augment: AugmentSpec = AugmentSpec(), round_index: int = 0,
                optimizer_state: OptimizerState | None = None) -> tuple[ParamVector, LocalStats]:
    """Runs the client's local optimization from `theta_start`.

    Reads nothing but `client`. Deterministic in (theta_start, client, cfg.seed, round_index).
    """
    stats = LocalStats(client.client_id, unusable_queries=client.unusable_queries)
    iterations = planned_iterations(client.n_queries, cfg)
    if iterations == 0:
        if client.n_queries == 0:
            logger.warning(f"local_train: client '{client.client_id}' has no usable queries; contributing nothing.")
        stats.optimizer_state = optimizer_state
        return theta_start, stats

    B = cfg.batch_triplets
    rng = rng_for(cfg.seed, client.client_id, round_index)
    order = _batch_order(client.n_queries, iterations * B, rng)
    state = optimizer_state
    if state is None or not state.matches(cfg.local_optimizer, theta_start.size):
        state = init_state(cfg.local_optimizer, theta_start.size)
    hp = OptimizerHyperparams(lr=cfg.local_lr)
    client_seed = seed_for(augment.seed, stable_hash(client.source_client_id))

    values = theta_start.values.copy()
    losses = []
    for it in range(iterations):
        theta = ParamVector(values, theta_start.layout)
        batch = order[it * B:(it + 1) * B]
        triplets, shortfalls = _mine_batch(theta, spec, client, batch, mining, rng)
        stats.negative_shortfalls += shortfalls

        rows, triplet_rows = [], []
        for q_pos, p_pos, n_positions in triplets:
            q_row = len(rows)
            rows.append(client.query_feats[q_pos])
            rows.append(client.db_feats[p_pos])
            rows.extend(client.db_feats[n] for n in n_positions)
            triplet_rows.append((q_row, q_row + 1, tuple(range(q_row + 2, q_row + 2 + len(n_positions)))))
        x = np.stack(rows)
        if augment.mode != AugmentMode.NONE:
            x = np.stack([apply_augmentation(row, augment, client_seed,
                                             seed_for(augment.seed, client.client_id, round_index, it, r))
                          for r, row in enumerate(x)])

        loss, grad = triplet_objective(theta, spec, x, triplet_rows, mining.margin)
        values, state = apply_update(state, values, grad.values, hp)
        losses.append(loss)

    stats.iterations = iterations
    stats.n_samples = iterations * B
    stats.mean_loss = float(np.mean(losses))
    stats.optimizer_state = state
    if stats.negative_shortfalls:
        logger.warning(f"local_train: client '{client.client_id}' round {round_index}: "
                       f"{stats.negative_shortfalls} mined queries had fewer than {mining.n_neg} negatives; "
                       f"used all available.")
    logger.debug(f"local_train: client '{client.client_id}' round {round_index}: {iterations} iterations, "
                 f"mean loss {stats.mean_loss:.6f}")
    return ParamVector(values, theta_start.layout), stats


def _mine_batch(theta: ParamVector, spec: EmbedderSpec, client: ClientDataset, batch: np.ndarray,
                mining: MiningConfig, rng: np.random.Generator):
    """(query position, positive db position, negative db positions) per batch query, mined with the current theta."""
    q_desc = embed(theta, spec, client.query_feats[batch])
    needed = np.unique(np.concatenate([np.concatenate((client.positive_index[q], client.negative_index[q]))
                                       for q in batch]))
    desc_of = dict(zip(needed.tolist(), embed(theta, spec, client.db_feats[needed])))

    triplets, shortfalls = [], 0
    for b, q_pos in enumerate(batch):
        pos_cands = client.positive_index[q_pos]
        neg_cands = client.negative_index[q_pos]
        pos_desc = np.stack([desc_of[int(i)] for i in pos_cands])
        p_pos = int(pos_cands[_select_positive(q_desc[b], pos_desc, client.db_ids[pos_cands])])

        if neg_cands.size < mining.n_neg:
            shortfalls += 1
        if mining.negative_strategy == NegativeStrategy.RANDOM:
            picks = rng.choice(neg_cands.size, size=min(mining.n_neg, neg_cands.size), replace=False)
            n_positions = tuple(int(i) for i in neg_cands[np.sort(picks)])
        else:
            neg_desc = np.stack([desc_of[int(i)] for i in neg_cands])
            chosen = _select_negatives(q_desc[b], neg_desc, client.db_ids[neg_cands], mining.n_neg)
            n_positions = tuple(int(i) for i in neg_cands[chosen])
        triplets.append((int(q_pos), p_pos, n_positions))
    return triplets, shortfalls


def triplets_for(client: ClientDataset, theta: ParamVector, spec: EmbedderSpec, mining: MiningConfig,
                 query_positions: Sequence[int]) -> list[Triplet]:
    """Hard-mined triplets (as sample ids) for the given query positions; used for inspection and tests."""
    batch = np.asarray(list(query_positions), dtype=np.int64)
    mined, _ = _mine_batch(theta, spec, client, batch, mining, np.random.default_rng(0))
    return [Triplet(client.queries[q].id, int(client.db_ids[p]), tuple(int(client.db_ids[n]) for n in ns))
            for q, p, ns in mined]
