# core/retrieval_eval.py
"""Exact kNN retrieval in descriptor space and recall@K against the GPS ground-truth radius."""
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EvaluationError
from .geo import DEFAULT_POSITIVE_RADIUS_M, GeoSample, geo_distances, samples_to_arrays
from .model import EmbedderSpec, ParamVector, embed

logger = logging.getLogger(__name__)

_QUERY_CHUNK = 256


@dataclass(eq=False)
class EvalSet:
    """Queries with at least one database positive inside `positive_radius`, plus the database."""
    queries: tuple
    database: tuple
    positive_radius: float = DEFAULT_POSITIVE_RADIUS_M
    positive_masks: tuple = field(default=(), repr=False)
    excluded_queries: int = 0

    @classmethod
    def build(cls, queries: Sequence[GeoSample], database: Sequence[GeoSample],
              positive_radius: float = DEFAULT_POSITIVE_RADIUS_M) -> "EvalSet":
        if not database:
            raise EvaluationError("EvalSet.build: database is empty")
        database = tuple(sorted(database, key=lambda s: s.id))
        _, lats, lons = samples_to_arrays(database)
        kept, masks = [], []
        for q in sorted(queries, key=lambda s: s.id):
            mask = geo_distances(q.tag, lats, lons) < positive_radius
            if mask.any():
                kept.append(q)
                masks.append(mask)
        excluded = len(queries) - len(kept)
        if excluded:
            logger.info(f"EvalSet.build: excluded {excluded} of {len(queries)} queries without a "
                        f"{positive_radius} m ground-truth positive.")
        return cls(tuple(kept), database, positive_radius, tuple(masks), excluded)

    @property
    def db_ids(self) -> np.ndarray:
        return np.array([s.id for s in self.database], dtype=np.int64)


@dataclass
class RecallResult:
    recalls: dict
    n_queries: int
    excluded_queries: int
    first_hit_ranks: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, dtype=np.int64))
    top1_ids: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, dtype=np.int64))

    def to_record(self) -> dict:
        return {"recall": {str(k): v for k, v in sorted(self.recalls.items())},
                "n_queries": self.n_queries, "excluded_queries": self.excluded_queries}


def _ranked_neighbours(q_desc: np.ndarray, db_desc: np.ndarray, db_ids: np.ndarray, top: int) -> np.ndarray:
    """Database positions of the `top` nearest descriptors per query row, ties by sample id."""
    out = np.empty((q_desc.shape[0], top), dtype=np.int64)
    for i, q in enumerate(q_desc):
        diff = db_desc - q[None, :]
        dists = np.sqrt(np.sum(diff * diff, axis=1))
        out[i] = np.lexsort((db_ids, dists))[:top]
    return out


def recall_from_descriptors(q_desc: np.ndarray, db_desc: np.ndarray, eval_set: EvalSet, ks: Sequence[int],
                            workers: int = 1) -> RecallResult:
    ks = sorted({int(k) for k in ks})
    if not ks or ks[0] < 1:
        raise EvaluationError(f"recall: ks must be non-empty and >= 1, got {ks}")
    if not eval_set.queries:
        raise EvaluationError("recall: evaluation set has no usable queries")
    top = min(ks[-1], len(eval_set.database))
    db_ids = eval_set.db_ids
    chunks = [(s, min(s + _QUERY_CHUNK, len(q_desc))) for s in range(0, len(q_desc), _QUERY_CHUNK)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="recall") as pool:
            parts = list(pool.map(lambda c: _ranked_neighbours(q_desc[c[0]:c[1]], db_desc, db_ids, top), chunks))
    else:
        parts = [_ranked_neighbours(q_desc[a:b], db_desc, db_ids, top) for a, b in chunks]
    neighbours = np.concatenate(parts)

    first_hit = np.full(len(eval_set.queries), np.iinfo(np.int64).max, dtype=np.int64)
    for i, mask in enumerate(eval_set.positive_masks):
        hits = np.flatnonzero(mask[neighbours[i]])
        if hits.size:
            first_hit[i] = hits[0]
    recalls = {k: float(np.mean(first_hit < k)) for k in ks}
    return RecallResult(recalls, len(eval_set.queries), eval_set.excluded_queries, first_hit,
                        db_ids[neighbours[:, 0]])


def recall_at_k(theta: ParamVector | None, spec: EmbedderSpec | None, eval_set: EvalSet, ks: Sequence[int],
                workers: int = 1) -> RecallResult:
    """recall@k for each k. `theta=None` retrieves on raw features (identity embedder)."""
    q_feats = np.stack([q.feat for q in eval_set.queries]) if eval_set.queries else np.zeros((0, 0))
    db_feats = np.stack([s.feat for s in eval_set.database])
    if theta is None:
        q_desc, db_desc = q_feats, db_feats
    else:
        if not eval_set.queries:
            raise EvaluationError("recall: evaluation set has no usable queries")
        q_desc, db_desc = embed(theta, spec, q_feats), embed(theta, spec, db_feats)
    return recall_from_descriptors(q_desc, db_desc, eval_set, ks, workers=workers)


def write_per_query(result: RecallResult, eval_set: EvalSet, path) -> None:
    """One JSON line per query: its id, first correct rank (null when none in the top list) and top-1 id."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    sentinel = np.iinfo(np.int64).max
    with open(path, "w", encoding="utf-8") as handle:
        for q, rank, top1 in zip(eval_set.queries, result.first_hit_ranks, result.top1_ids):
            record = {"query_id": q.id, "first_hit_rank": None if rank == sentinel else int(rank),
                      "top1_id": int(top1)}
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    logger.info(f"write_per_query: wrote {len(eval_set.queries)} query outcomes to {path}")
