# core/hierarchy.py
"""Two-tier federated training: per-cluster servers, synchronized by a top server every T_s rounds."""
import enum
import logging
import time
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .contrastive import ClientDataset, LocalTrainConfig, MiningConfig
from .errors import ConfigError
from .federation import (FederatedTrainer, FederationConfig, FederationResult, RoundRecord,
                         eval_due, select_clients)
from .model import EmbedderSpec, ParamVector
from .optimizers import init_state

logger = logging.getLogger(__name__)

TOP_CLUSTER_ID = "top"


class ClusterLevel(str, enum.Enum):
    CITY = "city"
    CONTINENT = "continent"


class ClusterSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    level: ClusterLevel = ClusterLevel.CITY
    clusters: dict[str, tuple[str, ...]] = Field(default_factory=dict)
    clients_per_cluster_per_round: int = Field(5, ge=1)
    aggregation_interval: int = Field(15, ge=1)

    @property
    def n_clusters(self) -> int:
        return sum(1 for members in self.clusters.values() if members)


def build_clusters(clients: Sequence[ClientDataset], spec: ClusterSpec) -> ClusterSpec:
    """Groups clients by their city or continent metadata."""
    clusters = {}
    for client in sorted(clients, key=lambda c: c.client_id):
        key = client.city_id if spec.level == ClusterLevel.CITY else client.continent_id
        clusters.setdefault(key or "unassigned", []).append(client.client_id)
    logger.info(f"build_clusters: {len(clusters)} {spec.level.value} clusters over {len(clients)} clients.")
    return spec.model_copy(update={"clusters": {k: tuple(v) for k, v in sorted(clusters.items())}})


def _check_partition(spec: ClusterSpec, clients: Sequence[ClientDataset]):
    seen = {}
    for cluster_id, members in spec.clusters.items():
        for client_id in members:
            if client_id in seen:
                raise ConfigError(f"client '{client_id}' is in clusters '{seen[client_id]}' and '{cluster_id}'")
            seen[client_id] = cluster_id
    known = {c.client_id for c in clients}
    if set(seen) != known:
        missing = sorted(known - set(seen))[:5]
        unknown = sorted(set(seen) - known)[:5]
        raise ConfigError(f"clusters do not partition the training clients (unclustered {missing}, unknown {unknown})")


class HierarchicalTrainer(FederatedTrainer):
    """Each cluster runs FedAvg rounds on its own model; the top server averages the cluster models
    (weighted by samples processed since the last synchronization) and broadcasts the result."""

    def __init__(self, cfg: FederationConfig, cluster_spec: ClusterSpec, spec: EmbedderSpec, mining: MiningConfig,
                 local: LocalTrainConfig, **kwargs):
        if cfg.fedvc:
            raise ConfigError("HierarchicalTrainer: FedVC is only supported in flat federated mode")
        super().__init__(cfg, spec, mining, local, **kwargs)
        self.cluster_spec = cluster_spec
        logger.info(f"HierarchicalTrainer initialized: {cluster_spec.n_clusters} clusters, "
                    f"{cluster_spec.clients_per_cluster_per_round} clients/cluster/round, "
                    f"T_s={cluster_spec.aggregation_interval}")

    def run(self, clients: Sequence[ClientDataset], theta0: ParamVector) -> FederationResult:
        if not clients:
            raise ConfigError("HierarchicalTrainer: no training clients")
        spec = self.cluster_spec if self.cluster_spec.clusters else build_clusters(clients, self.cluster_spec)
        _check_partition(spec, clients)
        by_id = {c.client_id: c for c in clients}
        clusters = {}
        for cluster_id, members in sorted(spec.clusters.items()):
            if not members:
                logger.warning(f"HierarchicalTrainer: cluster '{cluster_id}' is empty; skipped.")
                continue
            clusters[cluster_id] = sorted(members)

        result = self._start(theta0)
        theta_global = theta0
        cluster_theta = {c: theta0 for c in clusters}
        cluster_state = {c: init_state(self.cfg.server_optimizer, 0) for c in clusters}
        since_sync = {c: 0 for c in clusters}
        T, T_s = self.cfg.rounds, spec.aggregation_interval

        for t in range(T):
            started = time.perf_counter()
            self._report_progress(f"Round {t + 1}/{T}", int(100 * t / max(T, 1)))
            for cluster_id, members in clusters.items():
                selected = select_clients(members, t, spec.clients_per_cluster_per_round, self.cfg.seed,
                                          stream=cluster_id)
                updates = self._train_selected(cluster_theta[cluster_id], [by_id[i] for i in selected], t)
                usable = self._usable(updates)
                if usable:
                    cluster_theta[cluster_id], cluster_state[cluster_id] = self.aggregate(
                        cluster_theta[cluster_id], usable, cluster_state[cluster_id])
                    since_sync[cluster_id] += sum(u.n_samples for u in usable)
                record = self._round_record(t, selected, updates, cluster_theta[cluster_id],
                                            skipped=not usable, cluster_id=cluster_id)
                self._close_round(record, cluster_theta[cluster_id], result, evaluate=False)

            if (t + 1) % T_s == 0 or t == T - 1:
                theta_global = self._synchronize(theta_global, cluster_theta, since_sync)
                cluster_theta = {c: theta_global for c in clusters}
                since_sync = {c: 0 for c in clusters}
                top = RoundRecord(t, tuple(clusters), n_samples=0, checksum=theta_global.checksum(),
                                  cluster_id=TOP_CLUSTER_ID)
                self._close_round(top, theta_global, result, evaluate=eval_due(t, T, self.cfg.eval_interval))
            elif eval_due(t, T, self.cfg.eval_interval):
                _, eval_record = self._evaluate(theta_global, t + 1, result)
                if eval_record:
                    self._emit(eval_record)
            logger.debug(f"HierarchicalTrainer: round {t} done in {time.perf_counter() - started:.2f}s.")

        self._report_progress("Hierarchical training complete.", 100)
        return self._finish(result, theta_global)

    @staticmethod
    def _synchronize(theta_global: ParamVector, cluster_theta: dict, since_sync: dict) -> ParamVector:
        """Sample-weighted mean of the cluster models in cluster-id order."""
        total = sum(since_sync.values())
        if total == 0:
            logger.warning("HierarchicalTrainer: no cluster processed samples since the last synchronization.")
            return theta_global
        acc = np.zeros(theta_global.size, dtype=np.float64)
        for cluster_id in sorted(cluster_theta):
            if since_sync[cluster_id]:
                acc += (since_sync[cluster_id] / total) * cluster_theta[cluster_id].values
        return theta_global.with_values(acc)


def run_hierarchical(cfg: FederationConfig, cluster_spec: ClusterSpec, clients: Sequence[ClientDataset],
                     theta0: ParamVector, spec: EmbedderSpec, mining: MiningConfig = MiningConfig(),
                     local: LocalTrainConfig = LocalTrainConfig(), **kwargs) -> tuple[ParamVector, list[RoundRecord]]:
    result = HierarchicalTrainer(cfg, cluster_spec, spec, mining, local, **kwargs).run(clients, theta0)
    return result.final_params, result.records
