# core/federation.py
"""Round orchestration: client sampling, local training fan-out, FedAvg / ServerOpt aggregation and FedVC."""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .contrastive import AugmentSpec, ClientDataset, LocalStats, LocalTrainConfig, MiningConfig, local_train
from .errors import AggregationError, ConfigError
from .model import EmbedderSpec, ParamVector
from .optimizers import OptimizerHyperparams, OptimizerKind, OptimizerState, apply_update, init_state
from .retrieval_eval import EvalSet, recall_at_k
from .seeding import rng_for

logger = logging.getLogger(__name__)

# (server_lr, server_momentum) defaults per server optimizer
SERVER_DEFAULTS = {
    OptimizerKind.SGD: (1.0, 0.0),
    OptimizerKind.SGDM: (0.1, 0.9),
    OptimizerKind.ADAM: (0.1, 0.9),
    OptimizerKind.ADAGRAD: (0.01, 0.9),
}


class FederationConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    rounds: int = Field(60, ge=0)
    clients_per_round: int = Field(5, ge=1)
    server_optimizer: OptimizerKind = OptimizerKind.SGD
    server_lr: float | None = Field(None, gt=0)
    server_momentum: float | None = Field(None, ge=0, lt=1)
    local_iterations: int | None = Field(None, ge=1)
    total_iterations: int | None = Field(None, ge=1)
    fedvc: bool = False
    fedvc_virtual_size: int | None = Field(None, ge=1)
    eval_interval: int = Field(10, ge=1)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_budget(self):
        if self.local_iterations is not None and self.total_iterations is not None:
            spent = self.rounds * self.local_iterations * self.clients_per_round
            if spent != self.total_iterations:
                raise ValueError(f"rounds * local_iterations * clients_per_round = {spent} does not match "
                                 f"total_iterations = {self.total_iterations}")
        return self

    @property
    def effective_server_lr(self) -> float:
        return self.server_lr if self.server_lr is not None else SERVER_DEFAULTS[self.server_optimizer][0]

    @property
    def effective_server_momentum(self) -> float:
        return self.server_momentum if self.server_momentum is not None else SERVER_DEFAULTS[self.server_optimizer][1]

    @property
    def is_plain_fedavg(self) -> bool:
        return self.server_optimizer == OptimizerKind.SGD and self.effective_server_lr == 1.0


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    client_id: str
    params: ParamVector
    n_samples: int
    stats: LocalStats | None = None


@dataclass
class RoundRecord:
    round_index: int
    selected: tuple
    clients: list = field(default_factory=list)
    n_samples: int = 0
    mean_loss: float | None = None
    checksum: str = ""
    skipped: bool = False
    cluster_id: str | None = None
    validation_r1: float | None = None

    def to_record(self) -> dict:
        record = {
            "type": "round", "round": self.round_index, "selected": list(self.selected),
            "clients": self.clients, "n_samples": self.n_samples, "mean_loss": self.mean_loss,
            "checksum": self.checksum, "skipped": self.skipped, "validation_r1": self.validation_r1,
        }
        if self.cluster_id is not None:
            record["cluster_id"] = self.cluster_id
        return record


@dataclass
class FederationResult:
    final_params: ParamVector
    best_params: ParamVector
    records: list = field(default_factory=list)
    evaluations: list = field(default_factory=list)
    best_recall: float | None = None
    best_round: int | None = None
    stopped_early: bool = False

    @property
    def final_recall(self) -> float | None:
        return self.evaluations[-1][1].get(1) if self.evaluations else None


# ---- selection and aggregation ------------------------------------------------

def select_clients(pool: Sequence[str], t: int, k: int, seed: int, weights: Sequence | None = None,
                   stream: str | None = None) -> list[str]:
    """Sorted ids of the clients taking part in round t; deterministic per (seed, stream, t).

    Pools drawn under different `stream` names (one per cluster) are sampled independently.
    """
    if not pool:
        raise ValueError("select_clients: client pool is empty")
    pool = list(pool)
    if k >= len(pool):
        return sorted(pool)
    rng = rng_for(seed, "select", t) if stream is None else rng_for(seed, "select", stream, t)
    if weights is None:
        picks = rng.choice(len(pool), size=k, replace=False)
    else:
        w = np.array([float(x) for x in weights], dtype=np.float64)
        picks = rng.choice(len(pool), size=k, replace=False, p=w / w.sum())
    return sorted(pool[i] for i in picks)


def _canonical_updates(theta: ParamVector, updates: Sequence[ClientUpdate]):
    ordered = sorted(updates, key=lambda u: u.client_id)
    for u in ordered:
        if u.params.size != theta.size:
            raise AggregationError(f"client '{u.client_id}' sent {u.params.size} parameters, expected {theta.size}")
        if u.n_samples <= 0:
            raise AggregationError(f"client '{u.client_id}' reported N_k = {u.n_samples}; must be > 0")
    return ordered, sum(u.n_samples for u in ordered)


def fedavg_aggregate(theta: ParamVector, updates: Sequence[ClientUpdate]) -> ParamVector:
    """Sum_k (N_k / N) theta_k, accumulated in ascending client-id order. No updates leaves theta as is."""
    if not updates:
        logger.warning("fedavg_aggregate: no client updates; keeping the current model.")
        return theta
    ordered, total = _canonical_updates(theta, updates)
    acc = np.zeros(theta.size, dtype=np.float64)
    for u in ordered:
        acc += (u.n_samples / total) * u.params.values
    return theta.with_values(acc)


def pseudo_gradient(theta: ParamVector, updates: Sequence[ClientUpdate]) -> np.ndarray:
    """Sum_k (N_k / N) (theta - theta_k)."""
    if not updates:
        return np.zeros(theta.size, dtype=np.float64)
    ordered, total = _canonical_updates(theta, updates)
    delta = np.zeros(theta.size, dtype=np.float64)
    for u in ordered:
        delta += (u.n_samples / total) * (theta.values - u.params.values)
    return delta


def server_hyperparams(cfg: FederationConfig) -> OptimizerHyperparams:
    return OptimizerHyperparams(lr=cfg.effective_server_lr, beta1=cfg.effective_server_momentum)


def server_step(opt_state: OptimizerState, theta: ParamVector, delta: np.ndarray,
                cfg: FederationConfig) -> tuple[ParamVector, OptimizerState]:
    """theta - ServerOpt(delta): the pseudo-gradient is fed to the server optimizer as a gradient."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != theta.values.shape:
        raise AggregationError(f"server_step: pseudo-gradient has shape {delta.shape}, expected {theta.values.shape}")
    if not np.all(np.isfinite(delta)):
        bad = int(np.count_nonzero(~np.isfinite(delta)))
        raise AggregationError(f"server_step: pseudo-gradient has {bad} non-finite entries; aborting round")
    if not opt_state.matches(cfg.server_optimizer, theta.size):
        raise AggregationError(f"server_step: optimizer state ({opt_state.kind.value}) does not match "
                               f"{cfg.server_optimizer.value} over {theta.size} parameters")
    values, new_state = apply_update(opt_state, theta.values, delta, server_hyperparams(cfg))
    return theta.with_values(values), new_state


def make_virtual_clients(pool: Sequence[ClientDataset], virtual_size: int, seed: int = 0):
    """FedVC pool: large clients split into disjoint query shards, small ones padded by resampling.

    Returns (virtual clients sorted by id, {virtual id: selection weight}); the weights of one real
    client's shards sum to its query count N_k.
    """
    if virtual_size < 1:
        raise ValueError(f"make_virtual_clients: virtual_size must be >= 1, got {virtual_size}")
    virtual, weights = [], {}
    for client in sorted(pool, key=lambda c: c.client_id):
        n = client.n_queries
        if n == 0:
            logger.warning(f"make_virtual_clients: client '{client.client_id}' has no usable queries; left out.")
            continue
        rng = rng_for(seed, "fedvc", client.client_id)
        if n == virtual_size:
            shards = [(client.client_id, None)]
        elif n < virtual_size:
            extra = rng.choice(n, size=virtual_size - n, replace=True)
            shards = [(client.client_id, np.concatenate((np.arange(n), extra)))]
        else:
            order = rng.permutation(n)
            n_shards = math.ceil(n / virtual_size)
            shards = []
            for j in range(n_shards):
                part = order[j * virtual_size:(j + 1) * virtual_size]
                if part.size < virtual_size:
                    part = np.concatenate((part, rng.choice(part, size=virtual_size - part.size, replace=True)))
                shards.append((f"{client.client_id}#v{j:02d}", part))
        for shard_id, positions in shards:
            virtual.append(client if positions is None else client.subset(positions.tolist(), shard_id))
            weights[shard_id] = Fraction(n, len(shards))
    logger.info(f"make_virtual_clients: {len(pool)} real clients -> {len(virtual)} virtual clients "
                f"of {virtual_size} queries.")
    return virtual, weights


# ---- trainers -----------------------------------------------------------------

def eval_due(t: int, rounds: int, interval: int) -> bool:
    """Validation runs every `interval` rounds and after the last one."""
    return (t + 1) % interval == 0 or t == rounds - 1


class _RoundRunner:
    """Shared plumbing of the trainers: local-training fan-out, evaluation, progress and record emission."""

    def __init__(self, spec: EmbedderSpec, mining: MiningConfig, local: LocalTrainConfig,
                 augment: AugmentSpec | None = None, validation: EvalSet | None = None,
                 eval_ks: Sequence[int] = (1, 5, 10), workers: int = 1,
                 progress_callback: Callable | None = None, record_sink: Callable | None = None):
        self.spec = spec
        self.mining = mining
        self.local = local
        self.augment = augment or AugmentSpec()
        self.validation = validation if validation is not None and validation.queries else None
        self.eval_ks = tuple(eval_ks)
        self.workers = max(int(workers), 1)
        self.progress_callback = progress_callback
        self.record_sink = record_sink
        self._local_states = {}

    def _report_progress(self, message: str, percentage: int | None = None):
        if self.progress_callback:
            try:
                self.progress_callback(message, percentage)
            except Exception as e:
                logger.error(f"Error in {type(self).__name__}'s progress_callback: {e}", exc_info=True)

    @property
    def local_state_owners(self) -> list[str]:
        """Real client ids holding a carried local optimizer state."""
        return sorted(self._local_states)

    def _emit(self, record: dict):
        if self.record_sink:
            self.record_sink(record)

    def _train_one(self, theta: ParamVector, client: ClientDataset, round_index: int) -> ClientUpdate:
        # FedVC shards share the optimizer state of their real client
        carried = None if self.local.reset_optimizer else self._local_states.get(client.source_client_id)
        params, stats = local_train(theta, client, self.spec, self.mining, self.local, self.augment,
                                    round_index=round_index, optimizer_state=carried)
        return ClientUpdate(client.client_id, params, stats.n_samples, stats)

    def _train_selected(self, theta: ParamVector, clients: Sequence[ClientDataset], round_index: int) -> list[ClientUpdate]:
        """Every selected client trains on a private copy of theta; results come back in client-id order."""
        clients = sorted(clients, key=lambda c: c.client_id)
        if self.workers > 1 and len(clients) > 1:
            with ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="client") as pool:
                updates = list(pool.map(lambda c: self._train_one(theta, c, round_index), clients))
        else:
            updates = [self._train_one(theta, c, round_index) for c in clients]
        if not self.local.reset_optimizer:
            for client, u in zip(clients, updates):
                if u.stats.optimizer_state is not None:
                    self._local_states[client.source_client_id] = u.stats.optimizer_state
        return updates

    def _evaluate(self, theta: ParamVector, rounds_done: int, result: FederationResult):
        """(R@1, eval record) on the validation set, updating the best checkpoint; (None, None) without one."""
        if self.validation is None:
            return None, None
        recalls = recall_at_k(theta, self.spec, self.validation, self.eval_ks, workers=self.workers).recalls
        result.evaluations.append((rounds_done, recalls))
        r1 = recalls.get(1, recalls[min(recalls)])
        if result.best_recall is None or r1 > result.best_recall:
            result.best_recall, result.best_round, result.best_params = r1, rounds_done, theta
        logger.info(f"{type(self).__name__}: validation after {rounds_done} rounds: "
                    + ", ".join(f"R@{k}={100 * v:.1f}%" for k, v in sorted(recalls.items())))
        return r1, {"type": "eval", "round": rounds_done, "recall": {str(k): v for k, v in sorted(recalls.items())}}

    def _start(self, theta0: ParamVector) -> FederationResult:
        result = FederationResult(final_params=theta0, best_params=theta0)
        _, eval_record = self._evaluate(theta0, 0, result)
        if eval_record:
            self._emit(eval_record)
        return result

    def _close_round(self, record: RoundRecord, theta: ParamVector, result: FederationResult, evaluate: bool):
        """Evaluates when due, then emits the round record followed by its eval record."""
        eval_record = None
        if evaluate:
            record.validation_r1, eval_record = self._evaluate(theta, record.round_index + 1, result)
        self._emit(record.to_record())
        if eval_record:
            self._emit(eval_record)
        result.records.append(record)

    @staticmethod
    def _finish(result: FederationResult, theta: ParamVector) -> FederationResult:
        result.final_params = theta
        if result.best_recall is None:
            result.best_params = theta
        return result

    @staticmethod
    def _usable(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
        return [u for u in updates if u.n_samples > 0]

    @staticmethod
    def _round_record(round_index: int, selected, updates: Sequence[ClientUpdate], theta: ParamVector,
                      skipped: bool, cluster_id: str | None = None) -> RoundRecord:
        losses = [u.stats.mean_loss for u in updates if u.n_samples > 0]
        return RoundRecord(
            round_index=round_index, selected=tuple(selected),
            clients=[u.stats.to_record() for u in updates if u.stats is not None],
            n_samples=sum(u.n_samples for u in updates), mean_loss=float(np.mean(losses)) if losses else None,
            checksum=theta.checksum(), skipped=skipped, cluster_id=cluster_id,
        )


class FederatedTrainer(_RoundRunner):
    """Flat federated training: T synchronous rounds of select -> local_train -> aggregate."""

    def __init__(self, cfg: FederationConfig, spec: EmbedderSpec, mining: MiningConfig, local: LocalTrainConfig,
                 **kwargs):
        if cfg.local_iterations is not None:
            local = local.model_copy(update={"fixed_iterations": cfg.local_iterations})
        super().__init__(spec, mining, local, **kwargs)
        self.cfg = cfg
        self.server_state = init_state(cfg.server_optimizer, 0)
        logger.info(f"FederatedTrainer initialized: T={cfg.rounds}, {cfg.clients_per_round} clients/round, "
                    f"server {cfg.server_optimizer.value} (lr={cfg.effective_server_lr}, "
                    f"momentum={cfg.effective_server_momentum}), FedVC={cfg.fedvc}, workers={self.workers}")

    def _client_pool(self, clients: Sequence[ClientDataset]):
        if not self.cfg.fedvc:
            return sorted(clients, key=lambda c: c.client_id), None
        virtual_size = self.cfg.fedvc_virtual_size
        if virtual_size is None:
            if self.cfg.local_iterations is None:
                raise ConfigError("FedVC needs federation.fedvc_virtual_size or federation.local_iterations")
            virtual_size = self.local.batch_triplets * self.cfg.local_iterations
        return make_virtual_clients(clients, virtual_size, seed=self.cfg.seed)

    def aggregate(self, theta: ParamVector, updates: Sequence[ClientUpdate], server_state: OptimizerState):
        """One server update; plain FedAvg (SGD, lr 1) uses the weighted average directly."""
        if self.cfg.is_plain_fedavg:
            return fedavg_aggregate(theta, updates), server_state
        if not server_state.matches(self.cfg.server_optimizer, theta.size):
            server_state = init_state(self.cfg.server_optimizer, theta.size)
        return server_step(server_state, theta, pseudo_gradient(theta, updates), self.cfg)

    def run(self, clients: Sequence[ClientDataset], theta0: ParamVector) -> FederationResult:
        if not clients:
            raise ConfigError("FederatedTrainer: no training clients")
        pool, weights = self._client_pool(clients)
        by_id = {c.client_id: c for c in pool}
        ids = [c.client_id for c in pool]
        pool_weights = [weights[i] for i in ids] if weights is not None else None
        result = self._start(theta0)

        theta = theta0
        for t in range(self.cfg.rounds):
            started = time.perf_counter()
            self._report_progress(f"Round {t + 1}/{self.cfg.rounds}", int(100 * t / max(self.cfg.rounds, 1)))
            selected = select_clients(ids, t, self.cfg.clients_per_round, self.cfg.seed, pool_weights)
            updates = self._train_selected(theta, [by_id[i] for i in selected], t)
            usable = self._usable(updates)
            if usable:
                theta, self.server_state = self.aggregate(theta, usable, self.server_state)
            else:
                logger.warning(f"FederatedTrainer: round {t}: no selected client produced an update; round skipped.")
            record = self._round_record(t, selected, updates, theta, skipped=not usable)
            self._close_round(record, theta, result, evaluate=eval_due(t, self.cfg.rounds, self.cfg.eval_interval))
            logger.debug(f"FederatedTrainer: round {t} done in {time.perf_counter() - started:.2f}s "
                         f"(checksum {record.checksum}).")

        self._report_progress("Federated training complete.", 100)
        return self._finish(result, theta)


def run_federation(cfg: FederationConfig, clients: Sequence[ClientDataset], theta0: ParamVector,
                   spec: EmbedderSpec, mining: MiningConfig = MiningConfig(),
                   local: LocalTrainConfig = LocalTrainConfig(), **kwargs) -> tuple[ParamVector, list[RoundRecord]]:
    result = FederatedTrainer(cfg, spec, mining, local, **kwargs).run(clients, theta0)
    return result.final_params, result.records


class CentralizedTrainer(_RoundRunner):
    """Epoch loop over one pooled dataset with a persistent local optimizer and early stopping."""

    def __init__(self, epochs: int, spec: EmbedderSpec, mining: MiningConfig, local: LocalTrainConfig,
                 patience: int | None = 5, **kwargs):
        super().__init__(spec, mining, local, **kwargs)
        self.epochs = epochs
        self.patience = patience

    def run(self, dataset: ClientDataset, theta0: ParamVector) -> FederationResult:
        result = self._start(theta0)
        theta, state = theta0, None
        since_best = 0
        for epoch in range(self.epochs):
            self._report_progress(f"Epoch {epoch + 1}/{self.epochs}", int(100 * epoch / max(self.epochs, 1)))
            theta, stats = local_train(theta, dataset, self.spec, self.mining, self.local, self.augment,
                                       round_index=epoch, optimizer_state=state)
            state = stats.optimizer_state
            update = ClientUpdate(dataset.client_id, theta, stats.n_samples, stats)
            record = self._round_record(epoch, (dataset.client_id,), [update], theta, skipped=stats.n_samples == 0)
            previous_best = result.best_recall
            self._close_round(record, theta, result, evaluate=True)
            if record.validation_r1 is None:
                continue
            since_best = 0 if previous_best is None or record.validation_r1 > previous_best else since_best + 1
            if self.patience is not None and since_best >= self.patience:
                logger.info(f"CentralizedTrainer: early stop after epoch {epoch + 1}; "
                            f"no R@1 improvement for {self.patience} epochs.")
                result.stopped_early = True
                break
        self._report_progress("Centralized training complete.", 100)
        return self._finish(result, theta)


def run_centralized(dataset: ClientDataset, theta0: ParamVector, epochs: int, spec: EmbedderSpec,
                    mining: MiningConfig = MiningConfig(), local: LocalTrainConfig = LocalTrainConfig(),
                    **kwargs) -> tuple[ParamVector, list[RoundRecord]]:
    result = CentralizedTrainer(epochs, spec, mining, local, **kwargs).run(dataset, theta0)
    return result.final_params, result.records
