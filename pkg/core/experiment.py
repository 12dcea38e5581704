# core/experiment.py
import json
import logging
import os
import time

import numpy as np

from utils import constants
from utils.metrics_writer import MetricsWriter
from .contrastive import ClientDataset
from .errors import ConfigError, SimulationError
from .experiment_config import ExperimentConfig, RunMode
from .federation import CentralizedTrainer, FederatedTrainer, FederationResult
from .hierarchy import HierarchicalTrainer
from .manifest import Manifest, read_manifest
from .model import ParamVector, init_params
from .partition import ClientManifest, hold_out_validation, make_split, partition_stats, read_partition
from .retrieval_eval import EvalSet
from .seeding import seed_for
from .synthdata import generate_world

logger = logging.getLogger(__name__)


class ExperimentResult:
    def __init__(self, status, data=None, message=None):
        self.status = status
        self.data = data
        self.message = message


def _unique_by_id(samples):
    seen = {}
    for s in samples:
        seen.setdefault(s.id, s)
    return [seen[i] for i in sorted(seen)]


def build_client_datasets(manifest: Manifest, clients, cfg: ExperimentConfig) -> list[ClientDataset]:
    datasets = []
    for c in clients:
        datasets.append(ClientDataset.build(c.client_id, manifest.collect(c.query_seqs), manifest.collect(c.db_seqs),
                                            cfg.mining, city_id=c.city_id, continent_id=c.continent_id))
    return datasets


def build_eval_set(manifest: Manifest, clients, positive_radius: float) -> EvalSet | None:
    """Union of the given clients' queries and databases; None when there are no clients."""
    if not clients:
        return None
    queries = _unique_by_id(s for c in clients for s in manifest.collect(c.query_seqs))
    database = _unique_by_id(s for c in clients for s in manifest.collect(c.db_seqs))
    if not database:
        return None
    return EvalSet.build(queries, database, positive_radius)


def pooled_dataset(manifest: Manifest, clients, cfg: ExperimentConfig, client_id: str = "centralized") -> ClientDataset:
    """One dataset over the distinct sequences of all given clients."""
    query_seqs = sorted({s for c in clients for s in c.query_seqs})
    db_seqs = sorted({s for c in clients for s in c.db_seqs})
    return ClientDataset.build(client_id, manifest.collect(query_seqs), manifest.collect(db_seqs), cfg.mining)


def seeded_config(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Per-run copy whose training streams (selection, batches, augmentation) derive from the run seed."""
    return cfg.model_copy(update={
        "federation": cfg.federation.model_copy(update={"seed": seed_for(cfg.federation.seed, seed, "select")}),
        "local": cfg.local.model_copy(update={"seed": seed_for(cfg.local.seed, seed, "local")}),
        "augment": cfg.augment.model_copy(update={"seed": seed_for(cfg.augment.seed, seed, "augment")}),
    })


class ExperimentRunner:
    """Loads or generates the data, partitions it and runs one training per seed, writing metrics and checkpoints."""

    def __init__(self, cfg: ExperimentConfig, progress_callback=None, grid: dict | None = None):
        self.cfg = cfg
        self.progress_callback = progress_callback
        self.grid = dict(grid or {})
        self.output_dir = cfg.run.output_dir
        logger.info(f"ExperimentRunner initializing. Mode: {cfg.run.mode.value}, seeds: {list(cfg.run.seeds)}, "
                    f"output: {self.output_dir}")

    def _report_progress(self, message: str, percentage: int = None):
        if self.progress_callback:
            try:
                self.progress_callback(message, percentage)
            except Exception as e:
                logger.error(f"Error in ExperimentRunner's progress_callback: {e}", exc_info=True)

    def load_manifest(self) -> Manifest:
        path = self.cfg.run.manifest_path
        if path:
            if not os.path.exists(path):
                raise ConfigError(f"run.manifest_path does not exist: {path}")
            manifest = read_manifest(path)
        else:
            manifest = generate_world(self.cfg.world)
        if manifest.feature_dim != self.cfg.model.input_dim:
            raise ConfigError(f"model.input_dim ({self.cfg.model.input_dim}) does not match the manifest's "
                              f"feature_dim ({manifest.feature_dim})")
        return manifest

    def load_clients(self, manifest: Manifest) -> tuple[list[ClientManifest], list[ClientManifest]]:
        path = self.cfg.run.partition_path
        if path:
            if not os.path.exists(path):
                raise ConfigError(f"run.partition_path does not exist: {path}")
            clients = read_partition(path, manifest)
            train = [c for c in clients if c.split == constants.SPLIT_TRAIN]
            val = [c for c in clients if c.split == constants.SPLIT_VAL]
        else:
            clients = make_split(manifest, self.cfg.partition)
            train, val = hold_out_validation(clients, self.cfg.partition.validation_clients, self.cfg.partition.seed)
        if not train:
            raise ConfigError("the partition has no training clients")
        return train, val

    def run(self) -> ExperimentResult:
        """Config problems raise ConfigError before any training; failures during training come back as STATUS_ERROR."""
        started = time.perf_counter()
        self._report_progress("Preparing data...", 0)
        manifest = self.load_manifest()
        train, val = self.load_clients(manifest)
        datasets = build_client_datasets(manifest, train, self.cfg)
        validation = build_eval_set(manifest, val, self.cfg.eval.positive_radius)
        stats = partition_stats(train, manifest)
        n_val_queries = len(validation.queries) if validation else 0
        logger.info(f"ExperimentRunner: {len(train)} training clients, {len(val)} validation clients, "
                    f"{n_val_queries} validation queries.")

        runs = []
        seeds = self.cfg.run.seeds
        try:
            for i, seed in enumerate(seeds):
                self._report_progress(f"Seed {seed} ({i + 1}/{len(seeds)})", int(100 * i / len(seeds)))
                runs.append(self._run_seed(seed, manifest, train, datasets, validation, stats.as_dict()))
        except ConfigError:
            raise
        except (SimulationError, ArithmeticError, ValueError, OSError) as e:
            logger.error(f"ExperimentRunner: run failed: {e}", exc_info=True)
            return ExperimentResult(constants.STATUS_ERROR, {"runs": runs}, f"Training failed: {e}")

        summary = summarize_runs(runs)
        summary["grid"] = self.grid
        write_summary(summary, os.path.join(self.output_dir, constants.SUMMARY_FILE_NAME))
        logger.info(f"ExperimentRunner: {len(runs)} runs finished in {time.perf_counter() - started:.1f}s.")
        self._report_progress("Experiment complete.", 100)
        if summary["final_r1_mean"] is None:
            return ExperimentResult(constants.STATUS_EMPTY, {"runs": runs, "summary": summary},
                                    "Training finished without a validation set; no recall to report.")
        return ExperimentResult(constants.STATUS_SUCCESS, {"runs": runs, "summary": summary},
                                f"Final R@1 {100 * summary['final_r1_mean']:.1f} ± {100 * summary['final_r1_std']:.1f}")

    def _run_seed(self, seed: int, manifest: Manifest, train, datasets, validation, stats: dict) -> dict:
        cfg = seeded_config(self.cfg, seed)
        theta0 = init_params(cfg.model, seed_for(seed, "init"))
        metrics_path = os.path.join(self.output_dir, constants.METRICS_FILE_TEMPLATE.format(seed=seed))

        with MetricsWriter(metrics_path) as writer:
            writer.write({"type": constants.RECORD_RUN_CONFIG, "seed": seed, "mode": cfg.run.mode.value,
                          "grid": self.grid, "partition": stats, "n_train_clients": len(train),
                          "n_validation_queries": len(validation.queries) if validation else 0,
                          "config": recorded_config(self.cfg)})
            result = self._train(cfg, manifest, train, datasets, validation, theta0, writer.write)
            record = run_result_record(seed, result)
            writer.write(record)

        if cfg.run.save_checkpoints:
            self._save_checkpoints(seed, result)
        return record

    def _train(self, cfg: ExperimentConfig, manifest, train, datasets, validation, theta0: ParamVector,
               sink) -> FederationResult:
        common = dict(augment=cfg.augment, validation=validation, eval_ks=cfg.eval.ks, workers=cfg.run.workers,
                      progress_callback=self.progress_callback, record_sink=sink)
        if cfg.run.mode == RunMode.CENTRALIZED:
            trainer = CentralizedTrainer(cfg.run.epochs, cfg.model, cfg.mining, cfg.local,
                                         patience=cfg.run.patience or None, **common)
            return trainer.run(pooled_dataset(manifest, train, cfg), theta0)
        if cfg.run.mode == RunMode.HIERARCHICAL:
            trainer = HierarchicalTrainer(cfg.federation, cfg.hierarchy, cfg.model, cfg.mining, cfg.local, **common)
            return trainer.run(datasets, theta0)
        return FederatedTrainer(cfg.federation, cfg.model, cfg.mining, cfg.local, **common).run(datasets, theta0)

    def _save_checkpoints(self, seed: int, result: FederationResult):
        directory = os.path.join(self.output_dir, constants.CHECKPOINT_DIR_NAME)
        os.makedirs(directory, exist_ok=True)
        result.final_params.save(os.path.join(directory, constants.FINAL_CHECKPOINT_TEMPLATE.format(seed=seed)))
        result.best_params.save(os.path.join(directory, constants.BEST_CHECKPOINT_TEMPLATE.format(seed=seed)))


def run_result_record(seed: int, result: FederationResult) -> dict:
    final = result.evaluations[-1][1] if result.evaluations else {}
    initial = result.evaluations[0][1] if result.evaluations and result.evaluations[0][0] == 0 else {}
    return {
        "type": constants.RECORD_RUN_RESULT, "seed": seed,
        "final_recall": {str(k): v for k, v in sorted(final.items())},
        "initial_recall": {str(k): v for k, v in sorted(initial.items())},
        "best_r1": result.best_recall, "best_round": result.best_round,
        "rounds": len({r.round_index for r in result.records}), "stopped_early": result.stopped_early,
        "final_checksum": result.final_params.checksum(),
    }


def summarize_runs(runs: list[dict]) -> dict:
    """Mean and population std of final and best R@1 over seeds."""
    final = [r["final_recall"]["1"] for r in runs if "1" in r["final_recall"]]
    best = [r["best_r1"] for r in runs if r["best_r1"] is not None]
    return {
        "seeds": [r["seed"] for r in runs],
        "final_r1_mean": float(np.mean(final)) if final else None,
        "final_r1_std": float(np.std(final)) if final else None,
        "best_r1_mean": float(np.mean(best)) if best else None,
        "best_r1_std": float(np.std(best)) if best else None,
    }


def write_summary(summary: dict, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(summary, handle, sort_keys=True, indent=2)
        handle.write("\n")


def recorded_config(cfg: ExperimentConfig) -> dict:
    """Config sections as written into metrics files; the output location is left out so reruns elsewhere match."""
    sections = cfg.to_sections()
    sections["run"].pop("output_dir", None)
    return sections
