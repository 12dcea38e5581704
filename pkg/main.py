# main.py
import logging
import os
from typing import List, Optional

import typer
from tqdm import tqdm

from utils import constants
from utils.config_manager import ConfigManager
from utils.logging_setup import LOG_DIRECTORY, setup_logging
from core.errors import ConfigError, EvaluationError
from core.experiment import ExperimentRunner, build_eval_set
from core.experiment_config import ExperimentConfig
from core.manifest import read_manifest, write_manifest
from core.model import ParamVector
from core.partition import hold_out_validation, make_split, partition_stats, read_partition, write_partition
from core.recipes import expand_recipe
from core.reporting import format_summary, key_value_table, load_runs, recall_table, summarize
from core.retrieval_eval import EvalSet, recall_at_k, write_per_query
from core.synthdata import generate_world, world_stats

logger = logging.getLogger(__name__)

app = typer.Typer(add_completion=False, help="Federated contrastive place-recognition simulator.")

ConfigOption = typer.Option(None, "--config", "-c", help="INI experiment configuration.")
SetOption = typer.Option(None, "--set", help="Override a config value: section.key=value (repeatable).")


class TqdmProgress:
    """progress_callback(message, percentage) drawn on a tqdm bar."""

    def __init__(self, description: str):
        self.bar = tqdm(total=100, desc=description, leave=False, unit="%")

    def __call__(self, message, percentage=None):
        if percentage is not None:
            self.bar.n = max(0, min(100, int(percentage)))
        self.bar.set_postfix_str(message, refresh=True)

    def close(self):
        self.bar.close()


def _load_config(config_path: Optional[str], overrides: Optional[List[str]], extra: Optional[List[str]] = None) -> ExperimentConfig:
    manager = ConfigManager(config_path)
    manager.apply_overrides(overrides)
    manager.apply_overrides(extra)
    return manager.load_experiment()


def _run_command(name: str, body):
    """Runs a command body and maps failures onto exit codes."""
    try:
        body()
    except typer.Exit:
        raise
    except ConfigError as e:
        logger.error(f"{name}: configuration error: {e}")
        typer.echo(f"Configuration error: {e}", err=True)
        raise typer.Exit(code=constants.EXIT_CONFIG_ERROR)
    except Exception as e:
        logger.error(f"{name}: failed: {e}", exc_info=True)
        typer.echo(f"Error: {e}", err=True)
        raise typer.Exit(code=constants.EXIT_RUNTIME_ERROR)


@app.callback()
def main(
    log_level: str = typer.Option("INFO", "--log-level", help="DEBUG, INFO, WARNING or ERROR."),
    log_dir: str = typer.Option(LOG_DIRECTORY, "--log-dir", help="Directory for the session log file."),
    no_log_file: bool = typer.Option(False, "--no-log-file", help="Log to the console only."),
):
    setup_logging(getattr(logging, log_level.upper(), constants.ACTIVE_LOG_LEVEL), log_dir, not no_log_file)


@app.command()
def generate(
    config: Optional[str] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    output: str = typer.Option("manifest.csv", "--output", "-o", help="Manifest file to write."),
):
    """Generate a synthetic world and write its manifest."""
    def body():
        cfg = _load_config(config, overrides)
        manifest = generate_world(cfg.world)
        write_manifest(manifest, output)
        typer.echo(key_value_table(world_stats(manifest).as_rows()))
        typer.echo(f"Manifest written to {output}")
    _run_command("generate", body)


@app.command()
def partition(
    config: Optional[str] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    manifest_path: Optional[str] = typer.Option(None, "--manifest", "-m", help="Manifest file (default: generate)."),
    output: str = typer.Option("partition.jsonl", "--output", "-o", help="Partition file to write."),
):
    """Split a manifest into clients, hold out validation clients and print the split statistics."""
    def body():
        cfg = _load_config(config, overrides)
        manifest = _manifest_for(cfg, manifest_path)
        clients = make_split(manifest, cfg.partition)
        if not clients:
            raise ConfigError(f"the {cfg.partition.kind.value} split produced no valid clients")
        train, val = hold_out_validation(clients, cfg.partition.validation_clients, cfg.partition.seed)
        write_partition(train + val, output)
        stats = partition_stats(train + val, manifest)
        typer.echo(key_value_table([
            ("split", cfg.partition.kind.value), ("clients", stats.n_clients),
            ("training clients", len(train)), ("validation clients", len(val)),
            ("sequences per client", f"{stats.seqs_mean:.1f} ± {stats.seqs_std:.1f}"),
            ("images per client", f"{stats.images_mean:.1f} ± {stats.images_std:.1f}"),
        ]))
        typer.echo(f"Partition written to {output}")
    _run_command("partition", body)


def _manifest_for(cfg: ExperimentConfig, manifest_path: Optional[str]):
    path = manifest_path or cfg.run.manifest_path
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"manifest file not found: {path}")
        return read_manifest(path)
    return generate_world(cfg.world)


@app.command()
def train(
    config: Optional[str] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    recipe: Optional[str] = typer.Option(None, "--recipe", help="Run a named experiment grid."),
    workers: Optional[int] = typer.Option(None, "--workers", help="Parallel clients per round."),
    output_dir: Optional[str] = typer.Option(None, "--output-dir", help="Directory for metrics and checkpoints."),
    seeds: Optional[str] = typer.Option(None, "--seeds", help="Comma-separated run seeds."),
    manifest_path: Optional[str] = typer.Option(None, "--manifest", "-m"),
    partition_path: Optional[str] = typer.Option(None, "--partition", "-p"),
):
    """Run centralized, federated or hierarchical training (or a whole recipe grid)."""
    def body():
        flags = [f"run.{key}={value}" for key, value in (
            ("workers", workers), ("output_dir", output_dir), ("seeds", seeds),
            ("manifest_path", manifest_path), ("partition_path", partition_path)) if value is not None]
        cfg = _load_config(config, overrides, flags)
        points = expand_recipe(recipe, cfg) if recipe else None
        failed = False
        for grid, point_cfg in ([(p.grid, p.config) for p in points] if points else [({}, cfg)]):
            progress = TqdmProgress(" ".join(f"{k}={v}" for k, v in grid.items()) or "train")
            try:
                result = ExperimentRunner(point_cfg, progress_callback=progress, grid=grid).run()
            finally:
                progress.close()
            typer.echo(f"[{result.status}] {' '.join(f'{k}={v}' for k, v in grid.items())} {result.message}".strip())
            failed = failed or result.status == constants.STATUS_ERROR
        if points:
            typer.echo(format_summary(summarize(load_runs([os.path.join(cfg.run.output_dir, recipe)]))))
        if failed:
            raise typer.Exit(code=constants.EXIT_RUNTIME_ERROR)
    _run_command("train", body)


@app.command(name="eval")
def evaluate(
    checkpoint: Optional[str] = typer.Option(None, "--checkpoint", help="ParamVector file (default: raw features)."),
    config: Optional[str] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    manifest_path: Optional[str] = typer.Option(None, "--manifest", "-m"),
    partition_path: Optional[str] = typer.Option(None, "--partition", "-p",
                                                 help="Evaluate on the partition's validation clients."),
    ks: Optional[str] = typer.Option(None, "--ks", help="Comma-separated k values."),
    per_query_out: Optional[str] = typer.Option(None, "--per-query-out", help="Write per-query outcomes here."),
):
    """Recall@k of a checkpoint on a manifest (all queries) or a partition's validation clients."""
    def body():
        cfg = _load_config(config, overrides, [f"eval.ks={ks}"] if ks else None)
        manifest = _manifest_for(cfg, manifest_path)
        if partition_path:
            if not os.path.exists(partition_path):
                raise ConfigError(f"partition file not found: {partition_path}")
            clients = read_partition(partition_path, manifest)
            val = [c for c in clients if c.split == constants.SPLIT_VAL] or clients
            eval_set = build_eval_set(manifest, val, cfg.eval.positive_radius)
            if eval_set is None:
                raise EvaluationError(f"no database images among the evaluated clients of {partition_path}")
        else:
            eval_set = EvalSet.build(manifest.queries(), manifest.database(), cfg.eval.positive_radius)
        theta = None
        if checkpoint:
            if not os.path.exists(checkpoint):
                raise ConfigError(f"checkpoint not found: {checkpoint}")
            theta = ParamVector.load(checkpoint)
            if theta.size != cfg.model.param_count:
                raise ConfigError(f"checkpoint has {theta.size} parameters; [model] expects {cfg.model.param_count}")
        result = recall_at_k(theta, cfg.model, eval_set, cfg.eval.ks, workers=cfg.run.workers)
        typer.echo(recall_table(result.recalls))
        typer.echo(f"{result.n_queries} queries evaluated, {result.excluded_queries} without a ground-truth positive.")
        if per_query_out or cfg.eval.per_query:
            write_per_query(result, eval_set, per_query_out or os.path.join(cfg.run.output_dir, "per_query.jsonl"))
    _run_command("eval", body)


@app.command()
def report(paths: List[str] = typer.Argument(..., help="Metrics files or directories holding them.")):
    """Summary table (mean ± population std over seeds) per grid point."""
    def body():
        runs = load_runs(paths)
        typer.echo(format_summary(summarize(runs)))
    _run_command("report", body)


if __name__ == "__main__":
    app()
