# core/recipes.py
"""Named experiment grids reproducing the study designs at desk scale. Each grid point is a full
ExperimentConfig with its own output subdirectory."""
import logging
import os
from dataclasses import dataclass

from .contrastive import AugmentMode
from .errors import ConfigError
from .experiment_config import ExperimentConfig, RunMode
from .hierarchy import ClusterLevel
from .optimizers import OptimizerKind
from .partition import SplitKind

logger = logging.getLogger(__name__)

ITERATIONS_TOTAL = 600
ITERATIONS_LOCAL = (2, 5, 10, 30)
MINING_RESTRICTIONS = ((None, None), (333, 3), (20, 50))
AGGREGATION_INTERVALS = (1, 5, 15, 30)


@dataclass(frozen=True)
class GridPoint:
    grid: dict
    config: ExperimentConfig

    @property
    def name(self) -> str:
        return "_".join(f"{k}-{v}" for k, v in self.grid.items())


def _point(base: ExperimentConfig, recipe: str, grid: dict, **updates) -> GridPoint:
    name = "_".join(f"{k}-{v}" for k, v in grid.items())
    updates.setdefault("run", {})["output_dir"] = os.path.join(base.run.output_dir, recipe, name)
    return GridPoint(grid, base.with_overrides(**updates))


def splits(base: ExperimentConfig) -> list[GridPoint]:
    return [_point(base, "splits", {"split": kind.value}, partition={"kind": kind},
                   run={"mode": RunMode.FEDERATED})
            for kind in SplitKind]


def server_optimizers(base: ExperimentConfig) -> list[GridPoint]:
    # server_lr / server_momentum cleared so each optimizer gets its own defaults
    return [_point(base, "server_optimizers", {"server_opt": kind.value},
                   federation={"server_optimizer": kind, "server_lr": None, "server_momentum": None},
                   run={"mode": RunMode.FEDERATED})
            for kind in OptimizerKind]


def iterations(base: ExperimentConfig, total: int = ITERATIONS_TOTAL, local_values=ITERATIONS_LOCAL) -> list[GridPoint]:
    """Fixed total budget I_tot; each I_loc gets T = I_tot / (I_loc * C) rounds, with and without FedVC."""
    clients = base.federation.clients_per_round
    points = []
    for local in local_values:
        if total % (local * clients):
            raise ConfigError(f"iterations recipe: I_tot={total} is not divisible by I_loc * C = {local * clients}")
        rounds = total // (local * clients)
        for fedvc in (False, True):
            points.append(_point(
                base, "iterations", {"local_iterations": local, "fedvc": "yes" if fedvc else "no"},
                run={"mode": RunMode.FEDERATED},
                federation={"rounds": rounds, "local_iterations": local, "total_iterations": total, "fedvc": fedvc,
                            "eval_interval": min(base.federation.eval_interval, rounds)},
            ))
    return points


def augmentation(base: ExperimentConfig) -> list[GridPoint]:
    return [_point(base, "augmentation", {"augment": mode.value}, augment={"mode": mode},
                   run={"mode": RunMode.FEDERATED})
            for mode in AugmentMode]


def mining(base: ExperimentConfig) -> list[GridPoint]:
    """Centralized training on the pooled server database, with negatives mined from the whole database or
    only from the sequences nearest each query."""
    points = []
    for n_seq, per_seq in MINING_RESTRICTIONS:
        label = "full" if n_seq is None else f"{n_seq}x{per_seq}"
        points.append(_point(base, "mining", {"pool": label}, run={"mode": RunMode.CENTRALIZED},
                             mining={"pool_max_sequences": n_seq, "pool_images_per_sequence": per_seq}))
    return points


def interval(base: ExperimentConfig, values=AGGREGATION_INTERVALS) -> list[GridPoint]:
    return [_point(base, "interval", {"T_s": t_s}, run={"mode": RunMode.HIERARCHICAL},
                   hierarchy={"aggregation_interval": t_s})
            for t_s in values]


def hierarchy(base: ExperimentConfig) -> list[GridPoint]:
    """Flat runs with clients per round matched to clusters x per-cluster clients, against city and continent H-FL."""
    per_cluster = base.hierarchy.clients_per_cluster_per_round
    n_continents = len(set(base.world.continents)) if base.world.continents else min(base.world.n_continents,
                                                                                       base.world.n_cities)
    points = []
    for level, n_clusters in ((ClusterLevel.CITY, base.world.n_cities), (ClusterLevel.CONTINENT, n_continents)):
        points.append(_point(base, "hierarchy", {"setup": f"flat-{level.value}"}, run={"mode": RunMode.FEDERATED},
                             federation={"clients_per_round": n_clusters * per_cluster}))
        points.append(_point(base, "hierarchy", {"setup": f"hfl-{level.value}"}, run={"mode": RunMode.HIERARCHICAL},
                             hierarchy={"level": level}))
    return points


RECIPES = {
    "splits": splits,
    "server_optimizers": server_optimizers,
    "iterations": iterations,
    "augmentation": augmentation,
    "mining": mining,
    "interval": interval,
    "hierarchy": hierarchy,
}


def expand_recipe(name: str, base: ExperimentConfig) -> list[GridPoint]:
    if name not in RECIPES:
        raise ConfigError(f"unknown recipe '{name}'; available: {', '.join(sorted(RECIPES))}")
    points = RECIPES[name](base)
    logger.info(f"expand_recipe: '{name}' has {len(points)} grid points.")
    return points
