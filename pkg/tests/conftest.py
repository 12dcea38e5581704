# tests/conftest.py
import numpy as np
import pytest

from core.contrastive import ClientDataset, LocalTrainConfig, MiningConfig
from core.experiment_config import ExperimentConfig
from core.geo import GeoSample, GeoTag, Role, local_offset_to_tag
from core.model import EmbedderSpec, init_params
from core.optimizers import OptimizerKind
from core.synthdata import WorldSpec, generate_world

ORIGIN = GeoTag(45.0, 7.0)


def make_sample(sample_id, east_m, north_m, feat, seq_id="s0", city_id="c0", role=Role.DATABASE, origin=ORIGIN):
    return GeoSample(sample_id, local_offset_to_tag(origin, east_m, north_m), np.asarray(feat, dtype=np.float64),
                     seq_id, city_id, role)


def make_client(client_id, n_queries, feature_dim=4, seed=0, spacing=40.0, city_id="c0", id_offset=0):
    """A client whose database sits on a line every `spacing` meters; each query is 3 m from one db image."""
    rng = np.random.default_rng(seed)
    database = [make_sample(id_offset + i, spacing * i, 0.0, rng.normal(size=feature_dim),
                            seq_id=f"{client_id}-db{i // 4}", city_id=city_id)
                for i in range(n_queries + 3)]
    queries = [make_sample(id_offset + 10_000 + i, spacing * i, 3.0, rng.normal(size=feature_dim),
                           seq_id=f"{client_id}-q{i // 4}", city_id=city_id, role=Role.QUERY)
               for i in range(n_queries)]
    return ClientDataset.build(client_id, queries, database, MiningConfig(n_neg=2), city_id=city_id,
                               continent_id="k0")


@pytest.fixture(scope="session")
def tiny_world_spec():
    return WorldSpec(n_cities=2, n_continents=2, sequences_per_city=16, images_per_sequence=4, city_extent=600.0,
                     feature_dim=8, place_dim=4, seed=3)


@pytest.fixture(scope="session")
def tiny_manifest(tiny_world_spec):
    return generate_world(tiny_world_spec)


@pytest.fixture
def small_embedder():
    return EmbedderSpec(input_dim=4, hidden_dims=(6,), output_dim=3)


@pytest.fixture
def small_theta(small_embedder):
    return init_params(small_embedder, seed=11)


@pytest.fixture
def sgd_local():
    return LocalTrainConfig(local_lr=1e-2, local_optimizer=OptimizerKind.SGD, batch_triplets=2, seed=5)


@pytest.fixture
def tiny_experiment(tmp_path, tiny_world_spec):
    """A complete desk-sized experiment that trains in seconds."""
    return ExperimentConfig().with_overrides(
        run={"seeds": (0,), "output_dir": str(tmp_path / "runs"), "epochs": 3},
        world=tiny_world_spec.model_dump(),
        partition={"radius": 300.0, "validation_clients": 2},
        model={"input_dim": 8, "hidden_dims": (8,), "output_dim": 4},
        mining={"n_neg": 3},
        local={"local_lr": 1e-3},
        federation={"rounds": 3, "clients_per_round": 2, "eval_interval": 1},
        hierarchy={"clients_per_cluster_per_round": 1, "aggregation_interval": 2},
        eval={"ks": (1, 5)},
    )
