# tests/test_contrastive.py
import logging

import numpy as np
import pytest

from core.contrastive import (AugmentMode, AugmentSpec, ClientDataset, LocalTrainConfig, MiningConfig,
                              NegativeStrategy, apply_augmentation, client_jitter, local_train, mine_negatives,
                              mine_positive, planned_iterations, restrict_mining_pool, triplet_loss, triplets_for)
from core.errors import UnusableQueryError
from core.geo import GeoTag, Role, geo_distance
from core.model import EmbedderSpec, embed, init_params
from core.optimizers import OptimizerKind
from tests.conftest import make_client, make_sample


def _random_pool(rng, size):
    pool = []
    for i in range(size):
        # the first few always fall inside the positive radius
        radius = rng.uniform(0, 15) if i < 3 else rng.uniform(0, 150)
        angle = rng.uniform(0, 2 * np.pi)
        pool.append(make_sample(int(rng.integers(0, 10**6)) * 1000 + i, radius * np.cos(angle),
                                radius * np.sin(angle), rng.normal(size=4)))
    return pool


class TestTripletLoss:
    def test_hinge(self):
        assert triplet_loss(1.0, 2.0, 0.1) == 0.0
        assert triplet_loss(2.0, 1.0, 0.1) == pytest.approx(3.1)
        assert triplet_loss(1.0, 1.0, 0.5) == 0.5

    def test_non_negative(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            assert triplet_loss(*rng.uniform(0, 2, size=2), 0.1) >= 0.0


class TestMining:
    @pytest.mark.parametrize("trial", range(100))
    def test_matches_brute_force(self, trial, small_embedder):
        rng = np.random.default_rng(trial)
        pool = _random_pool(rng, int(rng.integers(10, 200)))
        query = make_sample(-1, 0.0, 0.0, rng.normal(size=4), role=Role.QUERY)
        theta = init_params(small_embedder, seed=trial)
        mining = MiningConfig(tau=25.0, n_neg=5)

        q_desc = embed(theta, small_embedder, query.feat)[0]
        scored = [(float(np.linalg.norm(embed(theta, small_embedder, s.feat)[0] - q_desc)), s.id, s) for s in pool]
        positives = sorted((d, i) for d, i, s in scored if geo_distance(query.tag, s.tag) < 25.0)
        negatives = sorted((d, i) for d, i, s in scored if geo_distance(query.tag, s.tag) >= 25.0)

        assert mine_positive(query, pool, theta, small_embedder, mining) == positives[0][1]
        assert mine_negatives(query, pool, theta, small_embedder, mining) == [i for _, i in negatives[:5]]

    def test_independent_of_pool_order(self, small_embedder, small_theta):
        rng = np.random.default_rng(3)
        pool = _random_pool(rng, 60)
        query = make_sample(-1, 0.0, 0.0, rng.normal(size=4), role=Role.QUERY)
        shuffled = [pool[i] for i in rng.permutation(len(pool))]
        assert (mine_positive(query, pool, small_theta, small_embedder)
                == mine_positive(query, shuffled, small_theta, small_embedder))
        assert (mine_negatives(query, pool, small_theta, small_embedder)
                == mine_negatives(query, shuffled, small_theta, small_embedder))

    def test_no_positive(self, small_embedder, small_theta):
        pool = [make_sample(i, 0.0, 100.0 + i, np.ones(4)) for i in range(5)]
        query = make_sample(-1, 0.0, 0.0, np.ones(4), role=Role.QUERY)
        with pytest.raises(UnusableQueryError):
            mine_positive(query, pool, small_theta, small_embedder)

    def test_no_negative(self, small_embedder, small_theta):
        pool = [make_sample(i, 0.0, float(i), np.ones(4)) for i in range(5)]
        query = make_sample(-1, 0.0, 0.0, np.ones(4), role=Role.QUERY)
        with pytest.raises(UnusableQueryError):
            mine_negatives(query, pool, small_theta, small_embedder)

    def test_fewer_negatives_than_requested(self, small_embedder, small_theta):
        pool = [make_sample(0, 0.0, 0.0, np.ones(4)), make_sample(1, 0.0, 100.0, np.ones(4)),
                make_sample(2, 0.0, 200.0, np.zeros(4))]
        query = make_sample(-1, 0.0, 0.0, np.ones(4), role=Role.QUERY)
        assert sorted(mine_negatives(query, pool, small_theta, small_embedder, n_neg=5)) == [1, 2]

    def test_random_negatives_are_gps_negatives(self, small_embedder, small_theta):
        client = make_client("c", 6)
        mining = MiningConfig(n_neg=2, negative_strategy=NegativeStrategy.RANDOM)
        db_tags = {s.id: s.tag for s in client.database}
        for triplet in triplets_for(client, small_theta, small_embedder, mining, range(client.n_queries)):
            query = next(q for q in client.queries if q.id == triplet.query_id)
            assert len(triplet.negative_ids) == 2
            assert all(geo_distance(query.tag, db_tags[n]) >= mining.tau for n in triplet.negative_ids)
            assert geo_distance(query.tag, db_tags[triplet.positive_id]) < mining.tau


class TestClientDataset:
    def test_unusable_queries_excluded(self):
        db = [make_sample(i, 40.0 * i, 0.0, np.ones(4)) for i in range(4)]
        queries = [make_sample(100, 0.0, 3.0, np.ones(4), role=Role.QUERY),
                   make_sample(101, 0.0, 900.0, np.ones(4), role=Role.QUERY)]
        client = ClientDataset.build("c", queries, db, MiningConfig())
        assert [q.id for q in client.queries] == [100]
        assert client.unusable_queries == 1

    def test_empty_database(self):
        queries = [make_sample(100, 0.0, 3.0, np.ones(4), role=Role.QUERY)]
        client = ClientDataset.build("c", queries, [], MiningConfig())
        assert client.n_queries == 0
        assert client.unusable_queries == 1

    def test_subset_keeps_source(self):
        client = make_client("c", 5)
        shard = client.subset([0, 0, 3], "c#v00")
        assert shard.n_queries == 3
        assert shard.source_client_id == "c"
        assert shard.database is client.database


class TestRestrictedPool:
    def _database(self):
        # sequence k sits k * 100 m north of the origin with 5 images
        return [make_sample(10 * k + j, float(j), 100.0 * k, np.ones(2), seq_id=f"s{k}")
                for k in range(6) for j in range(5)]

    def test_nearest_sequences_with_capped_images(self):
        pool = restrict_mining_pool(self._database(), GeoTag(45.0, 7.0), n_seq=2, imgs_per_seq=3, seed=1)
        assert len(pool) == 6
        assert {s.seq_id for s in pool} == {"s0", "s1"}
        assert [s.id for s in pool] == sorted(s.id for s in pool)

    def test_deterministic(self):
        db = self._database()
        a = restrict_mining_pool(db, GeoTag(45.0, 7.0), 3, 2, seed=4)
        b = restrict_mining_pool(db[::-1], GeoTag(45.0, 7.0), 3, 2, seed=4)
        assert [s.id for s in a] == [s.id for s in b]

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            restrict_mining_pool(self._database(), GeoTag(45.0, 7.0), 0, 3)

    def test_mining_config_requires_both_limits(self):
        with pytest.raises(ValueError):
            MiningConfig(pool_max_sequences=3)


class TestAugmentation:
    def test_none_is_identity(self):
        x = np.arange(6, dtype=float)
        assert np.array_equal(apply_augmentation(x, AugmentSpec(), 1, 2), x)

    def test_uniform_with_zero_probability(self):
        x = np.arange(6, dtype=float)
        spec = AugmentSpec(mode=AugmentMode.UNIFORM, probability=0.0)
        assert np.array_equal(apply_augmentation(x, spec, 1, 2), x)

    def test_client_specific_jitter_is_fixed_per_client(self):
        spec = AugmentSpec(mode=AugmentMode.CLIENT_SPECIFIC, jitter_scale=0.2)
        x = np.ones(8)
        a = apply_augmentation(x, spec, client_seed=5, sample_seed=1)
        b = apply_augmentation(x, spec, client_seed=5, sample_seed=2)
        c = apply_augmentation(x, spec, client_seed=6, sample_seed=1)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert np.all((a >= 0.8) & (a <= 1.2))
        assert np.array_equal(a, client_jitter(spec, 5, 8))

    def test_crop_zeroes_a_block(self):
        spec = AugmentSpec(mode=AugmentMode.UNIFORM, probability=1.0, jitter_scale=0.0, crop_fraction=0.5)
        out = apply_augmentation(np.ones(10), spec, 0, 3)
        assert np.count_nonzero(out == 0.0) == 5


class TestLocalTrain:
    def test_planned_iterations(self):
        cfg = LocalTrainConfig(batch_triplets=2, max_local_iterations=10)
        assert planned_iterations(0, cfg) == 0
        assert planned_iterations(7, cfg) == 3
        assert planned_iterations(100, cfg) == 10
        assert planned_iterations(7, cfg.model_copy(update={"fixed_iterations": 25})) == 25

    def test_deterministic(self, small_embedder, small_theta, sgd_local):
        client = make_client("c", 8)
        a, stats_a = local_train(small_theta, client, small_embedder, MiningConfig(n_neg=2), sgd_local, round_index=3)
        b, stats_b = local_train(small_theta, client, small_embedder, MiningConfig(n_neg=2), sgd_local, round_index=3)
        assert a.values.tobytes() == b.values.tobytes()
        assert stats_a.n_samples == stats_b.n_samples == 4 * 2
        assert stats_a.iterations == 4

    def test_round_index_changes_the_batches(self, small_embedder, small_theta):
        client = make_client("c", 8)
        cfg = LocalTrainConfig(local_lr=1e-2, local_optimizer=OptimizerKind.SGD, batch_triplets=1,
                               fixed_iterations=8)
        a, _ = local_train(small_theta, client, small_embedder, MiningConfig(n_neg=2, margin=5.0), cfg, round_index=0)
        b, _ = local_train(small_theta, client, small_embedder, MiningConfig(n_neg=2, margin=5.0), cfg, round_index=1)
        assert not np.array_equal(a.values, b.values)

    def test_does_not_touch_the_start_vector(self, small_embedder, small_theta, sgd_local):
        before = small_theta.values.copy()
        local_train(small_theta, make_client("c", 6), small_embedder, MiningConfig(n_neg=2), sgd_local)
        assert np.array_equal(small_theta.values, before)

    def test_client_without_queries(self, small_embedder, small_theta, sgd_local):
        empty = ClientDataset.build("e", [], [make_sample(0, 0.0, 0.0, np.ones(4))], MiningConfig())
        theta, stats = local_train(small_theta, empty, small_embedder, MiningConfig(), sgd_local)
        assert theta is small_theta
        assert stats.n_samples == 0

    def test_training_lowers_the_loss(self):
        rng = np.random.default_rng(1)
        spec = EmbedderSpec(input_dim=4, hidden_dims=(8,), output_dim=4)
        theta = init_params(spec, 0)
        db = [make_sample(i, 40.0 * i, 0.0, rng.normal(size=4)) for i in range(15)]
        queries = [make_sample(100 + i, 40.0 * i, 3.0, db[i].feat + 0.05 * rng.normal(size=4), role=Role.QUERY)
                   for i in range(12)]
        mining = MiningConfig(n_neg=2, margin=0.5)
        client = ClientDataset.build("c", queries, db, mining)
        short = LocalTrainConfig(local_lr=1e-2, local_optimizer=OptimizerKind.ADAM, batch_triplets=4,
                                 fixed_iterations=3)

        _, before = local_train(theta, client, spec, mining, short)
        trained, stats = local_train(theta, client, spec, mining, short.model_copy(update={"fixed_iterations": 60}))
        _, after = local_train(trained, client, spec, mining, short)
        assert stats.iterations == 60
        assert after.mean_loss < before.mean_loss

    def test_negative_shortfall_is_reported_once(self, small_embedder, small_theta, sgd_local, caplog):
        with caplog.at_level(logging.WARNING, logger="core.contrastive"):
            _, stats = local_train(small_theta, make_client("c", 6), small_embedder, MiningConfig(n_neg=50), sgd_local,
                                   round_index=2)
        warnings = [r for r in caplog.records if r.levelno == logging.WARNING and r.name == "core.contrastive"]
        assert stats.negative_shortfalls > 0
        assert len(warnings) == 1
        assert "round 2" in warnings[0].getMessage()
        assert f"{stats.negative_shortfalls} mined queries had fewer than 50 negatives" in warnings[0].getMessage()

    def test_no_warning_with_enough_negatives(self, small_embedder, small_theta, sgd_local, caplog):
        with caplog.at_level(logging.WARNING, logger="core.contrastive"):
            _, stats = local_train(small_theta, make_client("c", 6), small_embedder, MiningConfig(n_neg=2), sgd_local)
        assert stats.negative_shortfalls == 0
        assert not [r for r in caplog.records if r.name == "core.contrastive"]
