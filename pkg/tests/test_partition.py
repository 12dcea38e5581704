# tests/test_partition.py
from collections import Counter

import numpy as np
import pytest

from core.errors import ManifestError
from core.geo import geo_distances, samples_to_arrays
from core.partition import (PartitionSpec, SplitKind, allocate_cluster_counts, hold_out_validation, lloyd_kmeans,
                            make_split, partition_stats, read_partition, split_clustering, split_proximity,
                            split_random, write_partition)
from core.synthdata import WorldSpec, generate_world


def _assert_disjoint(clients):
    seen = set()
    for c in clients:
        assert not seen & set(c.all_seqs)
        seen.update(c.all_seqs)


def _small_world(world_seed):
    return generate_world(WorldSpec(n_cities=3, sequences_per_city=4 + world_seed % 5, images_per_sequence=3,
                                    feature_dim=4, place_dim=2, min_usable_fraction=0.0, seed=world_seed))


class TestProximitySplit:
    def test_clients_are_valid_and_disjoint(self, tiny_manifest):
        clients = split_proximity(tiny_manifest, radius=300.0, seed=1)
        assert clients
        _assert_disjoint(clients)
        for c in clients:
            assert c.is_valid(2, 2)
            assert len(c.city_ids) == 1
            assert c.client_id.startswith(c.city_id)

    def test_every_member_reaches_the_anchor(self, tiny_manifest):
        radius = 250.0
        for c in split_proximity(tiny_manifest, radius=radius, seed=2):
            anchor = tiny_manifest.sample(c.anchor_id)
            assert anchor.seq_id in c.query_seqs
            for seq_id in c.all_seqs:
                _, lats, lons = samples_to_arrays(tiny_manifest.samples_of(seq_id))
                assert np.min(geo_distances(anchor.tag, lats, lons)) <= radius

    def test_deterministic(self, tiny_manifest):
        assert split_proximity(tiny_manifest, 300.0, seed=5) == split_proximity(tiny_manifest, 300.0, seed=5)

    @pytest.mark.parametrize("world_seed", range(20))
    def test_client_count_shrinks_with_radius(self, world_seed):
        manifest = generate_world(WorldSpec(n_cities=2, sequences_per_city=40, images_per_sequence=3,
                                            feature_dim=4, place_dim=2, seed=world_seed))
        counts = [len(split_proximity(manifest, radius, seed=0)) for radius in (1000.0, 2000.0, 4000.0)]
        assert counts[0] >= counts[1] >= counts[2]

    def test_huge_radius_gives_one_client_per_city(self, tiny_manifest):
        clients = split_proximity(tiny_manifest, radius=1e6)
        assert sorted(c.city_id for c in clients) == tiny_manifest.city_ids

    def test_minimum_sequence_rule(self, tiny_manifest):
        strict = split_proximity(tiny_manifest, radius=1e6, min_query_seqs=100)
        assert strict == []


class TestClusteringSplit:
    def test_allocation_is_proportional(self):
        assert allocate_cluster_counts({"a": 10, "b": 30}, 8) == {"a": 2, "b": 6}

    def test_allocation_floor_and_cap(self):
        assert allocate_cluster_counts({"a": 1, "b": 99}, 4) == {"a": 1, "b": 4}
        assert allocate_cluster_counts({"a": 2}, 10) == {"a": 2}

    def test_lloyd_fixed_point(self):
        rng = np.random.default_rng(0)
        points = np.concatenate([rng.normal(loc=c, scale=0.3, size=(30, 3)) for c in (-2.0, 0.0, 2.0)])
        result = lloyd_kmeans(points, 3, seed=1)
        dists = np.linalg.norm(points[:, None, :] - result.centers[None, :, :], axis=2)
        assert np.array_equal(np.argmin(dists, axis=1), result.labels)
        for j in range(3):
            assert np.allclose(result.centers[j], points[result.labels == j].mean(axis=0))

    def test_split_covers_cities_without_overlap(self, tiny_manifest):
        clients = split_clustering(tiny_manifest, k_total=4, seed=0, min_query_seqs=0, min_db_seqs=0)
        _assert_disjoint(clients)
        assert {s for c in clients for s in c.all_seqs} == set(tiny_manifest.sequences)
        assert all(len(c.city_ids) == 1 for c in clients)

    @pytest.mark.parametrize("world_seed", range(20))
    def test_disjoint_cover_over_worlds(self, world_seed):
        manifest = _small_world(world_seed)
        clients = split_clustering(manifest, k_total=2 + world_seed % 6, seed=world_seed, min_query_seqs=0,
                                   min_db_seqs=0)
        _assert_disjoint(clients)
        assert sorted(s for c in clients for s in c.all_seqs) == sorted(manifest.sequences)
        assert all(len(c.city_ids) == 1 for c in clients)


class TestRandomSplit:
    def test_every_client_sees_every_city(self, tiny_manifest):
        clients = split_random(tiny_manifest, n_clients=5, seed=0, min_query_seqs=0, min_db_seqs=0)
        assert len(clients) == 5
        for c in clients:
            assert c.city_ids == tuple(tiny_manifest.city_ids)

    def test_more_clients_than_sequences(self, tiny_manifest):
        clients = split_random(tiny_manifest, n_clients=40, seed=0, min_query_seqs=0, min_db_seqs=0)
        assert len(clients) == 40
        assert all(len(c.city_ids) == 2 for c in clients)

    def test_client_sizes_are_balanced(self):
        # 3 cities of 7 sequences over 4 clients: 21 draws
        manifest = generate_world(WorldSpec(n_cities=3, sequences_per_city=7, images_per_sequence=3, feature_dim=4,
                                            place_dim=2, min_usable_fraction=0.0, seed=4))
        sizes = sorted(len(c.all_seqs) for c in split_random(manifest, n_clients=4, min_query_seqs=0, min_db_seqs=0))
        assert sizes == [5, 5, 5, 6]

    @pytest.mark.parametrize("world_seed", range(20))
    def test_invariants_over_worlds(self, world_seed):
        manifest = _small_world(world_seed)
        n_clients = 3 + world_seed % 7
        clients = split_random(manifest, n_clients=n_clients, seed=world_seed, min_query_seqs=0, min_db_seqs=0)
        assert len(clients) == n_clients
        sizes = [len(c.all_seqs) for c in clients]
        assert max(sizes) - min(sizes) <= 1
        for c in clients:
            assert c.city_ids == tuple(manifest.city_ids)
        counts = Counter(s for c in clients for s in c.all_seqs)
        assert set(counts) == set(manifest.sequences)
        for city in manifest.city_ids:
            city_seqs = manifest.sequences_in_city(city)
            if len(city_seqs) >= n_clients:
                assert all(counts[s] == 1 for s in city_seqs)
            else:
                assert sum(counts[s] for s in city_seqs) == n_clients

    def test_rejects_zero_clients(self, tiny_manifest):
        with pytest.raises(ValueError):
            split_random(tiny_manifest, n_clients=0)


class TestPartitionUtilities:
    def test_make_split_dispatch(self, tiny_manifest):
        clients = make_split(tiny_manifest, PartitionSpec(kind=SplitKind.RANDOM, n_clients=3, min_query_seqs=0,
                                                          min_db_seqs=0))
        assert [c.client_id for c in clients] == ["r0000", "r0001", "r0002"]

    def test_hold_out_validation(self, tiny_manifest):
        clients = split_random(tiny_manifest, n_clients=6, min_query_seqs=0, min_db_seqs=0)
        train, val = hold_out_validation(clients, 2, seed=3)
        assert len(train) == 4 and len(val) == 2
        assert {c.client_id for c in train}.isdisjoint(c.client_id for c in val)
        assert all(c.split == "val" for c in val)
        assert all(c.split == "train" for c in train)

    def test_hold_out_keeps_one_training_client(self, tiny_manifest):
        clients = split_random(tiny_manifest, n_clients=3, min_query_seqs=0, min_db_seqs=0)
        train, val = hold_out_validation(clients, 12)
        assert len(train) == 1 and len(val) == 2

    def test_stats_are_population_moments(self, tiny_manifest):
        clients = split_proximity(tiny_manifest, 300.0)
        stats = partition_stats(clients, tiny_manifest)
        seqs = [len(c.all_seqs) for c in clients]
        assert stats.n_clients == len(clients)
        assert stats.seqs_mean == pytest.approx(np.mean(seqs))
        assert stats.seqs_std == pytest.approx(np.std(seqs))
        assert stats.images_mean == pytest.approx(4 * np.mean(seqs))

    def test_partition_file(self, tmp_path, tiny_manifest):
        train, val = hold_out_validation(split_proximity(tiny_manifest, 300.0), 1)
        path = tmp_path / "partition.jsonl"
        write_partition(train + val, path)
        restored = read_partition(path, tiny_manifest)
        assert sorted(restored, key=lambda c: c.client_id) == sorted(train + val, key=lambda c: c.client_id)

    def test_partition_file_with_unknown_sequence(self, tmp_path, tiny_manifest):
        path = tmp_path / "partition.jsonl"
        path.write_text('{"client_id": "x", "query_seqs": ["nope"], "db_seqs": [], "city_ids": [], '
                        '"continent_id": ""}\n')
        with pytest.raises(ManifestError):
            read_partition(path, tiny_manifest)

    def test_malformed_partition_file(self, tmp_path):
        path = tmp_path / "partition.jsonl"
        path.write_text("{not json\n")
        with pytest.raises(ManifestError):
            read_partition(path)
