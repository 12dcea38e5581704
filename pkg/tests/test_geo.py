# tests/test_geo.py
import math

import numpy as np
import pytest

from core.errors import GeoInputError
from core.geo import (EARTH_RADIUS_M, GeoTag, candidate_sets, centroid_tag, geo_distance, geo_distances,
                      local_offset_to_tag)
from tests.conftest import ORIGIN, make_sample


class TestGeoDistance:
    def test_same_point_is_zero(self):
        assert geo_distance(ORIGIN, ORIGIN) == 0.0

    def test_one_degree_of_latitude(self):
        expected = 2 * math.pi * EARTH_RADIUS_M / 360.0
        assert geo_distance(GeoTag(0.0, 0.0), GeoTag(1.0, 0.0)) == pytest.approx(expected, rel=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a = GeoTag(float(rng.uniform(-80, 80)), float(rng.uniform(-179, 179)))
            b = GeoTag(float(rng.uniform(-80, 80)), float(rng.uniform(-179, 179)))
            assert geo_distance(a, b) == geo_distance(b, a)

    def test_antipodes(self):
        assert geo_distance(GeoTag(0.0, 0.0), GeoTag(0.0, 180.0)) == pytest.approx(math.pi * EARTH_RADIUS_M)

    def test_local_offset_roundtrips_to_meters(self):
        tag = local_offset_to_tag(ORIGIN, 30.0, 40.0)
        assert geo_distance(ORIGIN, tag) == pytest.approx(50.0, rel=1e-3)

    def test_vectorized_matches_scalar(self):
        tags = [local_offset_to_tag(ORIGIN, 10.0 * i, -7.0 * i) for i in range(20)]
        vec = geo_distances(ORIGIN, np.array([t.lat for t in tags]), np.array([t.lon for t in tags]))
        assert np.allclose(vec, [geo_distance(ORIGIN, t) for t in tags], rtol=0, atol=1e-9)

    def test_non_finite_targets_rejected(self):
        with pytest.raises(GeoInputError):
            geo_distances(ORIGIN, np.array([45.0, np.nan]), np.array([7.0, 7.0]))


class TestGeoTag:
    @pytest.mark.parametrize("lat, lon", [(91.0, 0.0), (-90.5, 0.0), (0.0, 180.5), (float("nan"), 0.0),
                                          (0.0, float("inf"))])
    def test_invalid_coordinates_rejected(self, lat, lon):
        with pytest.raises(GeoInputError):
            GeoTag(lat, lon)

    def test_poles_and_dateline_accepted(self):
        GeoTag(90.0, -180.0)
        GeoTag(-90.0, 180.0)

    def test_centroid(self):
        tag = centroid_tag([GeoTag(10.0, 20.0), GeoTag(20.0, 40.0)])
        assert (tag.lat, tag.lon) == (15.0, 30.0)

    def test_centroid_of_nothing(self):
        with pytest.raises(GeoInputError):
            centroid_tag([])


class TestCandidateSets:
    def _db(self):
        # id: offset north in meters
        offsets = {7: 10.0, 3: 24.0, 9: 30.0, 1: 100.0, 5: 400.0}
        return [make_sample(i, 0.0, north, [0.0]) for i, north in offsets.items()]

    def test_positives_and_negatives_sorted_by_id(self):
        query = make_sample(100, 0.0, 0.0, [0.0])
        sets = candidate_sets(query, self._db(), tau=25.0)
        assert sets.positives == (3, 7)
        assert sets.negatives == (1, 5, 9)

    def test_gap_between_radii_is_excluded(self):
        query = make_sample(100, 0.0, 0.0, [0.0])
        sets = candidate_sets(query, self._db(), tau=25.0, tau_neg=50.0)
        assert sets.positives == (3, 7)
        assert sets.negatives == (1, 5)

    def test_independent_of_database_order(self):
        query = make_sample(100, 0.0, 0.0, [0.0])
        db = self._db()
        assert candidate_sets(query, db) == candidate_sets(query, db[::-1])

    def test_no_positive_is_returned_not_raised(self):
        query = make_sample(100, 0.0, 5000.0, [0.0])
        sets = candidate_sets(query, self._db())
        assert sets.positives == ()
        assert len(sets.negatives) == 5

    def test_tau_above_tau_neg_rejected(self):
        with pytest.raises(GeoInputError):
            candidate_sets(make_sample(100, 0.0, 0.0, [0.0]), self._db(), tau=50.0, tau_neg=25.0)

    def test_empty_database_rejected(self):
        with pytest.raises(GeoInputError):
            candidate_sets(make_sample(100, 0.0, 0.0, [0.0]), [])
