import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svirisk.errors import ConfigurationError, PlanningError, SamplingError, ValidationError
from svirisk.fixtures import FULL_SCALE_POPULATIONS, synthetic_registry
from svirisk.geodata import NeighborhoodRecord
from svirisk.geometry import point_in_polygon, points_in_polygon, polygon_area
from svirisk.projection import Wgs84Point
from svirisk.sampler import (
    QuotaPlan, RetryPolicy, acquire_with_retry, dispersion_diagnostic, planned_image_counts,
    quota_for_class, resample_replacements, run_acquisition, sample_point_in_polygon, select_neighborhoods,
)

UNIT = [[[(0.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, 0.0), (0.0, 0.0)]]]
# L shape: unit square minus the upper-right quadrant
L_SHAPE = [[[(0, 0), (0, 1), (0.5, 1), (0.5, 0.5), (1, 0.5), (1, 0), (0, 0)]]]


def rec(code, pct=3.0, poly=None):
    return NeighborhoodRecord(code, pct, poly or [[[(52.0, 5.0), (52.0, 5.01), (52.01, 5.01), (52.01, 5.0), (52.0, 5.0)]]])


@pytest.fixture(scope="module")
def full_registry():
    return synthetic_registry(FULL_SCALE_POPULATIONS, seed=0)


class TestQuota:
    def test_images_per_class(self):
        assert [quota_for_class(c) for c in range(4)] == [1, 1, 3, 20]
        assert quota_for_class("very_low") == 1
        assert quota_for_class("moderate") == 3
        assert quota_for_class("high_very_high") == 20
        with pytest.raises(ValidationError):
            quota_for_class(4)

    def test_expected_images(self):
        assert QuotaPlan().expected_images(FULL_SCALE_POPULATIONS) == {0: 2500, 1: 2500, 2: 2499, 3: 2380}

    def test_overrides(self):
        plan = QuotaPlan().with_overrides(["moderate=10:2", "0=all"])
        assert plan.neighborhoods[2] == 10 and plan.images_per_neighborhood[2] == 2
        assert plan.neighborhoods[0] is None
        with pytest.raises(ValidationError):
            QuotaPlan().with_overrides(["nonsense"])


class TestSelection:
    def test_full_scale_selection(self, full_registry):
        sel = select_neighborhoods(full_registry, QuotaPlan(), 0)
        assert {c: len(v) for c, v in sel.selected.items()} == {0: 2500, 1: 2500, 2: 833, 3: 119}
        counts = planned_image_counts(sel, QuotaPlan())
        assert counts == {0: 2500, 1: 2500, 2: 2499, 3: 2380}
        assert sum(counts.values()) == 9879
        for c, chosen in sel.selected.items():
            assert len({r.code for r in chosen}) == len(chosen)
            assert all(r.risk_class == c for r in chosen)
            assert not {r.code for r in chosen} & {r.code for r in sel.pool[c]}

    def test_deterministic(self, full_registry):
        a = select_neighborhoods(full_registry, QuotaPlan(), 5)
        b = select_neighborhoods(list(reversed(full_registry)), QuotaPlan(), 5)
        assert {c: [r.code for r in v] for c, v in a.selected.items()} == \
               {c: [r.code for r in v] for c, v in b.selected.items()}

    def test_exact_population(self):
        recs = synthetic_registry({0: 5, 1: 5, 2: 3, 3: 1})
        plan = QuotaPlan().with_overrides(["0=5", "1=5", "2=3"])
        sel = select_neighborhoods(recs, plan, 0)
        assert len(sel.selected[0]) == 5 and not sel.pool[0]

    def test_insufficient_names_class(self):
        recs = synthetic_registry({0: 5, 1: 5, 2: 2, 3: 1})
        with pytest.raises(PlanningError, match="moderate"):
            select_neighborhoods(recs, QuotaPlan().with_overrides(["0=5", "1=5", "2=3"]), 0)


class TestPointSampling:
    def test_unit_square(self):
        rng = np.random.default_rng(0)
        p = sample_point_in_polygon(UNIT, rng)
        assert 0 <= p.lat <= 1 and 0 <= p.lon <= 1

    def test_quadrant_counts(self):
        rng = np.random.default_rng(1)
        pts = np.array([(p.lat, p.lon) for p in (sample_point_in_polygon(UNIT, rng) for _ in range(10000))])
        q = np.bincount((pts[:, 0] >= 0.5) * 2 + (pts[:, 1] >= 0.5), minlength=4)
        assert np.all(np.abs(q - 2500) <= 200), q

    def test_l_shape_excluded_quadrant(self):
        rng = np.random.default_rng(2)
        pts = np.array([(p.lat, p.lon) for p in (sample_point_in_polygon(L_SHAPE, rng) for _ in range(10000))])
        assert int(((pts[:, 0] > 0.5) & (pts[:, 1] > 0.5)).sum()) == 0

    def test_degenerate_polygon(self):
        flat = [[[(0, 0), (0, 1), (0, 2), (0, 0)]]]
        with pytest.raises(SamplingError):
            sample_point_in_polygon(flat, np.random.default_rng(0))

    def test_multipolygon_area_weighting(self):
        big = [[(0, 0), (0, 3), (1, 3), (1, 0), (0, 0)]]
        small = [[(5, 0), (5, 1), (6, 1), (6, 0), (5, 0)]]
        rng = np.random.default_rng(3)
        lats = np.array([sample_point_in_polygon([big, small], rng).lat for _ in range(4000)])
        share = float((lats >= 5).mean())
        assert abs(share - 0.25) < 0.03

    def test_point_in_polygon_against_shapely(self):
        shapely = pytest.importorskip("shapely.geometry")
        ring = [(0, 0), (0.2, 0.9), (0.5, 0.4), (0.9, 1.0), (1.0, 0.1), (0.5, -0.2), (0, 0)]
        hole = [(0.4, 0.1), (0.4, 0.2), (0.5, 0.2), (0.5, 0.1), (0.4, 0.1)]
        poly = [ring, hole]
        ref = shapely.Polygon(ring, [hole])
        rng = np.random.default_rng(4)
        lat, lon = rng.uniform(-0.3, 1.1, 3000), rng.uniform(-0.3, 1.1, 3000)
        ours = points_in_polygon(lat, lon, poly)
        theirs = np.array([ref.contains(shapely.Point(a, b)) for a, b in zip(lat, lon)])
        assert np.array_equal(ours, theirs)
        assert abs(polygon_area(poly) - ref.area) < 1e-12

    def test_boundary_counts_as_inside(self):
        assert point_in_polygon(0.0, 0.5, UNIT)
        assert point_in_polygon(1.0, 1.0, UNIT)


def always(found):
    class Hit:
        pano_id = "p"
        capture_date = "2020-06"

    return lambda coord: Hit() if found else None


class TestRetry:
    def test_always_succeeds(self):
        res = acquire_with_retry(rec("a"), 3, RetryPolicy(), always(True))
        assert res.status == "found" and [p.attempt_index for p in res.points] == [1, 1, 1]

    def test_always_fails_exactly_300(self):
        log = []
        res = acquire_with_retry(rec("a"), 1, RetryPolicy(300), always(False), log=log.append)
        assert res.status == "exhausted" and res.attempts == 300 and len(log) == 300
        assert max(e["attempt_index"] for e in log) == 300

    def test_succeeds_on_second(self):
        calls = []

        def probe(coord):
            calls.append(coord)
            return len(calls) == 2

        res = acquire_with_retry(rec("a"), 1, RetryPolicy(), probe)
        assert res.points[0].attempt_index == 2 and res.points[0].status == "found"

    def test_found_points_contained(self):
        r = rec("a")
        res = acquire_with_retry(r, 20, RetryPolicy(), always(True), seed=9)
        assert all(point_in_polygon(p.coordinate.lat, p.coordinate.lon, r.polygon) for p in res.found)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 20), st.floats(0.05, 1.0), st.integers(0, 2**31))
    def test_attempt_bound(self, budget, p_hit, seed):
        rng = np.random.default_rng(seed)
        res = acquire_with_retry(rec("a"), 3, RetryPolicy(budget), lambda c: rng.random() < p_hit, seed=seed)
        assert all(1 <= p.attempt_index <= budget for p in res.points)

    def test_invalid(self):
        with pytest.raises(ValidationError):
            acquire_with_retry(rec("a"), 0, RetryPolicy(), always(True))
        with pytest.raises(ConfigurationError):
            RetryPolicy(0)


class TestReplacement:
    def test_seventy(self):
        recs = synthetic_registry({0: 200, 1: 0, 2: 0, 3: 0})
        out = resample_replacements(recs[:70], recs[70:], 0)
        assert len(out[0]) == 70 and all(r.risk_class == 0 for r in out[0])

    def test_nothing_exhausted(self):
        assert resample_replacements([], synthetic_registry({0: 3, 1: 0, 2: 0, 3: 0}), 0) == {}

    def test_shortfall(self):
        recs = synthetic_registry({0: 5, 1: 0, 2: 0, 3: 0})
        with pytest.raises(PlanningError) as err:
            resample_replacements(recs[:3], recs[3:], 0)
        assert err.value.shortfall == {0: 1}
        assert len(err.value.partial[0]) == 2

    def test_run_restores_class_counts(self):
        recs = synthetic_registry({0: 300, 1: 40, 2: 20, 3: 3}, seed=1)
        plan = QuotaPlan().with_overrides(["0=200", "1=20", "2=10"])
        sel = select_neighborhoods(recs, plan, 0)
        doomed = {r.code for r in sel.selected[0][:70]}
        by_code = {r.code: r for r in recs}

        def probe(coord):
            # look up which neighborhood the coordinate falls in
            for code in doomed:
                if point_in_polygon(coord.lat, coord.lon, by_code[code].polygon):
                    return None
            return True

        run = run_acquisition(sel, plan, RetryPolicy(5), probe, seed=0)
        assert {c: len(v) for c, v in run.final_selection.items()} == {0: 200, 1: 20, 2: 10, 3: 3}
        assert run.rounds[0] == {0: 70} and run.shortfall == {}
        assert not doomed & set(run.final_selection[0])


class TestDispersion:
    SQ = [[(0.0, 0.0), (0.0, 100.0), (100.0, 100.0), (100.0, 0.0), (0.0, 0.0)]]

    def oracle(self, pts, area):
        pts = np.asarray(pts, float)
        nn = [min(np.hypot(*(p - q)) for j, q in enumerate(pts) if j != i) for i, p in enumerate(pts)]
        return float(np.mean(nn)) / (0.5 / np.sqrt(len(pts) / area))

    def test_regular_grid(self):
        pts = [(10 + 20 * i, 12.5 + 25 * j) for i in range(5) for j in range(4)]
        rep = dispersion_diagnostic(pts, self.SQ, planar=True)
        assert rep.score > 1.0 and not rep.flagged
        assert abs(rep.score - self.oracle(pts, 10000.0)) < 1e-12

    def test_clustered(self):
        rng = np.random.default_rng(0)
        pts = [(50 + a, 50 + b) for a, b in rng.uniform(0, 1.4, (20, 2))]
        rep = dispersion_diagnostic(pts, self.SQ, planar=True)
        assert rep.flagged and rep.score < 0.1
        assert abs(rep.score - self.oracle(pts, 10000.0)) < 1e-12

    def test_identical_and_skipped(self):
        rep = dispersion_diagnostic([(5, 5), (5, 5)], self.SQ, planar=True)
        assert rep.score == 0.0 and rep.flagged
        rep = dispersion_diagnostic([(5, 5)], self.SQ, planar=True)
        assert rep.skipped and rep.score is None and rep.notice

    def test_geographic_uniform_near_one(self):
        r = rec("a")
        rng = np.random.default_rng(5)
        pts = [sample_point_in_polygon(r.polygon, rng) for _ in range(400)]
        rep = dispersion_diagnostic(pts, r.polygon)
        assert 0.85 < rep.score < 1.2 and not rep.flagged
