import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierplan import spatial, travel
from hierplan.travel import (EuclideanTravel, LookupTravel, TravelError,
                             interpolate_position, travel_time)

from test_spatial import BASE, box_from_miles


@pytest.fixture
def grid():
    return spatial.build_grid(box_from_miles(*BASE, 4.0, 4.0), 1.0)


@pytest.fixture
def euclid(grid):
    return EuclideanTravel(grid=grid, speed_mph=30.0)


class TestTravelTime:
    def test_same_cell_zero(self, euclid):
        assert travel_time(euclid, 5, 5) == 0.0

    def test_three_miles_at_thirty_mph(self, euclid):
        # cells (0,0) and (0,3): centroids 3 miles apart -> 360 s
        assert travel_time(euclid, 0, 3) == pytest.approx(360.0)

    def test_lookup_read(self, grid):
        table = {(a, b): 100.0 for a in range(grid.n_cells) for b in range(grid.n_cells)}
        table[(2, 5)] = 420.0
        model = LookupTravel(grid=grid, table=table)
        assert travel_time(model, 2, 5) == 420.0

    def test_lookup_miss_names_pair(self, grid):
        model = LookupTravel(grid=grid, table={(0, 1): 60.0})
        with pytest.raises(TravelError) as info:
            travel_time(model, 1, 0)
        assert "(1, 0)" in str(info.value)

    def test_nonpositive_speed_rejected(self, grid):
        with pytest.raises(TravelError):
            EuclideanTravel(grid=grid, speed_mph=0.0)


class TestInterpolate:
    def test_endpoints(self, euclid):
        total = travel_time(euclid, 0, 3)
        assert interpolate_position(euclid, 0, 3, 0.0) == 0
        assert interpolate_position(euclid, 0, 3, total) == 3

    def test_midpoint_of_straight_path(self, euclid, grid):
        # derived oracle: locate() of the analytic midpoint of the centroids
        total = travel_time(euclid, 0, 3)
        got = interpolate_position(euclid, 0, 3, total / 2)
        (la, lo), (lb, lob) = grid.cells[0].centroid, grid.cells[3].centroid
        midpoint = (la + 0.5 * (lb - la), lo + 0.5 * (lob - lo))
        assert got == spatial.locate(grid, midpoint)

    def test_interior_five_cell_path(self, grid):
        # 5-cell row: the midpoint is the middle cell's centroid, interior
        wide = spatial.build_grid(box_from_miles(*BASE, 5.0, 1.0), 1.0)
        model = EuclideanTravel(grid=wide, speed_mph=30.0)
        total = travel_time(model, 0, 4)
        assert interpolate_position(model, 0, 4, total / 2) == 2

    def test_elapsed_beyond_total_rejected(self, euclid):
        with pytest.raises(TravelError):
            interpolate_position(euclid, 0, 3, 1e6)

    def test_lookup_endpoints_and_nearest_centroid(self, grid):
        table = {(a, b): 300.0 for a in range(grid.n_cells) for b in range(grid.n_cells)}
        model = LookupTravel(grid=grid, table=table)
        assert interpolate_position(model, 0, 3, 0.0) == 0
        assert interpolate_position(model, 0, 3, 300.0) == 3
        # quarter of the way from (0,0) to (0,3): nearest centroid is cell 1
        assert interpolate_position(model, 0, 3, 100.0) == 1


class TestEuclideanProperties:
    @given(st.integers(0, 15), st.integers(0, 15))
    @settings(max_examples=100, deadline=None)
    def test_symmetry(self, a, b):
        grid = spatial.build_grid(box_from_miles(*BASE, 4.0, 4.0), 1.0)
        model = EuclideanTravel(grid=grid, speed_mph=25.0)
        assert travel_time(model, a, b) == pytest.approx(travel_time(model, b, a))

    @given(st.integers(0, 15), st.integers(0, 15), st.integers(0, 15))
    @settings(max_examples=100, deadline=None)
    def test_triangle_inequality(self, a, b, c):
        grid = spatial.build_grid(box_from_miles(*BASE, 4.0, 4.0), 1.0)
        model = EuclideanTravel(grid=grid, speed_mph=25.0)
        assert (travel_time(model, a, c)
                <= travel_time(model, a, b) + travel_time(model, b, c) + 1e-9)


class TestLookupCsv:
    def test_roundtrip(self, tmp_path):
        grid = spatial.build_grid(box_from_miles(*BASE, 2.0, 1.0), 1.0)
        table = {(a, b): 60.0 * abs(a - b) for a in range(2) for b in range(2)}
        model = LookupTravel(grid=grid, table=table)
        path = tmp_path / "lookup.csv"
        travel.save_lookup_csv(path, model)
        loaded = travel.load_lookup_csv(path, grid)
        assert loaded.table == table

    def test_missing_pair_rejected_with_name(self, tmp_path):
        grid = spatial.build_grid(box_from_miles(*BASE, 2.0, 1.0), 1.0)
        path = tmp_path / "partial.csv"
        path.write_text("from_cell,to_cell,seconds\n0,0,0\n0,1,60\n1,0,60\n")
        with pytest.raises(TravelError) as info:
            travel.load_lookup_csv(path, grid)
        assert "(1, 1)" in str(info.value)

    def test_negative_seconds_rejected(self, tmp_path):
        grid = spatial.build_grid(box_from_miles(*BASE, 2.0, 1.0), 1.0)
        path = tmp_path / "neg.csv"
        path.write_text("from_cell,to_cell,seconds\n0,0,-5\n")
        with pytest.raises(TravelError):
            travel.load_lookup_csv(path, grid)
