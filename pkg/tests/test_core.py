"""Tests for poses, geometry and the pose table format."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pitloc.core import (
    Descriptor,
    GpsFix,
    PointCloud,
    Pose,
    check_pose_table,
    geo_distance,
    heading_delta,
    normalize_heading,
    points_to_sensor_frame,
    points_to_world_frame,
    read_pose_table,
    to_sensor_frame,
    to_world_frame,
    write_pose_table,
)

coord = st.floats(-1e4, 1e4, allow_nan=False)
angle = st.floats(-1e4, 1e4, allow_nan=False)


class TestGeoDistance:
    def test_pythagorean_triple(self):
        assert geo_distance(Pose(0, 0), Pose(3, 4)) == 5.0

    def test_identity(self):
        a = Pose(12.5, -3.25)
        assert geo_distance(a, a) == 0.0

    def test_hand_arithmetic(self):
        # dx = 3.5, dy = 4.8 worked by hand: 12.25 + 23.04 = 35.29
        d = geo_distance(Pose(1.2, -0.7), Pose(-2.3, 4.1))
        assert d == pytest.approx(math.sqrt(35.29), abs=1e-12)
        assert d == pytest.approx(5.9405387, abs=1e-6)

    def test_works_with_gps_fix(self):
        assert geo_distance(GpsFix(0.0, 0.0), Pose(0.0, 2.0)) == 2.0

    @given(coord, coord, coord, coord, coord, coord)
    def test_triangle_inequality(self, ax, ay, bx, by, cx, cy):
        a, b, c = Pose(ax, ay), Pose(bx, by), Pose(cx, cy)
        assert geo_distance(a, c) <= geo_distance(a, b) + geo_distance(b, c) + 1e-9
        assert geo_distance(a, b) == geo_distance(b, a) >= 0.0


class TestHeading:
    def test_wraparound(self):
        assert heading_delta(10, 350) == pytest.approx(20.0)

    def test_identity(self):
        assert heading_delta(90, 90) == 0.0

    def test_both_directions(self):
        # clockwise 359 -> 181 is 178, counter-clockwise is 182
        assert heading_delta(359, 181) == pytest.approx(min(178.0, 182.0))

    @given(angle, angle)
    def test_symmetric_and_bounded(self, a, b):
        d = heading_delta(a, b)
        assert d == heading_delta(b, a)
        assert 0.0 <= d <= 180.0

    @given(angle)
    def test_normalized_range(self, h):
        assert 0.0 <= normalize_heading(h) < 360.0

    def test_tiny_negative_does_not_reach_360(self):
        assert normalize_heading(-1e-18) == 0.0

    def test_pose_normalizes(self):
        assert Pose(0, 0, -90).heading == 270.0
        assert Pose(0, 0, 720).heading == 0.0


class TestFrames:
    def test_identity_pose(self):
        np.testing.assert_allclose(to_sensor_frame((1, 0, 0), Pose(0, 0, 0)), (1, 0, 0))

    def test_quarter_turn(self):
        # rotating by -90 degrees maps east onto -y
        np.testing.assert_allclose(to_sensor_frame((1, 0, 0), Pose(0, 0, 90)), (0, -1, 0), atol=1e-15)

    def test_point_at_sensor(self):
        np.testing.assert_allclose(to_sensor_frame((5, 5, 2), Pose(5, 5, 123)), (0, 0, 2), atol=1e-15)

    @given(coord, coord, st.floats(-10, 10), coord, coord, angle)
    def test_round_trip(self, x, y, z, px, py, h):
        pose = Pose(px, py, h)
        back = to_world_frame(to_sensor_frame((x, y, z), pose), pose)
        np.testing.assert_allclose(back, (x, y, z), atol=1e-9)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-50, 50, size=(20, 3))
        pose = Pose(4.0, -7.0, 37.0)
        expected = np.array([to_sensor_frame(p, pose) for p in pts])
        np.testing.assert_allclose(points_to_sensor_frame(pts, pose), expected, atol=1e-12)
        np.testing.assert_allclose(points_to_world_frame(expected, pose), pts, atol=1e-9)


class TestValueTypes:
    def test_non_finite_pose_rejected(self):
        with pytest.raises(ValueError):
            Pose(math.nan, 0.0)
        with pytest.raises(ValueError):
            GpsFix(0.0, math.inf)

    def test_intensity_clamped(self):
        cloud = PointCloud(np.array([[0, 0, 1, -0.5], [1, 1, 1, 1.7]]))
        np.testing.assert_array_equal(cloud.intensity, [0.0, 1.0])

    def test_non_finite_cloud_rejected(self):
        with pytest.raises(ValueError):
            PointCloud(np.array([[0, np.nan, 1, 0.5]]))

    def test_cloud_is_read_only(self):
        cloud = PointCloud(np.zeros((3, 4)))
        with pytest.raises(ValueError):
            cloud.points[0, 0] = 1.0

    def test_empty_cloud(self):
        assert len(PointCloud.empty()) == 0

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=64))
    def test_descriptor_unit_norm(self, values):
        d = Descriptor.normalized(values)
        if d.valid:
            assert abs(np.linalg.norm(d.values) - 1.0) < 1e-6
        else:
            assert not np.any(d.values)

    def test_zero_descriptor_invalid(self):
        assert not Descriptor.normalized(np.zeros(4)).valid


class TestPoseTable:
    def test_round_trip(self, tmp_path):
        poses = [Pose(1.5, -2.25, 10.0, 1, 0.0, 5), Pose(2.0, 3.0, 359.5, 1, 0.1, 6), Pose(0, 0, 0, 2, 0.0, 7)]
        path = tmp_path / "poses.csv"
        write_pose_table(path, poses)
        assert path.read_text().splitlines()[0] == "reading_id,trip_id,timestamp,x,y,heading"
        assert read_pose_table(path) == poses

    def test_duplicate_id(self):
        with pytest.raises(ValueError, match="duplicate identifier"):
            check_pose_table([Pose(0, 0, reading_id=1, timestamp=0), Pose(1, 0, reading_id=1, timestamp=1)])

    def test_non_increasing_timestamps(self):
        with pytest.raises(ValueError, match="not increasing"):
            check_pose_table([Pose(0, 0, trip_id=1, timestamp=2, reading_id=1),
                              Pose(1, 0, trip_id=1, timestamp=2, reading_id=2)])

    def test_bad_header(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("id,x,y\n1,2,3\n")
        with pytest.raises(ValueError, match="header"):
            read_pose_table(path)
