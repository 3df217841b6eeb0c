"""Parsers and writers: TUM trajectories, GNSS CSV, PLY clouds."""

import struct

import numpy as np
import pytest

import sapmap as sm
from sapmap.errors import ParseError
from sapmap.io import (format_gnss, format_trajectory, parse_gnss, parse_ply,
                       parse_trajectory, write_ply)


class TestTrajectoryParser:
    def test_single_pose_at_origin(self):
        traj = parse_trajectory(b"0.0 0 0 0 0 0 0 1", frame_id="M1")
        assert len(traj) == 1
        pose = traj.poses[0]
        assert pose.timestamp == 0.0
        np.testing.assert_allclose(pose.rotation, [1, 0, 0, 0])
        np.testing.assert_allclose(pose.translation, [0, 0, 0])

    def test_fixture_with_header_and_three_lines(self):
        text = (
            "# timestamp tx ty tz qx qy qz qw\n"
            "1.5 0.25 -0.5 1.0 0.0 0.0 0.0 1.0\n"
            "2.0 1.0 2.0 3.0 0.0 0.0 0.7071067811865476 0.7071067811865476\n"
            "2.5 -1.0 0.0 0.5 0.0 1.0 0.0 0.0\n"
        )
        traj = parse_trajectory(text, frame_id="M1")
        assert len(traj) == 3
        assert traj.poses[0].timestamp == 1.5
        np.testing.assert_allclose(traj.poses[0].translation, [0.25, -0.5, 1.0])
        # qx qy qz qw in the file becomes (w, x, y, z) internally
        np.testing.assert_allclose(
            traj.poses[1].rotation,
            [0.7071067811865476, 0.0, 0.0, 0.7071067811865476])
        np.testing.assert_allclose(traj.poses[2].rotation, [0, 0, 1, 0])

    def test_seven_fields_names_line_one(self):
        with pytest.raises(ParseError, match="line 1"):
            parse_trajectory(b"0.0 0 0 0 0 0 1")

    def test_bad_line_number_after_comments(self):
        text = "# header\n# more\n0.0 0 0 0 0 0 0 1\nbroken line here\n"
        with pytest.raises(ParseError, match="line 4"):
            parse_trajectory(text)

    def test_quaternion_renormalised_within_tolerance(self):
        # norm 1.0005 is inside the 1e-3 ingest band
        q = np.array([0.0, 0.0, 0.0, 1.0005])
        line = f"0.0 0 0 0 {q[0]} {q[1]} {q[2]} {q[3]}"
        traj = parse_trajectory(line)
        assert abs(np.linalg.norm(traj.poses[0].rotation) - 1.0) < 1e-12

    def test_quaternion_rejected_beyond_tolerance(self):
        with pytest.raises(ParseError, match="norm"):
            parse_trajectory(b"0.0 0 0 0 0 0 0 1.01")

    def test_non_increasing_timestamps_rejected(self):
        text = "1.0 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1\n"
        with pytest.raises(ParseError, match="line 2"):
            parse_trajectory(text)

    def test_empty_file_rejected(self):
        with pytest.raises(ParseError, match="no poses"):
            parse_trajectory(b"# only comments\n")

    def test_count_preserved(self, rng):
        lines = [f"{i * 0.1} {rng.uniform()} 0 0 0 0 0 1" for i in range(57)]
        traj = parse_trajectory("\n".join(lines))
        assert len(traj) == 57

    def test_roundtrip(self, rng):
        poses = [
            sm.Pose(i * 0.5 + rng.uniform(0, 0.4),
                    sm.core.quat_normalize(rng.normal(size=4)),
                    rng.uniform(-10, 10, 3))
            for i in range(20)
        ]
        traj = sm.Trajectory("M1", poses)
        back = parse_trajectory(format_trajectory(traj), frame_id="M1")
        for a, b in zip(traj.poses, back.poses):
            assert a.timestamp == b.timestamp
            np.testing.assert_array_equal(a.translation, b.translation)
            np.testing.assert_allclose(a.rotation, b.rotation, atol=1e-15)


class TestGnssParser:
    def test_single_row(self):
        track = parse_gnss(b"timestamp,lat,lon,alt\n0.0,51.0,-1.0,100\n")
        assert len(track) == 1
        fix = track.fixes[0]
        assert (fix.latitude, fix.longitude, fix.altitude) == (51.0, -1.0, 100.0)
        assert track.anchor == fix
        assert track.has_altitude

    def test_three_row_fixture_passthrough(self):
        text = ("timestamp,lat,lon\n"
                "0.5,51.7759,-1.3399\n"
                "1.0,51.77591,-1.33993\n"
                "1.5,51.775925,-1.339895\n")
        track = parse_gnss(text)
        assert len(track) == 3
        assert not track.has_altitude
        assert track.fixes[2].latitude == 51.775925
        assert track.fixes[2].longitude == -1.339895
        assert track.fixes[1].timestamp == 1.0
        assert track.fixes[0].altitude == 0.0

    def test_latitude_out_of_range(self):
        with pytest.raises(ParseError, match="latitude"):
            parse_gnss(b"timestamp,lat,lon\n0.0,95.0,-1.0\n")

    def test_missing_columns(self):
        with pytest.raises(ParseError, match="header"):
            parse_gnss(b"time,latitude\n0,1\n")

    def test_non_numeric_cell_reports_line(self):
        text = "timestamp,lat,lon\n0.0,51.0,-1.0\n1.0,abc,-1.0\n"
        with pytest.raises(ParseError, match="line 3"):
            parse_gnss(text)

    def test_anchor_override(self):
        anchor = sm.GeoFix(0.0, 50.0, 0.0, 0.0)
        track = parse_gnss(b"timestamp,lat,lon\n0.0,51.0,-1.0\n", anchor=anchor)
        assert track.anchor == anchor

    def test_roundtrip(self):
        track = sm.GeoTrack(
            (sm.GeoFix(0.0, 51.775901, -1.339912, 81.25),
             sm.GeoFix(0.5, 51.775913, -1.339901, 81.5)),
            sm.GeoFix(0.0, 51.775901, -1.339912, 81.25),
        )
        back = parse_gnss(format_gnss(track))
        assert back.fixes == track.fixes


def hand_built_binary_ply(points, colors):
    header = (b"ply\nformat binary_little_endian 1.0\n"
              b"element vertex " + str(len(points)).encode() + b"\n"
              b"property double x\nproperty double y\nproperty double z\n"
              b"property uchar red\nproperty uchar green\nproperty uchar blue\n"
              b"end_header\n")
    body = b""
    for p, c in zip(points, colors):
        body += struct.pack("<dddBBB", p[0], p[1], p[2], c[0], c[1], c[2])
    return header + body


class TestPly:
    def test_ascii_single_uncolored_vertex(self):
        data = (b"ply\nformat ascii 1.0\nelement vertex 1\n"
                b"property float x\nproperty float y\nproperty float z\n"
                b"end_header\n0 0 0\n")
        cloud = parse_ply(data)
        assert len(cloud) == 1
        assert cloud.colors is None
        np.testing.assert_allclose(cloud.points[0], [0, 0, 0])

    def test_binary_fixture_matches_hand_computed_bytes(self):
        points = [(0.5, -1.25, 2.0), (1.0, 2.0, 3.0),
                  (-0.125, 0.0, 4.5), (1e-3, -1e3, 0.25)]
        colors = [(255, 0, 0), (0, 255, 0), (0, 0, 255), (10, 20, 30)]
        expected = hand_built_binary_ply(points, colors)
        cloud = sm.PointCloud(np.array(points),
                              np.array(colors, dtype=np.uint8))
        written = write_ply(cloud, format="binary_little_endian")
        assert written == expected
        back = parse_ply(written)
        np.testing.assert_array_equal(back.points, points)
        np.testing.assert_array_equal(back.colors, colors)

    def test_truncated_body(self):
        data = (b"ply\nformat ascii 1.0\nelement vertex 10\n"
                b"property float x\nproperty float y\nproperty float z\n"
                b"end_header\n" + b"0 0 0\n" * 9)
        with pytest.raises(ParseError, match="truncated"):
            parse_ply(data)

    def test_empty_cloud_roundtrip(self):
        cloud = sm.PointCloud(np.zeros((0, 3)))
        data = write_ply(cloud)
        assert b"element vertex 0" in data
        assert len(parse_ply(data)) == 0

    def test_binary_roundtrip_bit_exact(self, rng):
        pts = rng.normal(size=(1000, 3)) * rng.uniform(0.1, 100)
        colors = rng.integers(0, 256, (1000, 3)).astype(np.uint8)
        cloud = sm.PointCloud(pts, colors)
        back = parse_ply(write_ply(cloud))
        assert np.array_equal(back.points, cloud.points)
        assert np.array_equal(back.colors, cloud.colors)

    def test_ascii_roundtrip_nine_digits(self):
        cloud = sm.PointCloud(np.array([[1 / 3, 2 / 3, 1.0]]))
        back = parse_ply(write_ply(cloud, format="ascii"))
        np.testing.assert_allclose(back.points, cloud.points, atol=1e-9)

    def test_big_endian_rejected(self):
        data = (b"ply\nformat binary_big_endian 1.0\nelement vertex 0\n"
                b"property float x\nproperty float y\nproperty float z\n"
                b"end_header\n")
        with pytest.raises(ParseError, match="big-endian"):
            parse_ply(data)

    def test_missing_vertex_element(self):
        data = (b"ply\nformat ascii 1.0\nelement face 0\n"
                b"property float x\nend_header\n")
        with pytest.raises(ParseError, match="vertex"):
            parse_ply(data)

    def test_integer_coordinates_rejected(self):
        data = (b"ply\nformat ascii 1.0\nelement vertex 1\n"
                b"property int x\nproperty float y\nproperty float z\n"
                b"end_header\n0 0 0\n")
        with pytest.raises(ParseError, match="float or double"):
            parse_ply(data)

    def test_colors_require_all_three_channels(self):
        data = (b"ply\nformat ascii 1.0\nelement vertex 1\n"
                b"property float x\nproperty float y\nproperty float z\n"
                b"property uchar red\n"
                b"end_header\n0 0 0 128\n")
        cloud = parse_ply(data)
        assert cloud.colors is None

    def test_extra_scalar_property_skipped(self):
        data = (b"ply\nformat ascii 1.0\nelement vertex 1\n"
                b"property float x\nproperty float y\nproperty float z\n"
                b"property float confidence\n"
                b"end_header\n1 2 3 0.9\n")
        cloud = parse_ply(data)
        np.testing.assert_allclose(cloud.points[0], [1, 2, 3])

    def test_list_property_rejected(self):
        data = (b"ply\nformat binary_little_endian 1.0\nelement vertex 1\n"
                b"property list uchar int vertex_indices\n"
                b"property float x\nproperty float y\nproperty float z\n"
                b"end_header\n")
        with pytest.raises(ParseError, match="list"):
            parse_ply(data)

    def test_float32_coordinates_parse(self):
        header = (b"ply\nformat binary_little_endian 1.0\nelement vertex 2\n"
                  b"property float x\nproperty float y\nproperty float z\n"
                  b"end_header\n")
        body = struct.pack("<fff", 1.5, 2.5, 3.5) + struct.pack(
            "<fff", -1.0, 0.0, 0.5)
        cloud = parse_ply(header + body)
        np.testing.assert_allclose(cloud.points,
                                   [[1.5, 2.5, 3.5], [-1.0, 0.0, 0.5]])


VALID_SAMPLES = {
    "tum": b"0.0 0 0 0 0 0 0 1\n1.0 1 2 3 0 0 0 1\n",
    "gnss": b"timestamp,lat,lon,alt\n0.0,51.0,-1.0,100\n1.0,51.001,-1.0,101\n",
    "ply": (b"ply\nformat ascii 1.0\nelement vertex 1\n"
            b"property float x\nproperty float y\nproperty float z\n"
            b"end_header\n0 0 0\n"),
}


@pytest.mark.parametrize("parser,sample", [
    (parse_trajectory, VALID_SAMPLES["tum"]),
    (parse_gnss, VALID_SAMPLES["gnss"]),
    (parse_ply, VALID_SAMPLES["ply"]),
])
def test_fuzz_parsers_never_crash(parser, sample):
    """Arbitrary bytes (random and mutated-valid) may fail, but only with
    ParseError."""
    rng = np.random.default_rng(1234)
    for i in range(1500):
        if i % 3 == 0:
            data = rng.integers(0, 256, rng.integers(0, 400)).astype(
                np.uint8).tobytes()
        else:
            data = bytearray(sample)
            for _ in range(rng.integers(1, 8)):
                pos = rng.integers(0, len(data))
                data[pos] = rng.integers(0, 256)
            data = bytes(data)
        try:
            parser(data)
        except ParseError:
            pass
