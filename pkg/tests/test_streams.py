__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import os

import numpy as np

from buildmonitor.entity.frame import ProfileFrame
from buildmonitor.entity.pose import PoseSample
from buildmonitor.exception import BuildMonitorIOError, BuildMonitorStreamError
from buildmonitor.geomcore import RigidTransform
from buildmonitor.streams import (PoseStream, StreamStats, detect_layers, find_scan_streams, merge_frames,
                                  read_frames, read_poses, write_jsonl)
from buildmonitor.toolpath import positions_at
from tests.unittestcase import UnitTestCase


def given_frame_records(scanner_id, times_us):
    return [ProfileFrame.build(t, scanner_id, [[0.0, 50.0], [1.0, 50.0]], [True, True]).to_dict()
            for t in times_us]


def given_pose_records(times_us, z_values=None, degrees=None):
    z_values = z_values if z_values is not None else [30.0] * len(times_us)
    degrees = degrees if degrees is not None else [0.0] * len(times_us)
    return [PoseSample.build(t, RigidTransform.rot_z(a, (t / 1e5, 0.0, z))).to_dict()
            for t, z, a in zip(times_us, z_values, degrees)]


class TestStreams(UnitTestCase):
    def test_read_frames(self):
        # GIVEN
        path = write_jsonl(self.output_path("scan-0.jsonl"), given_frame_records(0, [0, 100000, 200000]))
        stats = StreamStats(path)

        # WHEN
        frames = list(read_frames(path, stats=stats))

        # THEN
        self.assertEqual([0, 100000, 200000], [f.t_us for f in frames])
        self.assertEqual(3, stats.records)
        self.assertEqual(0, stats.unparseable)
        self.assertEqual([], stats.gaps)

    def test_read_frames_skips_unparseable(self):
        # GIVEN
        path = self.output_path("scan-0.jsonl")
        write_jsonl(path, given_frame_records(0, [0, 100000]))
        with open(path, "a") as f:
            f.write("{not json\n")
            f.write("\n")
            f.write("{\"t_us\": 300000, \"points\": [[0.0, 50.0]]}\n")
            f.write("[1, 2]\n")
        stats = StreamStats(path)

        # WHEN
        frames = list(read_frames(path, stats=stats))

        # THEN
        self.assertEqual(2, len(frames))
        self.assertEqual(5, stats.records)
        self.assertEqual(3, stats.unparseable)
        self.assertEqual({"path": "scan-0.jsonl", "records": 5, "unparseable": 3, "gaps": []}, stats.to_dict())

    def test_read_frames_time_backwards(self):
        # GIVEN
        path = write_jsonl(self.output_path("scan-0.jsonl"), given_frame_records(0, [0, 200000, 100000]))

        # WHEN
        with self.assertRaises(BuildMonitorStreamError) as cm:
            list(read_frames(path))

        # THEN
        self.assertIn("back in time", str(cm.exception))

    def test_read_frames_records_gaps(self):
        # GIVEN
        path = write_jsonl(self.output_path("scan-0.jsonl"), given_frame_records(0, [0, 100000, 2600000]))
        stats = StreamStats(path)

        # WHEN
        with self.assertLogs("buildmonitor.streams", level="WARNING"):
            list(read_frames(path, gap_warning_s=1.0, stats=stats))

        # THEN
        self.assertEqual([(0.1, 2.6)], stats.gaps)

    def test_read_frames_missing(self):
        with self.assertRaises(BuildMonitorIOError):
            list(read_frames(os.path.join(self.test_output_dir, "scan-9.jsonl")))

    def test_merge_frames(self):
        # GIVEN
        a = write_jsonl(self.output_path("scan-0.jsonl"), given_frame_records(0, [0, 100000, 200000]))
        b = write_jsonl(self.output_path("scan-1.jsonl"), given_frame_records(1, [20000, 100000, 220000]))

        # WHEN
        merged = list(merge_frames([read_frames(b), read_frames(a)]))

        # THEN
        self.assertEqual([(0, 0), (20000, 1), (100000, 0), (100000, 1), (200000, 0), (220000, 1)],
                         [(f.t_us, f.scanner_id) for f in merged])

    def test_find_scan_streams(self):
        # GIVEN
        for name in ("scan-0.jsonl", "scan-12.jsonl", "scan-a.jsonl", "poses.jsonl"):
            write_jsonl(self.output_path("streams", name), [])

        # WHEN
        streams = find_scan_streams(os.path.join(self.test_output_dir, "streams"))

        # THEN
        self.assertEqual([0, 12], sorted(streams))
        self.assertTrue(streams[12].endswith("scan-12.jsonl"))

    def test_find_scan_streams_errors(self):
        # GIVEN
        os.makedirs(os.path.join(self.test_output_dir, "empty"))

        # THEN
        with self.assertRaises(BuildMonitorIOError):
            find_scan_streams(os.path.join(self.test_output_dir, "empty"))
        with self.assertRaises(BuildMonitorIOError):
            find_scan_streams(os.path.join(self.test_output_dir, "missing"))

    def test_read_poses_interpolates(self):
        # GIVEN
        path = write_jsonl(self.output_path("poses.jsonl"),
                           given_pose_records([0, 1000000], degrees=[0.0, 90.0]))

        # WHEN
        poses = read_poses(path)
        middle = poses.at(0.5)

        # THEN
        self.assertEqual(2, len(poses))
        self.assertEqual(0.0, poses.start)
        self.assertEqual(1.0, poses.end)
        self.assert_points_close([5.0, 0.0, 30.0], middle.translation)
        self.assert_points_close(RigidTransform.rot_z(45.0).rotation, middle.rotation, atol=1e-9)
        self.assert_rigid(middle)
        self.assert_points_close([[2.5, 0.0, 30.0], [10.0, 0.0, 30.0]], poses.positions([0.25, 7.0]))

    def test_pose_outside_stream(self):
        # GIVEN
        poses = read_poses(write_jsonl(self.output_path("poses.jsonl"), given_pose_records([100000, 200000])))

        # THEN
        self.assertTrue(poses.covers(0.1))
        self.assertFalse(poses.covers(0.05))
        with self.assertRaises(BuildMonitorStreamError):
            poses.at(0.25)

    def test_read_poses_drops_duplicates(self):
        # GIVEN
        path = write_jsonl(self.output_path("poses.jsonl"), given_pose_records([0, 10000, 10000, 20000]))

        # WHEN
        poses = read_poses(path)

        # THEN
        self.assertEqual(3, len(poses))
        self.assertEqual(4, poses.stats.records)

    def test_read_poses_errors(self):
        # GIVEN
        backwards = write_jsonl(self.output_path("backwards.jsonl"), given_pose_records([0, 20000, 10000]))
        empty = write_jsonl(self.output_path("empty.jsonl"), [])

        # THEN
        with self.assertRaises(BuildMonitorStreamError):
            read_poses(backwards)
        with self.assertRaises(BuildMonitorStreamError):
            read_poses(empty)

    def test_single_sample_stream(self):
        # GIVEN
        poses = PoseStream([PoseSample.build(0, RigidTransform.from_translation(1.0, 2.0, 3.0))])

        # THEN
        self.assert_points_close([1.0, 2.0, 3.0], poses.at(0.0).translation)

    def test_detect_layers(self):
        # GIVEN
        times = [i * 1000000 for i in range(7)]
        poses = read_poses(write_jsonl(self.output_path("poses.jsonl"),
                                       given_pose_records(times, z_values=[30.0, 30.05, 30.0, 30.8, 30.8, 31.6,
                                                                           31.6])))

        # WHEN
        spans = detect_layers(poses, 0.8)

        # THEN
        self.assertEqual(3, len(spans))
        self.assertEqual((0, 0.0, 3.0), (spans[0].index, spans[0].t_start, spans[0].t_end))
        self.assertEqual((1, 3.0, 5.0, 30.8), (spans[1].index, spans[1].t_start, spans[1].t_end, spans[1].z_tool))
        self.assertEqual((2, 5.0, 6.0), (spans[2].index, spans[2].t_start, spans[2].t_end))
        self.assertEqual({"index": 2, "t_start_s": 5.0, "t_end_s": 6.0, "z_tool_mm": 31.6}, spans[2].to_dict())
        # The small wobble on the first layer stays in it
        self.assertEqual(30.0, spans[0].z_tool)

    def test_detect_layers_across_gradual_climbs(self):
        # GIVEN
        toolpath = self.given_raster_toolpath()
        times_us = np.arange(0, int(toolpath.duration * 1e6), 10000)
        positions = positions_at(toolpath, times_us / 1e6) + np.array([0.0, 0.0, 30.0])
        poses = PoseStream([PoseSample.build(t, RigidTransform.from_translation(*p))
                            for t, p in zip(times_us, positions)])

        # WHEN
        spans = detect_layers(poses, 0.8)

        # THEN
        # Each 0.8 mm climb takes 20 pose samples and opens exactly one layer
        self.assertEqual([0, 1, 2], [span.index for span in spans])
        for span, z_tool in zip(spans, (30.0, 30.8, 31.6)):
            self.assertAlmostEqual(z_tool, span.z_tool, places=6)
        for layer in (1, 2):
            climb_start = toolpath.layer_end_time(layer - 1)
            self.assertGreater(spans[layer].t_start, climb_start)
            self.assertLess(spans[layer].t_start, climb_start + 0.21)
            self.assertEqual(spans[layer].t_start, spans[layer - 1].t_end)
