__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import json
import math
import os
import threading
import time
from collections import defaultdict
from unittest.mock import Mock, patch

import numpy as np

from buildmonitor.constants import Constants
from buildmonitor.entity.frame import ProfileFrame
from buildmonitor.entity.pose import PoseSample
from buildmonitor.exception import BuildMonitorIOError, BuildMonitorStreamError
from buildmonitor.fusion import IntegrationResult
from buildmonitor.geomcore import RigidTransform
from buildmonitor.monitor import STAGES, BuildMonitor, run_monitor
from buildmonitor.streams import LayerSpan, PoseStream
from buildmonitor.util import read_json
from tests.unittestcase import UnitTestCase


class TestMonitor(UnitTestCase):
    def given_poses(self):
        return PoseStream([PoseSample.build(0, RigidTransform.from_translation(0.0, 0.0, 30.0)),
                           PoseSample.build(1000000, RigidTransform.from_translation(10.0, 0.0, 30.0))])

    def given_monitor(self, **data):
        return BuildMonitor(self.given_fixture_config(**data), self.given_raster_toolpath(),
                            os.path.join(self.test_output_dir, "run"))

    def test_prepare_frame(self):
        # GIVEN
        monitor = self.given_monitor()
        calibration = {0: RigidTransform.from_translation(0.0, 0.0, 50.0)}
        frame = ProfileFrame.build(500000, 0, [[2.0, 10.0], [3.0, 10.0]], [True, False])

        # WHEN
        origins, points, active = monitor.prepare_frame(frame, self.given_poses(), calibration)

        # THEN
        # Halfway along the pose stream the nozzle is at x = 5
        self.assert_points_close([[7.0, 0.0, 90.0]], points)
        self.assert_points_close([[7.0, 0.0, 80.0]], origins)
        # Nothing is fused yet, so the surface is guessed from the standoff
        self.assert_points_close([5.0, 0.0, 0.0], active.center)
        self.assertEqual(10.0, active.radius)

    def test_prepare_frame_without_valid_samples(self):
        # GIVEN
        monitor = self.given_monitor()
        frame = ProfileFrame.build(500000, 0, [[2.0, 10.0]], [False])

        # WHEN
        prepared = monitor.prepare_frame(frame, self.given_poses(), {0: RigidTransform.identity()})

        # THEN
        self.assertIsNone(prepared)
        self.assert_points_close([5.0, 0.0, 0.0], monitor.active.center)

    def test_prepare_frame_rejects(self):
        # GIVEN
        monitor = self.given_monitor()
        calibration = {0: RigidTransform.identity()}

        # THEN
        with self.assertRaises(BuildMonitorIOError):
            monitor.prepare_frame(ProfileFrame.build(0, 3, [[0.0, 1.0]], [True]), self.given_poses(), calibration)
        with self.assertRaises(BuildMonitorStreamError):
            monitor.prepare_frame(ProfileFrame.build(2000000, 0, [[0.0, 1.0]], [True]), self.given_poses(),
                                  calibration)

    def test_run_monitor(self):
        # GIVEN
        config = self.given_fixture_config()
        toolpath = self.given_raster_toolpath()
        simulation = self.given_simulated_streams(config, toolpath)
        stream_dir = os.path.dirname(simulation.pose_path)
        out_dir = os.path.join(self.test_output_dir, "run")

        # WHEN
        result = run_monitor(config, toolpath, stream_dir, out_dir)

        # THEN
        manifest = result.manifest
        expected_frames = 3 * math.ceil(toolpath.duration * 10.0)
        self.assertEqual([0, 1, 2], manifest["analyzed_layers"])
        self.assertEqual([0, 1, 2], [span["index"] for span in manifest["layers"]])
        self.assertEqual({"read": expected_frames, "integrated": expected_frames, "empty": 0, "unparseable": 0},
                         manifest["frames"])
        self.assertGreater(manifest["points"]["integrated"], 0)
        self.assertEqual(set(STAGES), set(manifest["timing"]["stage_ms"]))
        self.assertEqual(1.0, manifest["grid"]["voxel_size_mm"])
        self.assertEqual(4, len(manifest["stream_stats"]))

        for layer in (0, 1, 2):
            for template in (Constants.LAYER_REPORT_FILENAME, Constants.FUSED_MESH_FILENAME,
                             Constants.GRID_FILENAME, Constants.REFERENCE_MESH_FILENAME,
                             Constants.DEVIATION_MESH_FILENAME):
                name = template.format(layer=layer)
                self.assertIn(name, manifest["files"])
                self.assertTrue(os.path.exists(os.path.join(out_dir, name)), name)
        self.assertIn(Constants.TRACKS_CSV_FILENAME, manifest["files"])
        self.assertEqual([0, 1, 2], read_json(result.manifest_path)["analyzed_layers"])

        # The truth was written beside the streams, so the final surface is validated against it
        self.assertLess(manifest["validation"]["rms_dev_mm"], 0.5)
        self.assertFalse(result.final_mesh.is_empty)

        report = read_json(os.path.join(out_dir, Constants.LAYER_REPORT_FILENAME.format(layer=2)))
        self.assertEqual(2, report["layer"])
        self.assertEqual(2, report["span"]["index"])
        self.assertEqual(2, report["reference"]["layer"])
        self.assertGreater(report["reference"]["max_height_mm"], 2.0)
        self.assertEqual(set(Constants.CLASS_CODES), set(report["global"]["class_counts"]))
        self.assertEqual(len(result.reports[2]["regions"]), len(report["regions"]))

    def test_run_monitor_layer_range(self):
        # GIVEN
        config = self.given_fixture_config()
        toolpath = self.given_raster_toolpath()
        simulation = self.given_simulated_streams(config, toolpath)
        out_dir = os.path.join(self.test_output_dir, "run")

        # WHEN
        result = run_monitor(config, toolpath, os.path.dirname(simulation.pose_path), out_dir, layer_range=(1, 1))

        # THEN
        self.assertEqual([1], result.manifest["analyzed_layers"])
        self.assertEqual([1], sorted(result.reports))
        # Every frame is fused even when only one layer is analyzed
        self.assertEqual(3 * math.ceil(toolpath.duration * 10.0), result.manifest["frames"]["integrated"])
        self.assertTrue(os.path.exists(os.path.join(out_dir, "report-001.json")))
        self.assertFalse(os.path.exists(os.path.join(out_dir, "report-000.json")))
        self.assertFalse(os.path.exists(os.path.join(out_dir, "report-002.json")))
        # The last layer's surface is still extracted for validation
        self.assertIn("validation", result.manifest)

    def test_run_monitor_threaded_ingest(self):
        # GIVEN
        config = self.given_fixture_config(ingest_workers=3)
        toolpath = self.given_raster_toolpath()
        simulation = self.given_simulated_streams(config, toolpath)
        stream_dir = os.path.dirname(simulation.pose_path)

        # WHEN
        monitor = BuildMonitor(config, toolpath, os.path.join(self.test_output_dir, "threaded"))
        result = monitor.run(stream_dir)

        # THEN
        self.assertEqual([0, 1, 2], result.manifest["analyzed_layers"])
        self.assertEqual(3 * math.ceil(toolpath.duration * 10.0), result.manifest["frames"]["integrated"])
        self.assertLess(result.manifest["validation"]["rms_dev_mm"], 0.5)
        self.assertTrue(np.all(np.isfinite(result.final_mesh.vertices)))

    def test_run_monitor_without_calibration(self):
        # GIVEN
        config = self.given_fixture_config()
        toolpath = self.given_raster_toolpath()
        simulation = self.given_simulated_streams(config, toolpath)
        os.remove(simulation.calibration_path)

        # THEN
        with self.assertRaises(BuildMonitorIOError):
            run_monitor(config, toolpath, os.path.dirname(simulation.pose_path),
                        os.path.join(self.test_output_dir, "run"))

    def test_run_monitor_missing_scanner_calibration(self):
        # GIVEN
        config = self.given_fixture_config()
        toolpath = self.given_raster_toolpath()
        simulation = self.given_simulated_streams(config, toolpath)
        config = self.given_fixture_config(calibration_path=self.resource("calibration.json"))
        os.rename(simulation.scan_paths[2], os.path.join(os.path.dirname(simulation.pose_path), "scan-7.jsonl"))

        # THEN
        with self.assertRaises(BuildMonitorIOError):
            run_monitor(config, toolpath, os.path.dirname(simulation.pose_path),
                        os.path.join(self.test_output_dir, "run"))

    def test_prepare_frame_skips_non_finite_samples(self):
        # GIVEN
        monitor = self.given_monitor()
        calibration = {0: RigidTransform.from_translation(0.0, 0.0, 50.0)}
        frame = ProfileFrame.build(500000, 0, [[2.0, 10.0], [float("nan"), 10.0], [3.0, float("inf")]],
                                   [True, True, True])

        # WHEN
        origins, points, _ = monitor.prepare_frame(frame, self.given_poses(), calibration)

        # THEN
        self.assert_points_close([[7.0, 0.0, 90.0]], points)
        self.assert_points_close([[7.0, 0.0, 80.0]], origins)
        self.assertEqual(2, monitor.counters.points_skipped)

    def test_prepare_frame_only_non_finite_samples(self):
        # GIVEN
        monitor = self.given_monitor()
        frame = ProfileFrame.build(500000, 0, [[float("nan"), 10.0]], [True])

        # WHEN
        prepared = monitor.prepare_frame(frame, self.given_poses(), {0: RigidTransform.identity()})

        # THEN
        self.assertIsNone(prepared)
        self.assertEqual(1, monitor.counters.points_skipped)

    def test_run_monitor_with_non_finite_sample(self):
        # GIVEN
        config = self.given_fixture_config()
        toolpath = self.given_raster_toolpath()
        simulation = self.given_simulated_streams(config, toolpath)
        scan_path = simulation.scan_paths[0]
        with open(scan_path) as f:
            lines = f.read().splitlines()
        record = json.loads(lines[0])
        hit = record["valid_mask"].index(1)
        record["points"][hit][0] = float("nan")
        lines[0] = json.dumps(record)
        with open(scan_path, "w") as f:
            f.write("\n".join(lines) + "\n")

        # WHEN
        result = run_monitor(config, toolpath, os.path.dirname(simulation.pose_path),
                             os.path.join(self.test_output_dir, "run"))

        # THEN
        manifest = result.manifest
        self.assertEqual([0, 1, 2], manifest["analyzed_layers"])
        self.assertEqual(0, manifest["frames"]["unparseable"])
        self.assertEqual(3 * math.ceil(toolpath.duration * 10.0), manifest["frames"]["read"])
        self.assertGreaterEqual(manifest["points"]["skipped"], 1)
        self.assertLess(manifest["validation"]["rms_dev_mm"], 0.5)

    def test_threaded_ingest_keeps_scanner_order(self):
        # GIVEN
        monitor = self.given_monitor(ingest_workers=4)
        monitor.finish_layer = Mock()
        calibration = {scanner_id: RigidTransform.identity() for scanner_id in range(3)}
        # Each scanner's samples sit in their own 10 mm band of x, numbered by z
        frames = [ProfileFrame.build(i * 100000, scanner_id, [[scanner_id * 10.0, float(i)]], [True])
                  for i in range(4) for scanner_id in range(3)]
        lock = threading.Lock()
        in_flight = defaultdict(int)
        most_in_flight = defaultdict(int)
        order = defaultdict(list)

        def integrate(grid, origins, points, active):
            scanner_id = int(points[0, 0] // 10.0)
            with lock:
                in_flight[scanner_id] += 1
                most_in_flight[scanner_id] = max(most_in_flight[scanner_id], in_flight[scanner_id])
                order[scanner_id].append(round(float(points[0, 2]) - 30.0))
            time.sleep(0.01)
            with lock:
                in_flight[scanner_id] -= 1
            return IntegrationResult(points=1)

        # WHEN
        with patch("buildmonitor.monitor.integrate_frame", side_effect=integrate):
            monitor.ingest(iter(frames), self.given_poses(), calibration, [LayerSpan(0, 0.0, 1.0, 30.0)])

        # THEN
        self.assertEqual(12, monitor.counters.frames_integrated)
        self.assertEqual({0: 1, 1: 1, 2: 1}, dict(most_in_flight))
        self.assertEqual({0: [0, 1, 2, 3], 1: [0, 1, 2, 3], 2: [0, 1, 2, 3]}, dict(order))
        monitor.finish_layer.assert_called_once()
