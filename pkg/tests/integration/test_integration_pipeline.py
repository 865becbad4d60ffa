__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import os
import time

import numpy as np
import pandas as pd

from buildmonitor.constants import Constants
from buildmonitor.deposition import DepositionModel, defects_from_config
from buildmonitor.fusion import ActiveRegion, SparseTsdfGrid, integrate_frame
from buildmonitor.meshing import read_ply
from buildmonitor.reference import ReferenceBuilder, ReferenceSettings
from buildmonitor.util import read_json
from tests.integrationtestcase import IntegrationTestCase
from tests.testcase import TestCase


class TestIntegrationNominal(IntegrationTestCase):
    def test_every_layer_analyzed(self):
        # THEN
        manifest = self.result.manifest
        self.assertEqual([0, 1, 2], manifest["analyzed_layers"])
        self.assertEqual(sum(self.simulation.frames.values()), manifest["frames"]["integrated"])
        self.assertEqual(0, manifest["frames"]["unparseable"])
        for layer in (0, 1, 2):
            report = read_json(os.path.join(self.run_dir, Constants.LAYER_REPORT_FILENAME.format(layer=layer)))
            self.assertEqual(layer, report["layer"])

    def test_fused_surface_matches_truth(self):
        # THEN
        validation = self.result.manifest["validation"]
        self.assertLessEqual(validation["rms_dev_mm"], 0.3)
        self.assertLess(abs(validation["mean_dev_mm"]), 0.3)

        # The part stands out of the plate in the last fused mesh
        fused = read_ply(os.path.join(self.run_dir, Constants.FUSED_MESH_FILENAME.format(layer=2)))
        center = np.linalg.norm(fused.vertices[:, :2], axis=1) < 2.0
        self.assertTrue(np.any(center))
        self.assertAlmostEqual(float(self.simulation.truth.height_at(0.0, 0.0)),
                               float(np.median(fused.vertices[center, 2])), delta=0.4)

    def test_no_global_regions_on_any_layer(self):
        for layer in self.result.manifest["analyzed_layers"]:
            # WHEN
            report = self.result.reports[layer]

            # THEN
            classes = {region["class"] for region in report["regions"]}
            self.assertNotIn(Constants.OVERBUILD, classes, f"layer {layer}")
            self.assertNotIn(Constants.UNDERBUILD, classes, f"layer {layer}")
            self.assertLessEqual(report["global"]["mean_abs_dev_mm"], 0.15, f"layer {layer}")

    def test_ingest_keeps_up_with_frame_rate(self):
        self.assertGreaterEqual(self.result.manifest["timing"]["frames_per_s"], 10.0)

    def test_reference_grows_with_layers(self):
        # WHEN
        heights = [self.result.reports[layer]["reference"]["max_height_mm"] for layer in (0, 1, 2)]

        # THEN
        self.assertTrue(0.5 < heights[0] < 1.2)
        self.assertTrue(heights[0] < heights[1] < heights[2])

    def test_no_underbuild_at_center(self):
        self.assertEqual([], self.tracks_covering(0.0, 0.0, Constants.UNDERBUILD))

    def test_tracks_csv(self):
        # WHEN
        frame = pd.read_csv(os.path.join(self.run_dir, Constants.TRACKS_CSV_FILENAME))

        # THEN
        self.assertEqual(list(Constants.TRACK_CSV_COLUMNS), list(frame.columns))
        self.assertEqual(len(self.result.tracker.to_frame()), len(frame))


class TestIntegrationStarvedDisc(IntegrationTestCase):
    # Nothing lands on a 3 mm disc at the part's center, so a hole deepens by a layer each layer
    config_data = {
        "global_tolerance_mm": 0.5,
        "defects": [{"center": [0.0, 0.0], "radius_mm": 3.0, "gain": 0.0}],
    }

    def hole_track(self):
        # The deepest underbuild over the disc; a ring of flank lag could also span the center
        return max(self.tracks_covering(0.0, 0.0, Constants.UNDERBUILD), key=lambda track: track.latest.peak_dev)

    def test_truth_has_hole(self):
        self.assertEqual(0.0, float(self.simulation.truth.height_at(0.0, 0.0)))

    def test_hole_tracked_as_amplifying_underbuild(self):
        # WHEN
        track = self.hole_track()

        # THEN
        self.assertEqual([0, 1, 2], [entry.layer for entry in track.entries])
        peaks = [entry.peak_dev for entry in track.entries]
        self.assertTrue(peaks[0] < peaks[1] < peaks[2])
        self.assertGreater(peaks[2], 2.0)
        self.assertEqual(Constants.AMPLIFYING, track.trend)
        self.assertEqual(Constants.ACTIVE, track.status)

    def test_hole_in_layer_reports(self):
        for layer in (0, 1, 2):
            # WHEN
            report = self.result.reports[layer]

            # THEN
            holes = [region for region in report["regions"] if region["class"] == Constants.UNDERBUILD and
                     region["bbox"]["min"][0] <= 0.0 <= region["bbox"]["max"][0] and
                     region["bbox"]["min"][1] <= 0.0 <= region["bbox"]["max"][1]]
            self.assertTrue(holes, f"layer {layer}")
            self.assertGreater(max(region["area_mm2"] for region in holes), 4.0)
            self.assertTrue(os.path.exists(os.path.join(self.run_dir, Constants.DEVIATION_CLASS_MESH_FILENAME.format(
                layer=layer, defect_class=Constants.UNDERBUILD))))

    def test_hole_in_tracks_csv(self):
        # GIVEN
        track = self.hole_track()

        # WHEN
        frame = pd.read_csv(os.path.join(self.run_dir, Constants.TRACKS_CSV_FILENAME))

        # THEN
        rows = frame[frame["track_id"] == track.track_id]
        self.assertEqual([0, 1, 2], rows["layer"].tolist())
        self.assertEqual({Constants.UNDERBUILD}, set(rows["class"]))


class PlantedDiscChecks:
    """
    Checks for a disc at the part's center whose deposition rate is off by half. The monitor's reference knows
    nothing of the disc, so it should surface as one track of ``defect_class``.
    """

    defect_class = None
    # +1 where the disc builds high, -1 where it builds low
    sign = 1.0

    def center_excess(self):
        """
        How far the planted build stands above (or below) the nominal reference at the disc's center, per layer.
        """
        model = DepositionModel.from_config(self.test_config.deposition)
        planted = ReferenceBuilder(self.toolpath, model, ReferenceSettings.from_config(
            self.test_config, defects_from_config(self.test_config.defects)))
        nominal = ReferenceBuilder(self.toolpath, model, ReferenceSettings.from_config(self.test_config))
        excess = []
        for layer in self.result.manifest["analyzed_layers"]:
            above = planted.advance_to_layer(layer).heights.height_at(0.0, 0.0)
            excess.append(float(above - nominal.advance_to_layer(layer).heights.height_at(0.0, 0.0)))
        return excess

    def test_one_track_over_the_disc(self):
        # WHEN
        tracks = self.tracks_covering(0.0, 0.0, self.defect_class)

        # THEN
        self.assertEqual(1, len(tracks))
        self.assertEqual(Constants.ACTIVE, tracks[0].status)

    def test_detected_at_predicted_layer(self):
        # GIVEN
        excess = self.center_excess()
        tolerance = float(self.test_config.global_tolerance_mm)
        predicted = next(layer for layer, value in enumerate(excess) if abs(value) > tolerance)

        # WHEN
        first = self.tracks_covering(0.0, 0.0, self.defect_class)[0].entries[0]

        # THEN
        self.assertLessEqual(abs(first.layer - predicted), 1)
        self.assertLess(float(np.linalg.norm(first.centroid[:2])), float(self.test_config.voxel_size_mm))
        self.assertAlmostEqual(abs(excess[first.layer]), first.peak_dev, delta=0.25)

    def test_truth_departs_from_nominal(self):
        # WHEN
        excess = self.center_excess()

        # THEN
        self.assertTrue(all(value * self.sign > 0 for value in excess))
        self.assertTrue(abs(excess[0]) < abs(excess[1]) < abs(excess[2]))


class TestIntegrationOverbuildDisc(PlantedDiscChecks, IntegrationTestCase):
    defect_class = Constants.OVERBUILD
    sign = 1.0
    config_data = {
        "global_tolerance_mm": 0.5,
        "defects": [{"center": [0.0, 0.0], "radius_mm": 3.0, "gain": 1.5}],
    }


class TestIntegrationUnderbuildDisc(PlantedDiscChecks, IntegrationTestCase):
    defect_class = Constants.UNDERBUILD
    sign = -1.0
    config_data = {
        "global_tolerance_mm": 0.5,
        "defects": [{"center": [0.0, 0.0], "radius_mm": 3.0, "gain": 0.5}],
    }


class TestIntegrationThroughput(TestCase):
    def test_three_profiles_per_frame_at_two_mm_voxels(self):
        # GIVEN
        rng = np.random.default_rng(11)
        grid = SparseTsdfGrid(voxel_size=2.0)
        frames = 300
        u = np.linspace(-20.0, 20.0, 640)
        azimuths = np.radians([0.0, 120.0, 240.0])
        profiles = []
        for f in range(frames):
            nozzle = np.array([-20.0 + 40.0 * f / frames, 5.0 * np.sin(f / 15.0), 0.0])
            frame = []
            for azimuth in azimuths:
                across = np.array([-np.sin(azimuth), np.cos(azimuth)])
                xy = nozzle[:2] + np.outer(u, across)
                z = 0.5 * np.sin(xy[:, 0] / 5.0) + rng.normal(0.0, 0.02, len(u))
                origin = (nozzle[0] + 8.0 * np.cos(azimuth), nozzle[1] + 8.0 * np.sin(azimuth), 50.0)
                frame.append((origin, np.column_stack([xy, z])))
            profiles.append((ActiveRegion(tuple(nozzle), 10.0), frame))

        # WHEN
        started = time.perf_counter()
        for active, frame in profiles:
            for origin, points in frame:
                integrate_frame(grid, origin, points, active)
        mean_frame_s = (time.perf_counter() - started) / frames

        # THEN
        self.assertLess(mean_frame_s, 0.1)
        self.assertGreater(grid.block_count, 0)
