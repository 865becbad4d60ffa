__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import json
import math

import numpy as np

from buildmonitor.deposition import DepositionModel, HeightField, PlantedDefect, deposit_schedule
from buildmonitor.exception import BuildMonitorReferenceError
from buildmonitor.reference import (ReferenceBuilder, ReferenceModel, ReferenceSettings, build_reference,
                                    heightfield_to_grid, reference_mesh)
from buildmonitor.toolpath import deposition_schedule, raster_layers
from tests.unittestcase import UnitTestCase

FINE = ReferenceSettings(voxel_size=1.0, truncation=3.0)


class TestReference(UnitTestCase):
    def given_model(self):
        with open(self.resource("deposition.json"), "r") as f:
            return DepositionModel.from_config(json.load(f))

    def test_settings_from_config(self):
        # WHEN
        settings = ReferenceSettings.from_config(self.given_fixture_config())

        # THEN
        self.assertEqual(1.0, settings.voxel_size)
        self.assertEqual(3.0, settings.truncation)
        self.assertEqual(0.5, settings.cell)
        self.assertEqual((), settings.defects)

    def test_heightfield_to_grid_flat(self):
        # GIVEN
        h = HeightField((-10.0, -10.0), 0.5, (41, 41), np.ones((41, 41)))

        # WHEN
        grid = heightfield_to_grid(h, 1.0, 3.0)

        # THEN
        self.assertAlmostEqual(1.0, grid.surface_height(0.5, 0.5), places=12)
        D, W = grid.lookup([[0, 0, 0], [0, 0, 1], [-11, 0, 1], [0, 0, 5]])
        self.assert_points_close([-0.5, 0.5, 0.0, 0.0], D)
        # Columns whose centers fall off the plate and voxels past the band stay unobserved
        self.assert_points_close([1.0, 1.0, 0.0, 0.0], W)

    def test_heightfield_to_grid_slope(self):
        # GIVEN
        h = HeightField((-10.0, -10.0), 0.5, (41, 41))
        xx, _ = np.meshgrid(h.xs, h.ys, indexing="ij")
        h.heights[:] = 0.5 * xx + 4.0

        # WHEN
        grid = heightfield_to_grid(h, 1.0, 3.0)

        # THEN
        # Distances along the normal of the plane z = 0.5 x + 4
        keys = np.array([[2, 0, 5], [-3, 4, 2], [0, 0, 3]])
        centers = grid.voxel_center(keys)
        expected = (centers[:, 2] - 0.5 * centers[:, 0] - 4.0) / math.sqrt(1.25)
        D, W = grid.lookup(keys)
        self.assert_points_close(expected, D, atol=1e-9)
        self.assert_points_close(np.ones(3), W)

    def test_build_reference_grows_layers(self):
        # GIVEN
        model = self.given_model()
        toolpath = raster_layers(size_mm=20.0, layers=2, spacing=2.0)

        # WHEN
        first = build_reference(toolpath, model, layer=0, settings=FINE)
        second = build_reference(toolpath, model, layer=1, settings=FINE)

        # THEN
        self.assertEqual(0, first.layer)
        self.assertAlmostEqual(toolpath.layer_end_time(0), first.t, places=9)
        self.assertAlmostEqual(0.8, float(first.heights.height_at(0.0, 0.0)), delta=0.02)
        self.assertGreater(float(second.heights.height_at(0.0, 0.0)), float(first.heights.height_at(0.0, 0.0)) + 0.7)
        self.assertAlmostEqual(float(first.heights.height_at(0.0, 0.0)), first.grid.surface_height(0.5, 0.5),
                               delta=0.02)
        self.assertEqual({"layer", "t_s", "steps", "volume_mm3", "max_height_mm"}, set(first.to_dict()))

    def test_build_reference_matches_direct_deposit(self):
        # GIVEN
        model = self.given_model()
        toolpath = self.given_raster_toolpath()
        t = toolpath.layer_end_time(1)

        # WHEN
        ref = build_reference(toolpath, model, t=t, settings=FINE)

        # THEN
        expected = ref.heights.copy()
        expected.heights[:] = 0.0
        deposit_schedule(expected, model, deposition_schedule(toolpath, 0.01).upto(t))
        self.assert_points_close(expected.heights, ref.heights.heights, atol=1e-12)
        self.assertIsNone(ref.layer)

    def test_builder_matches_one_shot(self):
        # GIVEN
        model = self.given_model()
        toolpath = self.given_raster_toolpath()
        builder = ReferenceBuilder(toolpath, model, FINE)

        # WHEN
        layers = [builder.advance_to_layer(layer) for layer in toolpath.layer_indices]

        # THEN
        for layer, incremental in zip(toolpath.layer_indices, layers):
            one_shot = build_reference(toolpath, model, layer=layer, settings=FINE)
            self.assertEqual(one_shot.steps, incremental.steps)
            self.assert_points_close(one_shot.heights.heights, incremental.heights.heights, atol=1e-9)
        # Returned models do not change as the builder grows on
        self.assertLess(layers[0].heights.volume(), layers[2].heights.volume())
        self.assertEqual(len(builder.schedule), layers[2].steps)

    def test_builder_rejects(self):
        # GIVEN
        toolpath = self.given_raster_toolpath()
        builder = ReferenceBuilder(toolpath, self.given_model(), FINE)
        builder.advance_to(1.0)

        # THEN
        with self.assertRaises(BuildMonitorReferenceError):
            builder.advance_to(0.5)
        with self.assertRaises(BuildMonitorReferenceError):
            builder.advance_to(toolpath.duration + 1.0)
        with self.assertRaises(BuildMonitorReferenceError):
            builder.advance_to_layer(7)
        with self.assertRaises(BuildMonitorReferenceError):
            build_reference(toolpath, self.given_model(), layer=0, t=1.0)

    def test_quadrature_step_follows_plume_width(self):
        # GIVEN
        narrow = DepositionModel.from_config({"A_mm_per_s": 1.0, "sigma_mm": 0.5})

        # WHEN
        builder = ReferenceBuilder(self.given_raster_toolpath(), narrow, FINE)

        # THEN
        # 0.5 mm / (2 · 50 mm/s)
        self.assertTrue(np.all(builder.schedule.dt <= 0.005 + 1e-12))

    def test_reference_with_defect(self):
        # GIVEN
        model = self.given_model()
        toolpath = raster_layers(size_mm=20.0, layers=1, spacing=2.0)
        settings = ReferenceSettings(voxel_size=1.0, truncation=3.0,
                                     defects=(PlantedDefect((0.0, 0.0), 3.0, 0.0),))

        # WHEN
        nominal = build_reference(toolpath, model, settings=FINE)
        starved = build_reference(toolpath, model, settings=settings)

        # THEN
        self.assertEqual(0.0, float(starved.heights.height_at(0.0, 0.0)))
        self.assertLess(starved.heights.volume(), nominal.heights.volume())

    def test_reference_distance(self):
        # GIVEN
        h = HeightField((-10.0, -10.0), 0.5, (41, 41), np.ones((41, 41)))
        ref = ReferenceModel(0, 1.0, h, heightfield_to_grid(h, 1.0, 3.0), 1)

        # WHEN
        values, valid = ref.distance([[0.0, 0.0, 1.4], [0.0, 0.0, 9.0], [50.0, 0.0, 1.0]])

        # THEN
        self.assertEqual([True, False, False], valid.tolist())
        self.assertAlmostEqual(0.4, values[0], places=9)

    def test_reference_mesh(self):
        # GIVEN
        model = self.given_model()
        toolpath = raster_layers(size_mm=20.0, layers=1, spacing=2.0)
        ref = build_reference(toolpath, model, layer=0, settings=FINE)

        # WHEN
        mesh = reference_mesh(ref)

        # THEN
        self.assertFalse(mesh.is_empty)
        x, y, z = mesh.vertices.T
        inner = (np.abs(x) < 25.0) & (np.abs(y) < 25.0)
        self.assert_points_close(ref.heights.height_at(x[inner], y[inner]), z[inner], atol=0.05)

    def test_reference_mesh_before_deposition(self):
        # GIVEN
        ref = build_reference(self.given_raster_toolpath(), self.given_model(), t=0.0, settings=FINE)

        # THEN
        self.assertTrue(ref.is_empty)
        with self.assertRaises(BuildMonitorReferenceError):
            reference_mesh(ref)
