__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import json
import os
import pickle
import shutil
from unittest import TestCase

import yaml
from parameterized import parameterized

from buildmonitor import conf
from buildmonitor.conf import BuildMonitorConfig
from buildmonitor.exception import BuildMonitorConfigError


class TestConf(TestCase):
    RESOURCES_DIR = os.path.normpath(
        os.path.join(os.path.abspath(os.path.dirname(__file__)), "resources"))

    def setUp(self):
        conf.DEFAULT_CONFIG_DIR = os.path.join(os.path.abspath(os.path.dirname(__file__)), ".config")
        self.test_output_dir = os.path.join(conf.DEFAULT_CONFIG_DIR, "output")

    def tearDown(self):
        if os.path.exists(conf.DEFAULT_CONFIG_DIR):
            shutil.rmtree(conf.DEFAULT_CONFIG_DIR)

    def test_provision_config(self):
        # WHEN
        config_path = os.path.join(conf.DEFAULT_CONFIG_DIR, "config.json")
        self.assertFalse(os.path.exists(config_path))

        # GIVEN
        config = BuildMonitorConfig(data={
            "output_dir": self.test_output_dir
        })

        # THEN
        self.assertEqual(config_path, config.config_path)
        self.assertFalse(os.path.exists(config_path))
        self.assertEqual(2.0, config.voxel_size_mm)
        self.assertEqual(6.0, config.truncation)
        self.assertEqual(10.0, config.active_radius_mm)
        self.assertEqual(4.0, config.active_weight_cap)
        self.assertEqual(128.0, config.max_weight)
        self.assertEqual(1.0, config.global_tolerance_mm)
        self.assertEqual(0.5, config.local_threshold)
        self.assertEqual(10.0, config.min_region_area_mm2)
        self.assertEqual(2, config.k_miss)
        self.assertEqual("xy", config.overlap_mode)
        self.assertEqual(3, len(config.profilers))
        self.assertEqual([0.0, 120.0, 240.0], [p["azimuth_deg"] for p in config.profilers])
        self.assertEqual(640, config.profilers[0]["points_per_frame"])
        self.assertTrue(config.occluder["enabled"])
        self.assertEqual([], config.defects)
        self.assertEqual(self.test_output_dir, config.output_dir)
        self.assertIsNone(config.not_a_key)
        self.assertIn("voxel_size_mm", config)
        self.assertNotIn("not_a_key", config)
        self.assertIs(config, config.validate())

        # GIVEN
        config.save()

        # THEN
        self.assertTrue(os.path.exists(config_path))
        with open(config_path, "r") as f:
            persisted = json.load(f)
        self.assertEqual(2.0, persisted["voxel_size_mm"])
        self.assertEqual(self.test_output_dir, persisted["output_dir"])
        self.assertEqual("buildmonitor.constants.Constants", persisted["constants_class"])

    def test_default_amplitude_is_calibrated(self):
        # GIVEN
        config = BuildMonitorConfig()
        deposition = config.deposition

        # THEN
        # One 30 mm/s pass at 2 mm spacing with a 3 mm plume grows one 0.8 mm layer
        self.assertAlmostEqual(0.8 * 30.0 * 2.0 / (2.0 * 3.141592653589793 * 3.0 ** 2), deposition["A_mm_per_s"],
                               places=12)

    def test_override_default(self):
        # GIVEN
        # Default is 2.0
        config = BuildMonitorConfig(data={
            "voxel_size_mm": 1.0
        })

        self.assertEqual(1.0, config.voxel_size_mm)
        self.assertEqual(3.0, config.truncation)

    def test_set_overrides(self):
        # GIVEN
        config = BuildMonitorConfig(overrides=["truncation_mm=5", "deposition.sigma_mm=2.5",
                                               "profilers.1.noise_sigma_mm=0.1", "occluder.enabled=false"])

        # THEN
        self.assertEqual(5.0, config.truncation)
        self.assertEqual(2.5, config.deposition["sigma_mm"])
        self.assertEqual(0.8488263631567751, config.deposition["A_mm_per_s"])
        self.assertEqual(0.1, config.profilers[1]["noise_sigma_mm"])
        self.assertEqual(0.05, config.profilers[0]["noise_sigma_mm"])
        self.assertFalse(config.occluder["enabled"])

    def test_load_from_json_file(self):
        # WHEN
        config = BuildMonitorConfig(config_path=os.path.join(self.RESOURCES_DIR, "config.json"))

        # THEN
        self.assertEqual(1.0, config.voxel_size_mm)
        self.assertEqual(3.0, config.truncation)
        self.assertEqual(7, config.seed)
        self.assertEqual(160, config.profilers[2]["points_per_frame"])
        # Untouched defaults survive
        self.assertEqual(0.5, config.local_threshold)
        config.validate()

    def test_load_from_yaml_file(self):
        # WHEN
        config = BuildMonitorConfig(config_path=os.path.join(self.RESOURCES_DIR, "config.yml"))

        # THEN
        self.assertEqual(5.0, config.truncation)
        self.assertEqual("3d", config.overlap_mode)
        # Nested blocks merge key by key
        self.assertEqual(2.5, config.deposition["sigma_mm"])
        self.assertEqual(0.8488263631567751, config.deposition["A_mm_per_s"])

    def test_load_missing_file(self):
        with self.assertRaises(BuildMonitorConfigError):
            BuildMonitorConfig(config_path=os.path.join(conf.DEFAULT_CONFIG_DIR, "missing.json"))

    def test_load_malformed_file(self):
        # GIVEN
        os.makedirs(conf.DEFAULT_CONFIG_DIR)
        config_path = os.path.join(conf.DEFAULT_CONFIG_DIR, "malformed.yml")
        with open(config_path, "w") as f:
            f.write("- just\n- a list\n")

        # WHEN
        with self.assertRaises(BuildMonitorConfigError):
            BuildMonitorConfig(config_path=config_path)

    def test_update_config(self):
        # GIVEN
        config = BuildMonitorConfig()

        # WHEN
        config.update_config("k_miss", 3)
        config.update_config("deposition.sigma_mm", 2.0)

        # THEN
        self.assertEqual(3, config.k_miss)
        self.assertEqual(2.0, config.deposition["sigma_mm"])
        with open(config.config_path, "r") as f:
            persisted_config = yaml.safe_load(f)
            self.assertEqual(3, persisted_config["k_miss"])
            self.assertEqual(2.0, persisted_config["deposition"]["sigma_mm"])

    def test_pickle(self):
        # GIVEN
        config = BuildMonitorConfig(data={"k_miss": 5})

        # WHEN
        restored = pickle.loads(pickle.dumps(config))

        # THEN
        self.assertEqual(5, restored.k_miss)
        self.assertEqual(config.as_dict(), restored.as_dict())
        self.assertEqual(type(config.constants), type(restored.constants))

    @parameterized.expand([
        ("voxel_size_mm", 0),
        ("voxel_size_mm", -1.0),
        ("truncation_mm", 1.0),
        ("active_change_threshold_mm", -0.1),
        ("local_threshold", 0.0),
        ("local_threshold", 1.5),
        ("k_miss", 0),
        ("trend_window", 2),
        ("ingest_workers", 0),
        ("overlap_mode", "2d"),
        ("quadrature_dt_s", 0),
        ("stream_gap_warning_s", "soon"),
        ("profilers", []),
    ])
    def test_validate_rejects(self, key, value):
        # GIVEN
        config = BuildMonitorConfig(data={key: value})

        # WHEN
        with self.assertRaises(BuildMonitorConfigError) as cm:
            config.validate()

        # THEN
        self.assertIn("profiler" if key == "profilers" else key, str(cm.exception))

    def test_change_threshold_defaults_to_half_truncation(self):
        # GIVEN
        config = BuildMonitorConfig(data={"voxel_size_mm": 1.0, "active_change_threshold_mm": None})

        # WHEN
        config.validate()

        # THEN
        self.assertEqual(1.5, config.active_change_threshold)
        self.assertEqual(0.1, BuildMonitorConfig().active_change_threshold)

    def test_validate_rejects_duplicate_profiler_ids(self):
        # GIVEN
        config = BuildMonitorConfig(overrides=["profilers.1.id=0"])

        # WHEN
        with self.assertRaises(BuildMonitorConfigError) as cm:
            config.validate()

        # THEN
        self.assertIn("profilers.1.id", str(cm.exception))

    def test_validate_rejects_bad_deposition(self):
        with self.assertRaises(BuildMonitorConfigError):
            BuildMonitorConfig(overrides=["deposition.sigma_mm=0"]).validate()
