__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import os
import shutil

from buildmonitor import conf
from buildmonitor.conf import BuildMonitorConfig
from buildmonitor.deposition import DepositionModel
from buildmonitor.scansim import SimulationSettings, VirtualProfiler, run_simulation
from buildmonitor.toolpath import parse_toolpath
from tests.testcase import TestCase


class UnitTestCase(TestCase):
    RESOURCES_DIR = os.path.normpath(
        os.path.join(os.path.abspath(os.path.dirname(__file__)), "resources"))

    def setUp(self):
        conf.DEFAULT_CONFIG_DIR = os.path.join(os.path.abspath(os.path.dirname(__file__)), ".config")
        self.test_output_dir = os.path.join(conf.DEFAULT_CONFIG_DIR, "output")
        self.test_config = BuildMonitorConfig(data={
            "output_dir": self.test_output_dir
        })

    def tearDown(self):
        if os.path.exists(conf.DEFAULT_CONFIG_DIR):
            shutil.rmtree(conf.DEFAULT_CONFIG_DIR)

    def resource(self, *parts):
        return os.path.join(self.RESOURCES_DIR, *parts)

    def given_raster_toolpath(self):
        return parse_toolpath(self.resource("raster-3layer.csv"))

    def given_fixture_config(self, **data):
        return BuildMonitorConfig(config_path=self.resource("config.json"),
                                  data={"output_dir": self.test_output_dir, **data})

    def output_path(self, *parts):
        path = os.path.join(self.test_output_dir, *parts)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        return path

    def given_simulated_streams(self, config=None, toolpath=None, name="streams"):
        config = config or self.given_fixture_config()
        toolpath = toolpath or self.given_raster_toolpath()
        profilers = [VirtualProfiler.from_config(block) for block in config.profilers]
        return run_simulation(toolpath, DepositionModel.from_config(config.deposition), profilers,
                              os.path.join(self.test_output_dir, name), SimulationSettings.from_config(config))
