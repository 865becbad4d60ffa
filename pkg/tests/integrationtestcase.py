__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import os
import shutil

from buildmonitor import conf
from buildmonitor.conf import BuildMonitorConfig
from buildmonitor.deposition import DepositionModel
from buildmonitor.monitor import run_monitor
from buildmonitor.scansim import SimulationSettings, VirtualProfiler, run_simulation
from buildmonitor.toolpath import parse_toolpath
from tests.testcase import TestCase


class IntegrationTestCase(TestCase):
    """
    Simulates a whole build once per class and runs the monitor over the recorded streams, so each test only
    inspects outputs. Subclasses set ``config_data`` to change the build, for example to plant defects.
    """

    RESOURCES_DIR = os.path.normpath(
        os.path.join(os.path.abspath(os.path.dirname(__file__)), "resources"))

    config_data = {}

    @classmethod
    def setUpClass(cls):
        conf.DEFAULT_CONFIG_DIR = os.path.join(os.path.abspath(os.path.dirname(__file__)), ".integration-config",
                                               cls.__name__)
        cls.test_output_dir = os.path.join(conf.DEFAULT_CONFIG_DIR, "output")
        cls.stream_dir = os.path.join(cls.test_output_dir, "streams")
        cls.run_dir = os.path.join(cls.test_output_dir, "run")

        cls.test_config = BuildMonitorConfig(config_path=os.path.join(cls.RESOURCES_DIR, "config.json"),
                                             data={"output_dir": cls.test_output_dir, **cls.config_data})
        cls.test_config.validate()
        cls.toolpath = parse_toolpath(os.path.join(cls.RESOURCES_DIR, "raster-3layer.csv"))

        cls.simulation = run_simulation(cls.toolpath,
                                        DepositionModel.from_config(cls.test_config.deposition),
                                        [VirtualProfiler.from_config(block) for block in cls.test_config.profilers],
                                        cls.stream_dir,
                                        SimulationSettings.from_config(cls.test_config))
        cls.result = run_monitor(cls.test_config, cls.toolpath, cls.stream_dir, cls.run_dir)

    @classmethod
    def tearDownClass(cls):
        if os.path.exists(conf.DEFAULT_CONFIG_DIR):
            shutil.rmtree(conf.DEFAULT_CONFIG_DIR)

    def tracks_covering(self, x, y, defect_class):
        """
        The tracks of ``defect_class`` whose latest footprint covers ``(x, y)``.
        """
        return [track for track in self.result.tracker.tracks
                if track.defect_class == defect_class and
                track.latest.bbox.min[0] <= x <= track.latest.bbox.max[0] and
                track.latest.bbox.min[1] <= y <= track.latest.bbox.max[1]]
