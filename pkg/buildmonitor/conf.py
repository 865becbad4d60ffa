__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import copy
import json
import logging
import os
from typing import Any, Dict, Iterable, List, Optional

import yaml

from buildmonitor import util
from buildmonitor.exception import BuildMonitorConfigError

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_DIR = os.path.join(os.path.expanduser("~"), ".config", "buildmonitor")

# Blocks whose keys are merged individually, rather than replaced wholesale, when overridden
NESTED_BLOCKS = ("deposition", "occluder")


def _default_profilers() -> List[Dict[str, Any]]:
    return [{
        "id": i,
        "azimuth_deg": 120.0 * i,
        "radius_mm": 8.0,
        "height_mm": 50.0,
        "tilt_deg": 0.0,
        "points_per_frame": 640,
        "fov_width_mm": 60.0,
        "frame_rate_hz": 10.0,
        "noise_sigma_mm": 0.05,
    } for i in range(3)]


class BuildMonitorConfig:
    """
    An object containing ``build-monitor``'s configuration. The state of this object is populated from the config
    file, if present, when it is instantiated, and it is also persisted back to the config file when :func:`~save`
    is called. The config file may be JSON or YAML.

    If overrides are passed in ``data`` parameter when this object is instantiated, they will be used to populate the
    new object, but not persisted to the config file until :func:`~save` is called.
    """

    def __init__(self,
                 config_path: Optional[str] = None,
                 data: Optional[Dict[str, Any]] = None,
                 overrides: Optional[Iterable[str]] = None) -> None:
        #: The path to use for the config file.
        self.config_path: str = os.path.join(DEFAULT_CONFIG_DIR, "config.json") \
            if config_path is None else config_path

        # Provision default configs
        self._data: Dict[str, Any] = {
            "voxel_size_mm": 2.0,
            # None means three voxels
            "truncation_mm": None,
            "active_radius_mm": 10.0,
            # Prior weight is clamped to this in the active region when a measurement disagrees with the voxel
            "active_weight_cap": 4.0,
            # A fixed 0.1 mm rather than δ/2, which spans several layers at 2 mm voxels; None means δ/2
            "active_change_threshold_mm": 0.1,
            "max_weight": 128.0,
            "global_tolerance_mm": 1.0,
            "local_threshold": 0.5,
            "min_region_area_mm2": 10.0,
            "k_miss": 2,
            "trend_slope_mm_per_layer": 0.05,
            "trend_window": 3,
            "overlap_mode": "xy",
            "layer_thickness_mm": 0.8,
            "line_spacing_mm": 2.0,
            "standoff_mm": 30.0,
            "heightfield_cell_mm": 0.5,
            "substrate_margin_mm": 20.0,
            "quadrature_dt_s": 0.01,
            "pose_rate_hz": 100.0,
            "vertex_dwell_s": 0.0,
            "stream_gap_warning_s": 1.0,
            "ingest_workers": 1,
            "seed": 0,
            "output_dir": os.path.join(os.getcwd(), "output"),
            "constants_class": "buildmonitor.constants.Constants",
            "calibration_path": None,
            "deposition": {
                # Calibrated so one 30 mm/s raster pass at 2 mm spacing grows 0.8 mm with a 3 mm plume
                "A_mm_per_s": 0.8488263631567751,
                "sigma_mm": 3.0,
                "zeta": {"law": "cos_power", "p": 2.0, "step_deg": 5.0},
            },
            "profilers": _default_profilers(),
            "occluder": {
                "enabled": True,
                "radius_mm": 3.3,
                "length_mm": 268.0,
            },
            "defects": [],
        }

        if os.path.exists(self.config_path):
            with open(self.config_path, "r") as config_file:
                logger.debug(f"Loading config from {self.config_path} ...")
                try:
                    config = yaml.safe_load(config_file)
                except yaml.YAMLError as e:
                    raise BuildMonitorConfigError(f"Config file {self.config_path} could not be parsed: {e}")
                if config is not None:
                    if not isinstance(config, dict):
                        raise BuildMonitorConfigError(f"Config file {self.config_path} must hold a mapping.")
                    config.update(data or {})
                    data = config
        elif config_path is not None:
            raise BuildMonitorConfigError(f"Config file not found: {config_path}")

        # Overload defaults if values passed
        self._merge(data or {})

        for option in overrides or []:
            key, value = util.parse_set_option(option)
            util.set_dotted(self._data, key, value)

        self._load_classes()

    def __getattr__(self,
                    key: str) -> Any:
        if key.startswith("__") or key == "_data":
            raise AttributeError(key)
        return self._data.get(key, None)

    def __contains__(self,
                     key: str) -> bool:
        return key in self._data

    def __getstate__(self):
        return self._data

    def __setstate__(self, state):
        self._data = state
        self._load_classes()

    @property
    def truncation(self) -> float:
        """
        The effective truncation distance δ in mm, three voxels unless configured.
        """
        if self._data.get("truncation_mm") is None:
            return 3.0 * float(self._data["voxel_size_mm"])
        return float(self._data["truncation_mm"])

    @property
    def active_change_threshold(self) -> float:
        """
        The disagreement in mm above which an active-region voxel's prior weight is capped, δ/2 unless configured.
        """
        if self._data.get("active_change_threshold_mm") is None:
            return self.truncation / 2.0
        return float(self._data["active_change_threshold_mm"])

    def update_config(self,
                      key: str,
                      value: Any,
                      save: bool = True) -> None:
        """
        Update the given key/value pair in the config object. By default, this update will also be persisted to the
        config file, but if only the object should be updated without persisted, passing ``save=False``. Dotted keys
        address nested blocks.

        :param key: The to be updated.
        :param value: The new value.
        :param save: True if the config should be persisted.
        """
        util.set_dotted(self._data, key, value)

        if key == "constants_class":
            self._load_classes()

        if save:
            self.save()

    def save(self) -> None:
        """
        Persist the current state of this config object to the config file.
        """
        config_dir = os.path.dirname(self.config_path)
        if config_dir and not os.path.exists(config_dir):
            os.makedirs(config_dir)

        with open(self.config_path, "w") as config_file:
            logger.debug(f"Saving config to {self.config_path} ...")

            if self.config_path.endswith(".json"):
                json.dump(self._data, config_file, indent=2, sort_keys=True)
            else:
                yaml.dump(self._data, config_file)

    def as_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self._data)

    def validate(self) -> "BuildMonitorConfig":
        """
        Check that every physical quantity is positive and that the truncation band covers at least one voxel.

        :return: This config, so calls can be chained.
        """
        for key in ("voxel_size_mm", "active_radius_mm", "active_weight_cap", "max_weight",
                    "global_tolerance_mm", "min_region_area_mm2", "trend_slope_mm_per_layer",
                    "layer_thickness_mm", "line_spacing_mm", "standoff_mm", "heightfield_cell_mm",
                    "substrate_margin_mm", "quadrature_dt_s", "pose_rate_hz", "stream_gap_warning_s"):
            self._require_positive(key, self._data.get(key))

        if self._data.get("truncation_mm") is not None:
            self._require_positive("truncation_mm", self._data["truncation_mm"])
        if self._data.get("active_change_threshold_mm") is not None:
            self._require_positive("active_change_threshold_mm", self._data["active_change_threshold_mm"])
        if self.truncation < float(self.voxel_size_mm):
            raise BuildMonitorConfigError(f"truncation_mm ({self.truncation}) must be at least "
                                          f"voxel_size_mm ({self.voxel_size_mm}).")

        if not 0 < float(self.local_threshold) <= 1:
            raise BuildMonitorConfigError(f"local_threshold must be in (0, 1], got {self.local_threshold}.")
        if int(self.k_miss) < 1:
            raise BuildMonitorConfigError(f"k_miss must be at least 1, got {self.k_miss}.")
        if int(self.trend_window) < 3:
            raise BuildMonitorConfigError(f"trend_window must be at least 3, got {self.trend_window}.")
        if int(self.ingest_workers) < 1:
            raise BuildMonitorConfigError(f"ingest_workers must be at least 1, got {self.ingest_workers}.")
        if float(self.vertex_dwell_s) < 0:
            raise BuildMonitorConfigError(f"vertex_dwell_s must not be negative, got {self.vertex_dwell_s}.")
        if self.overlap_mode not in ("xy", "3d"):
            raise BuildMonitorConfigError(f"overlap_mode must be \"xy\" or \"3d\", got \"{self.overlap_mode}\".")

        deposition = self.deposition or {}
        self._require_positive("deposition.A_mm_per_s", deposition.get("A_mm_per_s"))
        self._require_positive("deposition.sigma_mm", deposition.get("sigma_mm"))

        if not self.profilers:
            raise BuildMonitorConfigError("At least one profiler block is required.")
        seen_ids = set()
        for i, profiler in enumerate(self.profilers):
            if profiler.get("id") in seen_ids:
                raise BuildMonitorConfigError(f"profilers.{i}.id {profiler.get('id')} is not unique.")
            seen_ids.add(profiler.get("id"))
            if int(profiler.get("points_per_frame", 0)) < 2:
                raise BuildMonitorConfigError(f"profilers.{i}.points_per_frame must be at least 2.")
            for key in ("fov_width_mm", "frame_rate_hz", "height_mm"):
                self._require_positive(f"profilers.{i}.{key}", profiler.get(key))
            if float(profiler.get("noise_sigma_mm", 0)) < 0:
                raise BuildMonitorConfigError(f"profilers.{i}.noise_sigma_mm must not be negative.")
            if not 0 <= float(profiler.get("tilt_deg", 0)) < 90:
                raise BuildMonitorConfigError(f"profilers.{i}.tilt_deg must be in [0, 90).")

        return self

    def _merge(self,
               data: Dict[str, Any]) -> None:
        for key, value in data.items():
            if key in NESTED_BLOCKS and isinstance(value, dict) and isinstance(self._data.get(key), dict):
                self._data[key].update(value)
            else:
                self._data[key] = value

    def _load_classes(self) -> None:
        constants_class_split = self._data["constants_class"].split(".")

        self.constants = util.load_class(constants_class_split[:-1], constants_class_split[-1])()

    @staticmethod
    def _require_positive(key: str,
                          value: Any) -> None:
        try:
            number = float(value)
        except (TypeError, ValueError):
            raise BuildMonitorConfigError(f"{key} must be a number, got \"{value}\".")
        if not number > 0:
            raise BuildMonitorConfigError(f"{key} must be positive, got {value}.")
