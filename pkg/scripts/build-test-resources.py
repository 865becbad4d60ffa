#!/usr/bin/env python

__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import os
import sys

from buildmonitor import util
from buildmonitor.conf import BuildMonitorConfig
from buildmonitor.deposition import calibrated_amplitude, cos_power_table
from buildmonitor.geomcore import calibration_to_dict
from buildmonitor.scansim import VirtualProfiler
from buildmonitor.toolpath import raster_layers, write_toolpath

ROOT_DIR = os.path.normpath(
    os.path.join(os.path.abspath(os.path.dirname(__file__)), ".."))
RESOURCES_DIR = os.path.join(ROOT_DIR, "tests", "resources")


def build_test_resources(args):
    """
    The purpose of this script is to regenerate the fixtures in tests/resources that are derived from code: the
    3-layer raster toolpath (and its copy with a bad segment type), the profiler calibration matching the default
    profiler ring, and the deposition model with a tabulated cos² efficiency law.

    Hand-written fixtures (config.json, config.yml) are left alone. Pass ``--check`` to only report which files
    would change.
    """
    check = "--check" in args
    written = {}

    raster_path = os.path.join(RESOURCES_DIR, "raster-3layer.csv")
    written[raster_path] = write_toolpath(raster_path + ".tmp", raster_layers(size_mm=10.0, layers=3))

    with open(written[raster_path], "r", encoding="utf-8") as f:
        lines = f.read().splitlines(keepends=True)
    # Row 16 is the second infill row of layer 1
    lines[15] = lines[15].replace(",infill,", ",spray,")
    bad_path = os.path.join(RESOURCES_DIR, "bad-seg-type.csv")
    with open(bad_path + ".tmp", "w", encoding="utf-8") as f:
        f.writelines(lines)
    written[bad_path] = bad_path + ".tmp"

    config = BuildMonitorConfig(config_path=os.path.join(RESOURCES_DIR, "config.json"))
    calibration_path = os.path.join(RESOURCES_DIR, "calibration.json")
    profilers = [VirtualProfiler.from_config(block) for block in config.profilers]
    written[calibration_path] = util.write_json(calibration_path + ".tmp",
                                                calibration_to_dict({p.id: p.mount for p in profilers}))

    deposition_path = os.path.join(RESOURCES_DIR, "deposition.json")
    table = cos_power_table(2.0, 15.0)
    written[deposition_path] = util.write_json(deposition_path + ".tmp", {
        "A_mm_per_s": calibrated_amplitude(0.8, 30.0, 2.0, 3.0),
        "sigma_mm": 3.0,
        "zeta": [[round(float(degrees), 6), round(float(value), 6)] for degrees, value in table],
    })

    changed = []
    for path, tmp_path in written.items():
        with open(tmp_path, "r", encoding="utf-8") as f:
            new = f.read()
        old = None
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as f:
                old = f.read()
        if new != old:
            changed.append(os.path.relpath(path, ROOT_DIR))
            if not check:
                os.replace(tmp_path, path)
                continue
        os.remove(tmp_path)

    if check:
        print(f"{len(changed)} resources out of date: {changed}" if changed else "Test resources are up to date.")
        sys.exit(1 if changed else 0)

    print(f"\nDONE: {len(changed)} test resources rebuilt. Be sure to re-run the tests before committing any changes.")


if __name__ == "__main__":
    build_test_resources(sys.argv)
