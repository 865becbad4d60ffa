__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

from typing import Dict, Tuple


class Constants:
    """
    A class containing useful constants. Extend and override with ``constants_class`` in the config:

    .. code-block:: python

        from buildmonitor.conf import BuildMonitorConfig

        config = BuildMonitorConfig(data={"constants_class": "my_module.MyConstants"})
    """

    ##########################################################################
    # Toolpath
    ##########################################################################

    TOOLPATH_HEADER = ("layer", "seg_type", "x_mm", "y_mm", "z_mm", "speed_mm_s", "tilt_deg")
    SEG_TYPES = ("infill", "edge", "skip", "overhang")

    INFILL_SPEED_MM_S = 30.0
    EDGE_SPEED_MM_S = 30.0
    OVERHANG_SPEED_MM_S = 12.0
    SKIP_SPEED_MM_S = 50.0
    EDGE_TILT_DEG = 35.0

    # Segment ends turning by more than this receive the configured vertex dwell
    DWELL_TURN_DEG = 30.0

    ##########################################################################
    # Profilers
    ##########################################################################

    POINTS_PER_FRAME = 640
    FOV_WIDTH_MM = 60.0
    FRAME_RATE_HZ = 10.0
    NOISE_SIGMA_MM = 0.05
    TRIGGER_CASCADE_S = 0.020
    MAX_RANGE_MM = 300.0

    ##########################################################################
    # Fusion
    ##########################################################################

    BLOCK_SIZE = 8
    GRID_MAGIC = b"BMTS"
    GRID_VERSION = 1

    ##########################################################################
    # Deviation classes
    ##########################################################################

    NORMAL = "normal"
    OVERBUILD = "overbuild"
    UNDERBUILD = "underbuild"
    LOCAL_OVER = "local_over"
    LOCAL_UNDER = "local_under"
    DEFECT_CLASSES = (OVERBUILD, UNDERBUILD, LOCAL_OVER, LOCAL_UNDER)
    CLASS_CODES: Dict[str, int] = {NORMAL: 0, OVERBUILD: 1, UNDERBUILD: 2, LOCAL_OVER: 3, LOCAL_UNDER: 4}

    # Matplotlib colormap per class, and the colormap interval each ramp spans
    CLASS_COLORMAPS: Dict[str, Tuple[str, float, float]] = {
        OVERBUILD: ("Reds", 0.45, 1.0),
        UNDERBUILD: ("Blues", 0.45, 1.0),
        LOCAL_OVER: ("PuOr", 0.35, 0.0),
        LOCAL_UNDER: ("PuOr", 0.65, 1.0),
    }
    NORMAL_RGB = (200, 200, 200)

    ##########################################################################
    # Tracking
    ##########################################################################

    AMPLIFYING = "amplifying"
    COMPENSATING = "compensating"
    STABLE = "stable"
    UNDETERMINED = "undetermined"

    ACTIVE = "active"
    CLOSED = "closed"

    TRACK_CSV_COLUMNS = ("track_id", "layer", "class", "status", "area_mm2", "height_mm", "peak_dev_mm", "trend")

    ##########################################################################
    # Output files
    ##########################################################################

    SCAN_STREAM_FILENAME = "scan-{scanner_id}.jsonl"
    POSE_STREAM_FILENAME = "poses.jsonl"
    TRUTH_MESH_FILENAME = "truth.ply"
    CALIBRATION_FILENAME = "calibration.json"
    SIMULATION_MANIFEST_FILENAME = "simulation.json"
    RUN_MANIFEST_FILENAME = "manifest.json"
    TRACKS_CSV_FILENAME = "tracks.csv"
    FUSED_MESH_FILENAME = "fused-{layer:03d}.ply"
    REFERENCE_MESH_FILENAME = "reference-{layer:03d}.ply"
    REFERENCE_GRID_FILENAME = "reference-{layer:03d}.tsdf"
    DEVIATION_MESH_FILENAME = "deviation-{layer:03d}.ply"
    DEVIATION_CLASS_MESH_FILENAME = "deviation-{layer:03d}-{defect_class}.ply"
    LAYER_REPORT_FILENAME = "report-{layer:03d}.json"
    GRID_FILENAME = "fused-{layer:03d}.tsdf"
    REFERENCE_SUMMARY_FILENAME = "reference-{layer:03d}.json"
    COMPARE_MESH_FILENAME = "compare.ply"
    COMPARE_SUMMARY_FILENAME = "compare.json"
