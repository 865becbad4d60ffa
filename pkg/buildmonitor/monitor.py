__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import logging
import os
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Set, Tuple

import numpy as np

from buildmonitor import util
from buildmonitor.conf import BuildMonitorConfig
from buildmonitor.constants import Constants
from buildmonitor.deposition import DepositionModel
from buildmonitor.deviation import (class_meshes, classify, compute_deviation, deviation_mesh, edge_center_heights,
                                    segment, summarize)
from buildmonitor.entity.frame import ProfileFrame
from buildmonitor.exception import BuildMonitorIOError, BuildMonitorStreamError
from buildmonitor.fusion import (ActiveRegion, GridView, IntegrationResult, SparseTsdfGrid, integrate_frame,
                                 save_grid, update_active_region)
from buildmonitor.geomcore import Aabb, RigidTransform, compose, load_calibration, project_points
from buildmonitor.meshing import TriangleMesh, crop_xy, marching_cubes, read_ply, write_ply
from buildmonitor.reference import ReferenceBuilder, ReferenceModel, ReferenceSettings, reference_mesh
from buildmonitor.streams import (LayerSpan, PoseStream, StreamStats, detect_layers, find_scan_streams, merge_frames,
                                  read_frames, read_poses)
from buildmonitor.toolpath import Toolpath
from buildmonitor.tracking import DefectTracker

logger = logging.getLogger(__name__)

STAGES = ("ingest", "snapshot", "extract", "reference", "deviation", "tracking")


@dataclass
class RunResult:
    """
    What a finished run produced: its manifest, the report of every analyzed layer and the tracker holding the
    tracks.
    """

    manifest: Dict[str, Any]
    reports: Dict[int, Dict[str, Any]]
    tracker: DefectTracker
    manifest_path: str
    final_mesh: Optional[TriangleMesh] = None

    @property
    def files(self) -> List[str]:
        return list(self.manifest.get("files", []))


@dataclass
class _Counters:
    frames: int = 0
    frames_integrated: int = 0
    frames_empty: int = 0
    points: int = 0
    points_skipped: int = 0
    active_points: int = 0
    clamped: int = 0
    stage_ms: Dict[str, float] = field(default_factory=lambda: defaultdict(float))

    def add(self,
            result: IntegrationResult) -> None:
        self.frames_integrated += 1
        self.points += result.points
        self.points_skipped += result.skipped
        self.active_points += result.active_points
        self.clamped += result.clamped


class BuildMonitor:
    """
    Runs the monitoring pipeline over recorded streams: every frame is registered and fused as it arrives, and at
    each layer boundary the fused surface is extracted, compared against the reference grown to the same point of the
    toolpath, segmented and tracked. Each layer's outputs are written before the next layer is processed.

    :param config: The pipeline config.
    :param toolpath: The executed toolpath, used for the reference.
    :param out_dir: The directory to write outputs in to.
    :param layer_range: Only layers in this inclusive range are analyzed; every frame is still fused.
    """

    def __init__(self,
                 config: BuildMonitorConfig,
                 toolpath: Toolpath,
                 out_dir: str,
                 layer_range: Tuple[Optional[int], Optional[int]] = (None, None)) -> None:
        self.config: BuildMonitorConfig = config
        self.toolpath: Toolpath = toolpath
        self.out_dir: str = out_dir
        self.layer_range: Tuple[Optional[int], Optional[int]] = layer_range

        self.grid: SparseTsdfGrid = SparseTsdfGrid.from_config(config)
        self.tracker: DefectTracker = DefectTracker.from_config(config)
        # The reference never knows about planted defects
        self.reference: ReferenceBuilder = ReferenceBuilder(toolpath, DepositionModel.from_config(config.deposition),
                                                            ReferenceSettings.from_config(config))
        self.active: ActiveRegion = ActiveRegion((0.0, 0.0, 0.0), float(config.active_radius_mm))
        self.footprint: Aabb = _deposition_footprint(toolpath)

        self.files: List[str] = []
        self.reports: Dict[int, Dict[str, Any]] = {}
        self.counters: _Counters = _Counters()
        self._surface: Optional[GridView] = None
        self._last_mesh: Optional[TriangleMesh] = None

    def __repr__(self) -> str:
        return f"<BuildMonitor: {self.out_dir}>"

    def _path(self,
              template: str,
              **kwargs: Any) -> str:
        path = os.path.join(self.out_dir, template.format(**kwargs))
        self.files.append(path)
        return path

    def _timed(self,
               stage: str,
               started: float) -> float:
        now = time.perf_counter()
        self.counters.stage_ms[stage] += (now - started) * 1000.0
        return now

    def prepare_frame(self,
                      frame: ProfileFrame,
                      poses: PoseStream,
                      calibration: Dict[int, RigidTransform]) -> Optional[Tuple[np.ndarray, np.ndarray, ActiveRegion]]:
        """
        Register a frame's valid samples in the work-object frame, with a ray origin per sample on the laser line,
        and move the active region to the nozzle's position at the frame time.

        :return: ``(origins, points, active)``, or ``None`` if the frame has no valid, finite samples.
        :raises BuildMonitorStreamError: If the pose stream does not cover the frame.
        """
        if frame.scanner_id not in calibration:
            raise BuildMonitorIOError(f"No calibration for scanner {frame.scanner_id}.")
        t = frame.t_us / 1e6
        if not poses.covers(t):
            raise BuildMonitorStreamError(f"Frame from scanner {frame.scanner_id} at {t:.6f} s is outside the pose "
                                          f"stream [{poses.start:.6f}, {poses.end:.6f}] s.")

        pose = poses.at(t)
        standoff = float(self.config.standoff_mm)
        nozzle = pose.translation
        surface = self._surface.surface_height(nozzle[0], nozzle[1]) if self._surface is not None else None
        self.active = update_active_region(self.active, nozzle, surface, standoff)

        local = frame.local_points()
        finite = np.all(np.isfinite(local), axis=1)
        if not np.all(finite):
            skipped = int(np.count_nonzero(~finite))
            self.counters.points_skipped += skipped
            logger.debug(f"Skipped {skipped} non-finite samples from scanner {frame.scanner_id} at {t:.6f} s.")
            local = local[finite]
        if not len(local):
            return None

        calib = calibration[frame.scanner_id]
        points = project_points(pose, calib, local)
        on_line = np.column_stack([local[:, 0], np.zeros(len(local)), np.zeros(len(local))])
        origins = compose(pose, calib).apply(on_line)

        return origins, points, self.active

    def ingest(self,
               frames: Iterator[ProfileFrame],
               poses: PoseStream,
               calibration: Dict[int, RigidTransform],
               spans: List[LayerSpan]) -> None:
        """
        Fuse frames in time order, finishing each layer as the first frame past its end arrives.

        With more than one worker, frames integrate concurrently in batches that hold at most one frame per scanner,
        so each scanner's frames still integrate one after another in time order.
        """
        pending = list(spans)
        workers = int(self.config.ingest_workers)
        batch: List[Tuple[np.ndarray, np.ndarray, ActiveRegion]] = []
        batch_scanners: Set[int] = set()

        with ThreadPoolExecutor(max_workers=workers) if workers > 1 else _Inline() as executor:
            def flush() -> None:
                started = time.perf_counter()
                for result in executor.map(lambda item: integrate_frame(self.grid, item[0], item[1], item[2]),
                                           batch):
                    self.counters.add(result)
                batch.clear()
                batch_scanners.clear()
                self._timed("ingest", started)

            for frame in frames:
                t = frame.t_us / 1e6
                while len(pending) > 1 and t >= pending[0].t_end:
                    flush()
                    self.finish_layer(pending.pop(0))

                self.counters.frames += 1
                prepared = self.prepare_frame(frame, poses, calibration)
                if prepared is None:
                    self.counters.frames_empty += 1
                    continue
                if frame.scanner_id in batch_scanners:
                    flush()
                batch.append(prepared)
                batch_scanners.add(frame.scanner_id)
                if len(batch) >= workers:
                    flush()

            flush()

        for span in pending:
            self.finish_layer(span)

    def finish_layer(self,
                     span: LayerSpan) -> Optional[Dict[str, Any]]:
        """
        Snapshot the grid at a layer boundary and, if the layer is in range, analyze it and write its outputs.

        :return: The layer's report, or ``None`` if the layer was not analyzed.
        """
        started = time.perf_counter()
        view = self.grid.snapshot()
        self._surface = view
        started = self._timed("snapshot", started)

        layer = span.index
        if not util.in_layer_range(layer, self.layer_range):
            logger.debug(f"Layer {layer} is outside the requested range, fused only.")
            return None

        logger.info(f"Analyzing layer {layer} ({span.t_start:.2f}..{span.t_end:.2f} s) ...")

        save_grid(view, self._path(Constants.GRID_FILENAME, layer=layer))
        fused = marching_cubes(view)
        write_ply(self._path(Constants.FUSED_MESH_FILENAME, layer=layer), fused)
        self._last_mesh = fused
        started = self._timed("extract", started)

        ref = self.reference.advance_to(min(span.t_end, self.toolpath.duration), layer=layer)
        if not ref.is_empty:
            write_ply(self._path(Constants.REFERENCE_MESH_FILENAME, layer=layer), reference_mesh(ref))
            save_grid(ref.grid, self._path(Constants.REFERENCE_GRID_FILENAME, layer=layer))
        started = self._timed("reference", started)

        summary, regions = self._compare(fused, ref, layer)
        started = self._timed("deviation", started)

        self.tracker.update(regions, layer)
        report = self.tracker.report(layer, summary)
        report["regions"] = [region.to_dict() for region in regions]
        report["reference"] = ref.to_dict()
        report["span"] = span.to_dict()
        util.write_json(self._path(Constants.LAYER_REPORT_FILENAME, layer=layer), report)
        tracks_path = os.path.join(self.out_dir, Constants.TRACKS_CSV_FILENAME)
        self.tracker.write_csv(tracks_path)
        if tracks_path not in self.files:
            self.files.append(tracks_path)
        self._timed("tracking", started)

        self.reports[layer] = report
        logger.info(f"Layer {layer}: {len(regions)} regions, {len(report['tracks'])} active tracks.")

        return report

    def _compare(self,
                 fused: TriangleMesh,
                 ref: ReferenceModel,
                 layer: int) -> Tuple[Dict[str, Any], List[Any]]:
        if fused.is_empty or ref.is_empty:
            logger.warning(f"Layer {layer}: nothing to compare "
                           f"({'no fused surface' if fused.is_empty else 'empty reference'}).")
            return {}, []

        global_tolerance = float(self.config.global_tolerance_mm)
        local_threshold = float(self.config.local_threshold)

        # The reference only exists over the plate; one voxel in from its rim the grid is fully observed
        margin = self.grid.voxel_size
        compared = crop_xy(fused, ref.heights.origin + margin, ref.heights.upper - margin)
        if compared.is_empty:
            logger.warning(f"Layer {layer}: the fused surface does not overlap the reference.")
            return {}, []

        deviation_map = classify(compute_deviation(compared, ref), global_tolerance, local_threshold)
        regions = segment(deviation_map, float(self.config.min_region_area_mm2), layer)

        write_ply(self._path(Constants.DEVIATION_MESH_FILENAME, layer=layer),
                  deviation_mesh(deviation_map, global_tolerance, local_threshold))
        for defect_class, mesh in class_meshes(deviation_map, global_tolerance, local_threshold).items():
            write_ply(self._path(Constants.DEVIATION_CLASS_MESH_FILENAME, layer=layer, defect_class=defect_class),
                      mesh)

        summary = summarize(deviation_map)
        summary.update(edge_center_heights(fused, self.footprint))

        return summary, regions

    def run(self,
            stream_dir: str) -> RunResult:
        """
        Process every stream in ``stream_dir``: ``scan-<id>.jsonl`` per profiler, ``poses.jsonl``, and the profiler
        calibration (``calibration_path`` in the config, else ``calibration.json`` beside the streams). If the
        directory holds a ground-truth ``truth.ply``, the final fused surface is validated against it.

        :param stream_dir: The recorded run.
        :return: The manifest, reports and tracks.
        """
        util.ensure_dir(self.out_dir)
        gap = float(self.config.stream_gap_warning_s)

        scan_paths = find_scan_streams(stream_dir)
        poses = read_poses(os.path.join(stream_dir, Constants.POSE_STREAM_FILENAME), gap)
        calibration_path = self.config.calibration_path or os.path.join(stream_dir, Constants.CALIBRATION_FILENAME)
        calibration = load_calibration(calibration_path)
        missing = sorted(set(scan_paths) - set(calibration))
        if missing:
            raise BuildMonitorIOError(f"{calibration_path} has no calibration for scanners {missing}.")

        spans = detect_layers(poses, float(self.config.layer_thickness_mm))
        logger.info(f"Found {len(scan_paths)} scan streams and {len(spans)} layers in {stream_dir}")

        stats = {scanner_id: StreamStats(path) for scanner_id, path in scan_paths.items()}
        frames = merge_frames(read_frames(path, gap, stats[scanner_id]) for scanner_id, path in scan_paths.items())

        started = time.perf_counter()
        self.ingest(frames, poses, calibration, spans)
        elapsed = time.perf_counter() - started

        if spans and spans[-1].index not in self.reports and self._surface is not None:
            self._last_mesh = marching_cubes(self._surface)

        manifest = self._manifest(stream_dir, spans, stats, poses, elapsed)
        manifest_path = os.path.join(self.out_dir, Constants.RUN_MANIFEST_FILENAME)
        util.write_json(manifest_path, manifest)

        logger.info(f"Run written to {self.out_dir}")

        return RunResult(manifest, self.reports, self.tracker, manifest_path, self._last_mesh)

    def _manifest(self,
                  stream_dir: str,
                  spans: List[LayerSpan],
                  stats: Dict[int, StreamStats],
                  poses: PoseStream,
                  elapsed: float) -> Dict[str, Any]:
        counters = self.counters
        ingest_s = counters.stage_ms["ingest"] / 1000.0
        manifest: Dict[str, Any] = {
            "streams": os.path.abspath(stream_dir),
            "layers": [span.to_dict() for span in spans],
            "analyzed_layers": sorted(self.reports),
            "frames": {
                "read": counters.frames,
                "integrated": counters.frames_integrated,
                "empty": counters.frames_empty,
                "unparseable": sum(s.unparseable for s in stats.values()) +
                (poses.stats.unparseable if poses.stats else 0),
            },
            "points": {"integrated": counters.points, "skipped": counters.points_skipped,
                       "active": counters.active_points, "clamped_voxels": counters.clamped},
            "stream_stats": [stats[k].to_dict() for k in sorted(stats)] + ([poses.stats.to_dict()]
                                                                          if poses.stats else []),
            "timing": {
                "wall_s": round(elapsed, 3),
                "frames_per_s": round(counters.frames_integrated / ingest_s, 3) if ingest_s > 0 else None,
                "mean_frame_ms": round(counters.stage_ms["ingest"] / counters.frames_integrated, 3)
                if counters.frames_integrated else None,
                "stage_ms": {stage: round(counters.stage_ms[stage], 3) for stage in STAGES},
            },
            "grid": {"voxel_size_mm": self.grid.voxel_size, "truncation_mm": self.grid.truncation,
                     "blocks": self.grid.block_count},
        }

        truth_path = os.path.join(stream_dir, Constants.TRUTH_MESH_FILENAME)
        if os.path.exists(truth_path) and self._last_mesh is not None and not self._last_mesh.is_empty:
            truth = read_ply(truth_path)
            lower, upper = truth.bounds()
            validated = crop_xy(self._last_mesh, lower, upper)
            if validated.is_empty:
                logger.warning(f"The fused surface does not overlap {truth_path}, skipping validation.")
            else:
                validation = summarize(compute_deviation(validated, truth))
                validation["truth"] = os.path.abspath(truth_path)
                manifest["validation"] = validation
                logger.info(f"Validation against {truth_path}: RMS {validation['rms_dev_mm']} mm")

        manifest["files"] = sorted(os.path.basename(path) for path in self.files)

        return manifest


class _Inline:
    """
    Stands in for an executor when ingestion is single-threaded, so frames integrate strictly in order.
    """

    def __enter__(self) -> "_Inline":
        return self

    def __exit__(self, *args: Any) -> None:
        return None

    @staticmethod
    def map(fn: Any, items: List[Any]) -> Iterator[Any]:
        return map(fn, items)


def _deposition_footprint(toolpath: Toolpath) -> Aabb:
    points = [p for s in toolpath.segments if s.seg_type != "skip" for p in (s.start, s.end)]
    if not points:
        points = [p for s in toolpath.segments for p in (s.start, s.end)] or [np.zeros(3)]
    return Aabb.from_points(np.array(points))


def run_monitor(config: BuildMonitorConfig,
                toolpath: Toolpath,
                stream_dir: str,
                out_dir: str,
                layer_range: Tuple[Optional[int], Optional[int]] = (None, None)) -> RunResult:
    return BuildMonitor(config, toolpath, out_dir, layer_range).run(stream_dir)
