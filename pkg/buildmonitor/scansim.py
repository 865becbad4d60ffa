__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import contextlib
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from buildmonitor import util
from buildmonitor.constants import Constants
from buildmonitor.deposition import (DepositionModel, HeightField, PlantedDefect, deposit_schedule,
                                     deposit_step, defects_from_config, quadrature_step)
from buildmonitor.entity.frame import ProfileFrame
from buildmonitor.entity.pose import PoseSample
from buildmonitor.exception import BuildMonitorConfigError
from buildmonitor.geomcore import RigidTransform, calibration_to_dict, compose
from buildmonitor.meshing import heightfield_mesh, write_ply
from buildmonitor.streams import dump_record, write_jsonl
from buildmonitor.toolpath import Toolpath, deposition_schedule, positions_at, substrate_bounds

__all__ = ["HeightField", "DepositionModel", "deposit_step", "VirtualProfiler", "NozzleOccluder",
           "SimulationSettings", "SimulationResult", "scan_frame", "frame_times", "run_simulation"]

logger = logging.getLogger(__name__)

# Bisection steps after the march brackets a hit; 40 halvings of a half-cell bracket is far below a µm
_BISECTIONS = 40


@dataclass(frozen=True, eq=False)
class VirtualProfiler:
    """
    A simulated laser-line profiler. ``mount`` places the profiler frame {L} in the tool frame {B}: the laser
    plane is ``y_l = 0``, samples spread along ``x_l`` and depth is measured along ``+z_l``.
    """

    id: int
    mount: RigidTransform
    points_per_frame: int = Constants.POINTS_PER_FRAME
    fov_width: float = Constants.FOV_WIDTH_MM
    frame_rate: float = Constants.FRAME_RATE_HZ
    noise_sigma: float = Constants.NOISE_SIGMA_MM
    max_range: float = Constants.MAX_RANGE_MM

    def __post_init__(self) -> None:
        if self.points_per_frame < 2:
            raise BuildMonitorConfigError(f"Profiler {self.id} needs at least 2 points per frame.")
        if not self.frame_rate > 0 or not self.fov_width > 0:
            raise BuildMonitorConfigError(f"Profiler {self.id} needs a positive frame rate and field of view.")
        if self.noise_sigma < 0:
            raise BuildMonitorConfigError(f"Profiler {self.id} noise must not be negative.")

    def __repr__(self) -> str:
        return f"<VirtualProfiler: {self.id}, {self.points_per_frame} points at {self.frame_rate} Hz>"

    @classmethod
    def from_config(cls,
                    block: Dict[str, Any]) -> "VirtualProfiler":
        """
        Build a profiler from a ``profilers`` config block. The profiler sits ``radius_mm`` from the nozzle axis at
        ``azimuth_deg``, ``height_mm`` above the nozzle tip, looking down, with its laser line tangent to the mount
        circle; ``tilt_deg`` pitches the view toward the nozzle.
        """
        try:
            azimuth = math.radians(float(block.get("azimuth_deg", 0.0)))
            radius = float(block.get("radius_mm", 8.0))
            height = float(block.get("height_mm", 50.0))
            tilt = math.radians(float(block.get("tilt_deg", 0.0)))
            x_axis = np.array([-math.sin(azimuth), math.cos(azimuth), 0.0])
            # y_l points away from the nozzle axis, z_l down; tilting about x_l swings the view inward
            y_axis = np.array([math.cos(azimuth), math.sin(azimuth), 0.0])
            z_axis = np.array([0.0, 0.0, -1.0])
            y_tilted = math.cos(tilt) * y_axis + math.sin(tilt) * z_axis
            z_tilted = -math.sin(tilt) * y_axis + math.cos(tilt) * z_axis
            rotation = np.column_stack([x_axis, y_tilted, z_tilted])
            translation = np.array([radius * math.cos(azimuth), radius * math.sin(azimuth), height])

            return cls(id=int(block["id"]),
                       mount=RigidTransform(rotation, translation),
                       points_per_frame=int(block.get("points_per_frame", Constants.POINTS_PER_FRAME)),
                       fov_width=float(block.get("fov_width_mm", Constants.FOV_WIDTH_MM)),
                       frame_rate=float(block.get("frame_rate_hz", Constants.FRAME_RATE_HZ)),
                       noise_sigma=float(block.get("noise_sigma_mm", Constants.NOISE_SIGMA_MM)))
        except (KeyError, TypeError, ValueError) as e:
            raise BuildMonitorConfigError(f"Profiler block is malformed: {e}")

    @property
    def lateral(self) -> np.ndarray:
        """
        The ``x_l`` position of every sample, evenly spread across the field of view.
        """
        return np.linspace(-self.fov_width / 2.0, self.fov_width / 2.0, self.points_per_frame)


@dataclass(frozen=True)
class NozzleOccluder:
    """
    The nozzle body: a vertical cylinder of ``radius`` rising ``length`` from the nozzle tip.
    """

    radius: float = 3.3
    length: float = 268.0

    @classmethod
    def from_config(cls,
                    block: Optional[Dict[str, Any]]) -> Optional["NozzleOccluder"]:
        if not block or not block.get("enabled", True):
            return None
        return cls(float(block.get("radius_mm", 3.3)), float(block.get("length_mm", 268.0)))

    def blocks(self,
               tip: np.ndarray,
               origins: np.ndarray,
               directions: np.ndarray,
               reach: np.ndarray) -> np.ndarray:
        """
        Which rays ``origins + s·directions``, ``0 ≤ s ≤ reach``, pass through the cylinder.
        """
        offset = origins[:, :2] - tip[:2]
        u = directions[:, :2]
        a = np.einsum("ij,ij->i", u, u)
        b = 2.0 * np.einsum("ij,ij->i", offset, u)
        c = np.einsum("ij,ij->i", offset, offset) - self.radius ** 2

        s_in = np.zeros(len(origins))
        s_out = reach.copy()
        vertical = a < 1e-12
        inside_column = vertical & (c < 0)

        slanted = ~vertical
        disc = b * b - 4.0 * a * c
        hits_circle = slanted & (disc >= 0)
        root = np.sqrt(np.where(hits_circle, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            s_in = np.where(hits_circle, np.maximum((-b - root) / (2.0 * a), 0.0), s_in)
            s_out = np.where(hits_circle, np.minimum((-b + root) / (2.0 * a), reach), s_out)

        candidate = inside_column | (hits_circle & (s_in <= s_out))
        z_a = origins[:, 2] + s_in * directions[:, 2]
        z_b = origins[:, 2] + s_out * directions[:, 2]
        z_low = np.minimum(z_a, z_b)
        z_high = np.maximum(z_a, z_b)

        return candidate & (z_high >= tip[2]) & (z_low <= tip[2] + self.length)


def _cast_rays(h: HeightField,
               origins: np.ndarray,
               directions: np.ndarray,
               max_range: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Distance along each ray to the first crossing of the height field surface, and whether it hit at all. Rays that
    leave the plate before they reach the surface miss.
    """
    n = len(origins)
    depth = np.full(n, np.nan)
    hit = np.zeros(n, dtype=bool)

    down = directions[:, 2] < -1e-9
    if not np.any(down) or not len(origins):
        return depth, hit

    z_top = float(h.heights.max()) + 1e-6
    z_bottom = float(h.heights.min()) - 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        s_first = np.where(down, np.maximum((origins[:, 2] - z_top) / -directions[:, 2], 0.0), np.nan)
        s_last = np.where(down, np.minimum((origins[:, 2] - z_bottom) / -directions[:, 2], max_range), np.nan)

    step = h.cell / 2.0
    span = np.nan_to_num(s_last - s_first, nan=0.0)
    count = int(math.ceil(float(np.max(span)) / step)) + 2
    s = s_first[:, None] + np.arange(count)[None, :] * step
    s = np.minimum(s, s_last[:, None])

    def height_gap(distance: np.ndarray) -> np.ndarray:
        points = origins[:, None, :] + distance[..., None] * directions[:, None, :] if distance.ndim == 2 \
            else origins + distance[:, None] * directions
        return points[..., 2] - h.height_at(points[..., 0], points[..., 1])

    gap = height_gap(s)
    below = (gap <= 0) & down[:, None]
    off_plate = np.isnan(gap)
    first_below = np.where(below.any(axis=1), np.argmax(below, axis=1), count)
    first_off = np.where(off_plate.any(axis=1), np.argmax(off_plate, axis=1), count)
    hit = down & (first_below < count) & (first_below < first_off)
    if not np.any(hit):
        return depth, hit

    rows = np.nonzero(hit)[0]
    upper = s[rows, first_below[rows]]
    lower = np.where(first_below[rows] > 0, s[rows, np.maximum(first_below[rows] - 1, 0)], upper)
    sub_origins, sub_directions = origins[rows], directions[rows]
    for _ in range(_BISECTIONS):
        middle = (lower + upper) / 2.0
        points = sub_origins + middle[:, None] * sub_directions
        below_mid = points[:, 2] - h.height_at(points[:, 0], points[:, 1]) <= 0
        upper = np.where(below_mid, middle, upper)
        lower = np.where(below_mid, lower, middle)
    depth[rows] = upper

    return depth, hit


def scan_frame(h: HeightField,
               p: VirtualProfiler,
               pose_ob: RigidTransform,
               t: float,
               rng: Optional[np.random.Generator] = None,
               occluder: Optional[NozzleOccluder] = None) -> ProfileFrame:
    """
    Capture one profile of the height field. Each sample's ray starts on the laser line at ``x_l`` and runs along
    ``+z_l``; the sample is the surface hit in {L} plus Gaussian depth noise.

    :param h: The surface.
    :param p: The profiler.
    :param pose_ob: The tool frame {B} in the work-object frame {O} at ``t``.
    :param t: The trigger time, in s.
    :param rng: The noise source; ``None`` gives a noiseless frame.
    :param occluder: The nozzle body, if it can block rays.
    :return: The frame. Samples that miss the plate or are blocked are invalid.
    """
    pose_ol = compose(pose_ob, p.mount)
    lateral = p.lateral
    local = np.column_stack([lateral, np.zeros(len(lateral)), np.zeros(len(lateral))])
    origins = pose_ol.apply(local)
    directions = np.repeat(pose_ol.rotation[:, 2][None, :], len(lateral), axis=0)

    depth, valid = _cast_rays(h, origins, directions, p.max_range)
    if occluder is not None:
        valid &= ~occluder.blocks(pose_ob.translation, origins, directions, np.nan_to_num(depth, nan=0.0))

    if rng is not None and p.noise_sigma > 0:
        # Drawn for every sample so the noise sequence does not depend on which samples hit
        depth = depth + rng.normal(0.0, p.noise_sigma, len(lateral))

    points = np.column_stack([lateral, np.where(valid, depth, 0.0)])
    return ProfileFrame.build(int(round(t * 1e6)), p.id, points, valid)


def frame_times(duration: float,
                frame_rate: float,
                trigger_offset: float = 0.0) -> np.ndarray:
    """
    Trigger times for a profiler: one every ``1 / frame_rate`` from 0 while the trigger stays inside the run, each
    delayed by the profiler's place in the trigger cascade.
    """
    count = int(math.ceil(duration * frame_rate - 1e-9)) if duration > 0 else 0
    return np.arange(count) / frame_rate + trigger_offset


@dataclass(frozen=True)
class SimulationSettings:
    """
    Everything about a simulated run beyond the toolpath, the plume and the profilers.
    """

    cell: float = 0.5
    margin: float = 20.0
    standoff: float = 30.0
    pose_rate: float = 100.0
    dt_max: float = 0.01
    seed: int = 0
    defects: Tuple[PlantedDefect, ...] = ()
    occluder: Optional[NozzleOccluder] = None

    @classmethod
    def from_config(cls,
                    config: Any,
                    seed: Optional[int] = None) -> "SimulationSettings":
        return cls(cell=float(config.heightfield_cell_mm),
                   margin=float(config.substrate_margin_mm),
                   standoff=float(config.standoff_mm),
                   pose_rate=float(config.pose_rate_hz),
                   dt_max=float(config.quadrature_dt_s),
                   seed=int(config.seed if seed is None else seed),
                   defects=tuple(defects_from_config(config.defects)),
                   occluder=NozzleOccluder.from_config(config.occluder))


@dataclass
class SimulationResult:
    scan_paths: Dict[int, str] = field(default_factory=dict)
    pose_path: str = ""
    truth_path: str = ""
    calibration_path: str = ""
    manifest_path: str = ""
    frames: Dict[int, int] = field(default_factory=dict)
    truth: Optional[HeightField] = None

    @property
    def paths(self) -> List[str]:
        return [*(self.scan_paths[k] for k in sorted(self.scan_paths)), self.pose_path, self.truth_path,
                self.calibration_path, self.manifest_path]


def tool_pose(toolpath: Toolpath,
              times: Any,
              standoff: float) -> List[RigidTransform]:
    """
    The nozzle-tip frame {B} at the given times: no rotation, standing ``standoff`` above the toolpath.
    """
    positions = positions_at(toolpath, times) + np.array([0.0, 0.0, standoff])
    return [RigidTransform(np.eye(3), position) for position in positions]


def run_simulation(toolpath: Toolpath,
                   model: DepositionModel,
                   profilers: Sequence[VirtualProfiler],
                   out_dir: str,
                   settings: Optional[SimulationSettings] = None) -> SimulationResult:
    """
    Grow the part along ``toolpath`` and record it: per-profiler scan streams, the pose stream, the profiler
    calibrations, the final surface as a ground-truth mesh and a manifest of the run.

    Before each trigger the surface is grown by every quadrature step that completes by the trigger time. Profiler
    ``k`` (by position in ``profilers``) fires 20 ms after profiler ``k - 1`` in each trigger group.

    :param toolpath: The executed path.
    :param model: The true plume.
    :param profilers: The profilers.
    :param out_dir: The directory to write in to.
    :param settings: Plate, pose, noise and defect settings.
    :return: The written files and frame counts.
    """
    settings = settings or SimulationSettings()
    if not profilers:
        raise BuildMonitorConfigError("At least one profiler is needed to simulate a run.")
    if len({p.id for p in profilers}) != len(profilers):
        raise BuildMonitorConfigError("Profiler ids must be unique.")

    util.ensure_dir(out_dir)
    duration = toolpath.duration
    h = HeightField.from_bounds(substrate_bounds(toolpath, settings.margin), settings.cell)
    schedule = deposition_schedule(toolpath, quadrature_step(model, toolpath.max_speed, settings.dt_max))
    step_ends = schedule.t_end

    events = []
    for k, profiler in enumerate(profilers):
        for t in frame_times(duration, profiler.frame_rate, k * Constants.TRIGGER_CASCADE_S):
            events.append((float(t), profiler.id, k))
    events.sort(key=lambda event: (event[0], event[1]))
    logger.info(f"Simulating {duration:.2f} s with {len(profilers)} profilers, {len(events)} frames ...")

    result = SimulationResult()
    rngs = {p.id: np.random.default_rng([settings.seed, p.id]) for p in profilers}
    deposited = 0
    with contextlib.ExitStack() as stack:
        files = {}
        for profiler in profilers:
            path = os.path.join(out_dir, Constants.SCAN_STREAM_FILENAME.format(scanner_id=profiler.id))
            files[profiler.id] = stack.enter_context(open(path, "w", encoding="utf-8"))
            result.scan_paths[profiler.id] = path
            result.frames[profiler.id] = 0

        for t, scanner_id, k in events:
            upto = int(np.searchsorted(step_ends, t + 1e-9, side="right"))
            if upto > deposited:
                deposit_schedule(h, model, schedule[deposited:upto], settings.defects)
                deposited = upto

            pose = tool_pose(toolpath, [min(t, duration)], settings.standoff)[0]
            frame = scan_frame(h, profilers[k], pose, t, rngs[scanner_id], settings.occluder)
            files[scanner_id].write(dump_record(frame.to_dict()))
            files[scanner_id].write("\n")
            result.frames[scanner_id] += 1

    if deposited < len(schedule):
        deposit_schedule(h, model, schedule[deposited:], settings.defects)
    result.truth = h

    last_event = events[-1][0] if events else 0.0
    pose_end = max(duration, last_event)
    pose_times = np.arange(int(math.ceil(pose_end * settings.pose_rate - 1e-9)) + 1) / settings.pose_rate
    poses = tool_pose(toolpath, pose_times, settings.standoff)
    result.pose_path = write_jsonl(os.path.join(out_dir, Constants.POSE_STREAM_FILENAME),
                                   (PoseSample.build(int(round(t * 1e6)), pose).to_dict()
                                    for t, pose in zip(pose_times, poses)))

    result.truth_path = write_ply(os.path.join(out_dir, Constants.TRUTH_MESH_FILENAME),
                                  heightfield_mesh(h.heights, h.xs, h.ys))
    result.calibration_path = util.write_json(os.path.join(out_dir, Constants.CALIBRATION_FILENAME),
                                              calibration_to_dict({p.id: p.mount for p in profilers}))
    result.manifest_path = util.write_json(os.path.join(out_dir, Constants.SIMULATION_MANIFEST_FILENAME), {
        "duration_s": round(duration, 6),
        "seed": settings.seed,
        "deposition": model.to_dict(),
        "standoff_mm": settings.standoff,
        "pose_rate_hz": settings.pose_rate,
        "heightfield_cell_mm": settings.cell,
        "quadrature_dt_s": settings.dt_max,
        "defects": [{"center": list(d.center), "radius_mm": d.radius_mm, "gain": d.gain, "layers": list(d.layers)}
                    for d in settings.defects],
        "frames": {str(k): v for k, v in sorted(result.frames.items())},
        "poses": len(pose_times),
        "deposited_volume_mm3": round(h.volume(), 6),
        "files": [os.path.basename(path) for path in (*(result.scan_paths[k] for k in sorted(result.scan_paths)),
                                                      result.pose_path, result.truth_path,
                                                      result.calibration_path)],
    })

    logger.info(f"Simulation written to {out_dir}")

    return result
