__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Any, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from buildmonitor.constants import Constants
from buildmonitor.exception import BuildMonitorIOError, BuildMonitorToolpathError
from buildmonitor.geomcore import Aabb

logger = logging.getLogger(__name__)

#: Tolerance, in mm, within which consecutive segments count as connected.
CONNECTIVITY_TOLERANCE = 1e-6
#: Tolerance, in s, on the ``pose_at`` time range.
TIME_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class ToolpathSegment:
    """
    A straight deposition move. Its attributes describe the motion arriving at ``end``.
    """

    #: The start waypoint, mm in the work-object frame.
    start: np.ndarray
    #: The end waypoint, mm in the work-object frame.
    end: np.ndarray
    #: One of ``infill``, ``edge``, ``skip`` or ``overhang``.
    seg_type: str
    #: Traverse speed in mm/s.
    speed: float
    #: Spray angle from the surface normal in degrees.
    tilt: float
    #: The layer the move belongs to.
    layer_index: int
    #: Stationary time at ``end``, in s.
    dwell: float = 0.0
    #: The 1-based line of the toolpath file the segment came from, ``0`` if generated.
    line_number: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "start", np.array(self.start, dtype=float).reshape(3))
        object.__setattr__(self, "end", np.array(self.end, dtype=float).reshape(3))
        if self.seg_type not in Constants.SEG_TYPES:
            raise BuildMonitorToolpathError(f"Unknown seg_type \"{self.seg_type}\".", self.line_number)
        if not self.speed > 0:
            raise BuildMonitorToolpathError(f"Speed must be positive, got {self.speed}.", self.line_number)
        if not 0 <= self.tilt < 90:
            raise BuildMonitorToolpathError(f"Tilt must be in [0, 90), got {self.tilt}.", self.line_number)
        if self.layer_index < 0:
            raise BuildMonitorToolpathError(f"Layer must be non-negative, got {self.layer_index}.",
                                            self.line_number)
        if self.dwell < 0:
            raise BuildMonitorToolpathError(f"Dwell must not be negative, got {self.dwell}.", self.line_number)

    def __repr__(self) -> str:
        return f"<ToolpathSegment: {self.seg_type} layer {self.layer_index}, {self.length:.3f} mm>"

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))

    @property
    def move_duration(self) -> float:
        return self.length / self.speed

    @property
    def duration(self) -> float:
        return self.move_duration + self.dwell


@dataclass(frozen=True, eq=False)
class Toolpath:
    """
    An ordered, immutable list of :class:`ToolpathSegment`'s. ``breaks`` holds the indices of segments that start
    after an intentional discontinuity, so they need not connect to their predecessor.
    """

    segments: Tuple[ToolpathSegment, ...] = ()
    breaks: frozenset = frozenset()
    #: Cumulative start time of each segment, in s.
    start_times: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "breaks", frozenset(self.breaks))

        for i in range(1, len(self.segments)):
            if i in self.breaks:
                continue
            gap = float(np.linalg.norm(self.segments[i].start - self.segments[i - 1].end))
            if gap > CONNECTIVITY_TOLERANCE:
                raise BuildMonitorToolpathError(f"Segment {i} does not start where segment {i - 1} ends "
                                                f"(gap {gap:.6g} mm).", self.segments[i].line_number)

        durations = np.array([s.duration for s in self.segments], dtype=float)
        start_times = np.concatenate([[0.0], np.cumsum(durations)[:-1]]) if len(durations) else np.zeros(0)
        object.__setattr__(self, "start_times", start_times)

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self) -> Iterator[ToolpathSegment]:
        return iter(self.segments)

    def __repr__(self) -> str:
        return f"<Toolpath: {len(self.segments)} segments, {self.duration:.3f} s>"

    @property
    def duration(self) -> float:
        return float(math.fsum(s.duration for s in self.segments))

    @property
    def layer_indices(self) -> List[int]:
        return sorted({s.layer_index for s in self.segments})

    @property
    def max_speed(self) -> float:
        return max((s.speed for s in self.segments), default=0.0)

    def layer_end_time(self,
                       layer_index: int) -> float:
        """
        The toolpath time at which the last segment of ``layer_index`` (or any earlier layer) finishes.
        """
        end = None
        for segment, start in zip(self.segments, self.start_times):
            if segment.layer_index <= layer_index:
                end = start + segment.duration
        if end is None:
            raise BuildMonitorToolpathError(f"Layer {layer_index} is not in the toolpath.")
        return float(end)


def parse_toolpath(path: str) -> Toolpath:
    """
    Parse a toolpath CSV file with header ``layer,seg_type,x_mm,y_mm,z_mm,speed_mm_s,tilt_deg``. Each row is a
    waypoint, and the segment ending at a row takes that row's ``layer``, ``seg_type``, ``speed_mm_s`` and
    ``tilt_deg``. The first row, and the first row after a blank line, only positions the tool.

    :param path: The CSV file.
    :return: The validated toolpath.
    """
    if not os.path.exists(path):
        raise BuildMonitorIOError(f"Toolpath file not found: {path}")

    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            rows = list(csv.reader(f))
    except (OSError, UnicodeDecodeError, csv.Error) as e:
        raise BuildMonitorIOError(f"Could not read toolpath file {path}: {e}") from e

    if not rows or tuple(c.strip() for c in rows[0]) != Constants.TOOLPATH_HEADER:
        raise BuildMonitorToolpathError(f"Header must be \"{','.join(Constants.TOOLPATH_HEADER)}\".", 1)

    segments: List[ToolpathSegment] = []
    breaks = set()
    previous: Optional[np.ndarray] = None
    for line_number, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            if previous is not None:
                breaks.add(len(segments))
            previous = None
            continue

        layer, seg_type, position, speed, tilt = _parse_row(row, line_number)
        if previous is not None:
            segments.append(ToolpathSegment(previous, position, seg_type, speed, tilt, layer,
                                            line_number=line_number))
        previous = position

    logger.debug(f"Parsed {len(segments)} segments from {path}")

    return Toolpath(tuple(segments), frozenset(b for b in breaks if 0 < b < len(segments)))


def _parse_row(row: Sequence[str],
               line_number: int) -> Tuple[int, str, np.ndarray, float, float]:
    if len(row) != len(Constants.TOOLPATH_HEADER):
        raise BuildMonitorToolpathError(f"Expected {len(Constants.TOOLPATH_HEADER)} fields, got {len(row)}.",
                                        line_number)

    seg_type = row[1].strip()
    if seg_type not in Constants.SEG_TYPES:
        raise BuildMonitorToolpathError(f"Unknown seg_type \"{seg_type}\".", line_number)

    try:
        layer = int(row[0])
        x, y, z, speed, tilt = (float(v) for v in row[2:])
    except ValueError as e:
        raise BuildMonitorToolpathError(f"Malformed number: {e}.", line_number)

    if not all(math.isfinite(v) for v in (x, y, z, speed, tilt)):
        raise BuildMonitorToolpathError("Values must be finite.", line_number)
    if layer < 0:
        raise BuildMonitorToolpathError(f"Layer must be non-negative, got {layer}.", line_number)
    if speed <= 0:
        raise BuildMonitorToolpathError(f"Speed must be positive, got {speed}.", line_number)
    if not 0 <= tilt < 90:
        raise BuildMonitorToolpathError(f"Tilt must be in [0, 90), got {tilt}.", line_number)

    return layer, seg_type, np.array([x, y, z]), speed, tilt


def write_toolpath(path: str,
                   toolpath: Toolpath) -> str:
    """
    Write ``toolpath`` in the CSV format read by :func:`parse_toolpath`.

    :param path: The file to write.
    :param toolpath: The toolpath.
    :return: The path written.
    """
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(Constants.TOOLPATH_HEADER)
            for i, segment in enumerate(toolpath.segments):
                if i == 0 or i in toolpath.breaks:
                    if i > 0:
                        writer.writerow([])
                    writer.writerow(_format_row(segment.layer_index, "skip", segment.start, segment.speed, 0.0))
                writer.writerow(_format_row(segment.layer_index, segment.seg_type, segment.end, segment.speed,
                                            segment.tilt))
    except OSError as e:
        raise BuildMonitorIOError(f"Could not write toolpath file {path}: {e}") from e

    return path


def _format_row(layer: int,
                seg_type: str,
                position: np.ndarray,
                speed: float,
                tilt: float) -> List[str]:
    return [str(layer), seg_type] + [f"{v:.6f}" for v in position] + [f"{speed:g}", f"{tilt:g}"]


def layer_starts(z_values: Sequence[float],
                 layer_thickness: float) -> List[int]:
    """
    Find the indices in a sequence of tool heights at which a new layer begins: every rise of more than half a layer
    thickness above the height the current layer settled at. Smaller fluctuations stay within the layer. A layer
    opened partway up a gradual climb settles at the top of that climb, so the climb opens one layer however many
    samples it spans.

    :param z_values: Tool heights, in order.
    :param layer_thickness: The nominal layer thickness, in mm.
    :return: Start indices, always beginning with ``0`` for a non-empty sequence.
    """
    z = np.asarray(z_values, dtype=float)
    if len(z) == 0:
        return []

    starts = [0]
    base = z[0]
    climbing = False
    threshold = layer_thickness / 2.0
    for i in range(1, len(z)):
        climbing = climbing and z[i] > z[i - 1]
        if climbing:
            base = z[i]
        elif z[i] - base > threshold:
            starts.append(i)
            base = z[i]
            climbing = True
        elif z[i] < base - threshold:
            # A large downward move re-bases the layer without opening a new one
            base = z[i]

    return starts


def segment_layers(toolpath: Toolpath,
                   layer_thickness: float = 0.8) -> List[Tuple[int, float]]:
    """
    Split a toolpath in to layers from its tool heights alone.

    :param toolpath: The toolpath.
    :param layer_thickness: The nominal layer thickness, in mm.
    :return: ``(layer_index, z_nominal)`` per layer, where ``z_nominal`` is the length-weighted modal segment height.
    """
    if not toolpath.segments:
        raise BuildMonitorToolpathError("Cannot segment an empty toolpath in to layers.")

    z_end = [s.end[2] for s in toolpath.segments]
    starts = layer_starts(z_end, layer_thickness) + [len(z_end)]

    layers = []
    for index, (first, last) in enumerate(zip(starts[:-1], starts[1:])):
        weights: dict = {}
        for segment in toolpath.segments[first:last]:
            key = round(float(segment.end[2]), 3)
            weights[key] = weights.get(key, 0.0) + max(segment.length, 1e-9)
        z_nominal = max(sorted(weights), key=lambda k: weights[k])
        layers.append((index, z_nominal))

    return layers


def pose_at(toolpath: Toolpath,
            t: float) -> Tuple[np.ndarray, float, str]:
    """
    Evaluate the executed toolpath at time ``t``.

    :param toolpath: The toolpath.
    :param t: Time since the start of the toolpath, in s.
    :return: The nozzle position (linearly interpolated), the tilt and the ``seg_type`` of the active segment.
    """
    total = toolpath.duration
    if not toolpath.segments or t < -TIME_TOLERANCE or t > total + TIME_TOLERANCE:
        raise BuildMonitorToolpathError(f"Time {t} s is outside the toolpath duration [0, {total}] s.")

    end_times = toolpath.start_times + np.array([s.duration for s in toolpath.segments])
    index = min(int(np.searchsorted(end_times, t, side="left")), len(toolpath.segments) - 1)
    segment = toolpath.segments[index]

    local = max(t - toolpath.start_times[index], 0.0)
    move = segment.move_duration
    fraction = 1.0 if move <= 0 else min(local / move, 1.0)

    return segment.start + fraction * (segment.end - segment.start), segment.tilt, segment.seg_type


def positions_at(toolpath: Toolpath,
                 times: Any) -> np.ndarray:
    """
    Vectorized nozzle positions at many times, clipped to the toolpath duration.
    """
    times = np.clip(np.asarray(times, dtype=float), 0.0, toolpath.duration)
    durations = np.array([s.duration for s in toolpath.segments])
    moves = np.array([s.move_duration for s in toolpath.segments])
    starts = np.array([s.start for s in toolpath.segments])
    ends = np.array([s.end for s in toolpath.segments])

    index = np.minimum(np.searchsorted(toolpath.start_times + durations, times, side="left"),
                       len(toolpath.segments) - 1)
    local = np.maximum(times - toolpath.start_times[index], 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        fraction = np.where(moves[index] > 0, np.minimum(local / moves[index], 1.0), 1.0)

    return starts[index] + fraction[:, None] * (ends[index] - starts[index])


@dataclass(frozen=True, eq=False)
class DepositionSchedule:
    """
    Midpoint-rule quadrature steps over a toolpath. Step ``i`` covers ``[t_end[i] - dt[i], t_end[i]]`` and deposits
    as if the nozzle sat at ``positions[i]`` (the step midpoint) for ``dt[i]``.
    """

    t_mid: np.ndarray
    dt: np.ndarray
    positions: np.ndarray
    tilts: np.ndarray
    layers: np.ndarray

    def __len__(self) -> int:
        return len(self.dt)

    def __getitem__(self,
                    index: slice) -> "DepositionSchedule":
        return DepositionSchedule(self.t_mid[index], self.dt[index], self.positions[index], self.tilts[index],
                                  self.layers[index])

    @property
    def t_end(self) -> np.ndarray:
        return self.t_mid + self.dt / 2.0

    def upto(self,
             t: float) -> "DepositionSchedule":
        """
        The steps that complete by time ``t``.
        """
        keep = self.t_end <= t + TIME_TOLERANCE
        return DepositionSchedule(self.t_mid[keep], self.dt[keep], self.positions[keep], self.tilts[keep],
                                  self.layers[keep])


def deposition_schedule(toolpath: Toolpath,
                        dt_max: float) -> DepositionSchedule:
    """
    Build the midpoint-rule steps for integrating the plume along ``toolpath``. Each segment is split in to equal
    steps no longer than ``dt_max``; dwell time at a segment end is stepped at the end point.

    :param toolpath: The toolpath.
    :param dt_max: The longest allowed step, in s.
    :return: The schedule.
    """
    if not dt_max > 0:
        raise BuildMonitorToolpathError(f"Quadrature step must be positive, got {dt_max}.")

    t_mid, dt, positions, tilts, layers = [], [], [], [], []
    for segment, t0 in zip(toolpath.segments, toolpath.start_times):
        move = segment.move_duration
        if move > 0:
            n = max(1, int(math.ceil(move / dt_max - 1e-9)))
            fractions = (np.arange(n) + 0.5) / n
            t_mid.append(t0 + fractions * move)
            dt.append(np.full(n, move / n))
            positions.append(segment.start + fractions[:, None] * (segment.end - segment.start))
            tilts.append(np.full(n, segment.tilt))
            layers.append(np.full(n, segment.layer_index))
        if segment.dwell > 0:
            n = max(1, int(math.ceil(segment.dwell / dt_max - 1e-9)))
            fractions = (np.arange(n) + 0.5) / n
            t_mid.append(t0 + move + fractions * segment.dwell)
            dt.append(np.full(n, segment.dwell / n))
            positions.append(np.repeat(segment.end[None, :], n, axis=0))
            tilts.append(np.full(n, segment.tilt))
            layers.append(np.full(n, segment.layer_index))

    if not dt:
        return DepositionSchedule(np.zeros(0), np.zeros(0), np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=int))

    return DepositionSchedule(np.concatenate(t_mid), np.concatenate(dt), np.concatenate(positions),
                              np.concatenate(tilts), np.concatenate(layers).astype(int))


def with_vertex_dwell(toolpath: Toolpath,
                      dwell_s: float,
                      turn_deg: float = Constants.DWELL_TURN_DEG) -> Toolpath:
    """
    Return a copy of ``toolpath`` that pauses for ``dwell_s`` at every segment end where the path turns by more than
    ``turn_deg``, approximating the slow-down at raster turnarounds.
    """
    if dwell_s <= 0:
        return toolpath

    segments = list(toolpath.segments)
    cos_limit = math.cos(math.radians(turn_deg))
    for i in range(len(segments) - 1):
        if i + 1 in toolpath.breaks:
            continue
        a = segments[i].end - segments[i].start
        b = segments[i + 1].end - segments[i + 1].start
        norm = np.linalg.norm(a) * np.linalg.norm(b)
        if norm > 0 and float(np.dot(a, b)) / norm < cos_limit:
            segments[i] = replace(segments[i], dwell=dwell_s)

    return Toolpath(tuple(segments), toolpath.breaks)


def substrate_bounds(toolpath: Toolpath,
                     margin: float) -> Aabb:
    """
    The substrate plate: the XY extent of the toolpath grown by ``margin`` on every side, at z = 0.
    """
    if not toolpath.segments:
        raise BuildMonitorToolpathError("Cannot bound an empty toolpath.")

    points = np.array([p for s in toolpath.segments for p in (s.start, s.end)])
    lo = points.min(axis=0) - margin
    hi = points.max(axis=0) + margin

    return Aabb((lo[0], lo[1], 0.0), (hi[0], hi[1], 0.0))


class _PathBuilder:
    def __init__(self) -> None:
        self.segments: List[ToolpathSegment] = []
        self.position: Optional[np.ndarray] = None

    def move_to(self, point: Sequence[float]) -> None:
        self.position = np.asarray(point, dtype=float)

    def line_to(self,
                point: Sequence[float],
                seg_type: str,
                speed: float,
                tilt: float,
                layer: int) -> None:
        target = np.asarray(point, dtype=float)
        if self.position is None:
            self.position = target
            return
        if np.linalg.norm(target - self.position) > CONNECTIVITY_TOLERANCE:
            self.segments.append(ToolpathSegment(self.position, target, seg_type, speed, tilt, layer))
        self.position = target

    def build(self) -> Toolpath:
        return Toolpath(tuple(self.segments))


def raster_layers(size_mm: float = 20.0,
                  layers: int = 3,
                  spacing: float = 2.0,
                  thickness: float = 0.8,
                  speed: float = Constants.INFILL_SPEED_MM_S,
                  center: Tuple[float, float] = (0.0, 0.0),
                  cross_hatch: bool = False,
                  twist_deg: float = 0.0,
                  contour: bool = False,
                  edge_tilt_deg: float = Constants.EDGE_TILT_DEG,
                  edge_speed: float = Constants.EDGE_SPEED_MM_S,
                  skip_speed: float = Constants.SKIP_SPEED_MM_S) -> Toolpath:
    """
    Generate a boustrophedon raster over a square, one layer at a time.

    :param size_mm: The side length of the square.
    :param layers: The number of layers.
    :param spacing: The distance between raster lines.
    :param thickness: The height step between layers.
    :param speed: The infill speed.
    :param center: The XY center of the square.
    :param cross_hatch: Turn every other layer's raster by 90°.
    :param twist_deg: Turn each layer (raster and square) this much more than the one below it.
    :param contour: Finish each layer with a tilted ``edge`` pass around the square.
    :param edge_tilt_deg: The spray tilt of the contour pass.
    :param edge_speed: The speed of the contour pass.
    :param skip_speed: The speed of moves between the raster and the contour, and between layers.
    :return: The toolpath.
    """
    if layers < 1 or size_mm <= 0 or spacing <= 0:
        raise BuildMonitorToolpathError("Raster needs at least one layer and a positive size and spacing.")

    half = size_mm / 2.0
    n_lines = int(math.floor(size_mm / spacing + 1e-9)) + 1
    builder = _PathBuilder()

    for layer in range(layers):
        z = layer * thickness
        angle = math.radians(layer * twist_deg + (90.0 if cross_hatch and layer % 2 == 1 else 0.0))
        cos_a, sin_a = math.cos(angle), math.sin(angle)

        def to_world(u: float, v: float) -> Tuple[float, float, float]:
            return (center[0] + cos_a * u - sin_a * v, center[1] + sin_a * u + cos_a * v, z)

        for i in range(n_lines):
            v = -half + i * spacing
            u_start, u_end = (-half, half) if i % 2 == 0 else (half, -half)
            if i == 0:
                if layer == 0:
                    builder.move_to(to_world(u_start, v))
                else:
                    builder.line_to(to_world(u_start, v), "skip", skip_speed, 0.0, layer)
            else:
                builder.line_to(to_world(u_start, v), "infill", speed, 0.0, layer)
            builder.line_to(to_world(u_end, v), "infill", speed, 0.0, layer)

        if contour:
            corners = [(-half, -half), (half, -half), (half, half), (-half, half), (-half, -half)]
            builder.line_to(to_world(*corners[0]), "skip", skip_speed, 0.0, layer)
            for corner in corners[1:]:
                builder.line_to(to_world(*corner), "edge", edge_speed, edge_tilt_deg, layer)

    return builder.build()


def polygon_contour(vertices: Sequence[Tuple[float, float]],
                    layers: int = 1,
                    thickness: float = 0.8,
                    speed: float = Constants.EDGE_SPEED_MM_S,
                    tilt_deg: float = Constants.EDGE_TILT_DEG,
                    skip_speed: float = Constants.SKIP_SPEED_MM_S) -> Toolpath:
    """
    Generate closed contour passes around a polygon, one per layer.

    :param vertices: The polygon's XY vertices, in order, not repeating the first.
    :param layers: The number of layers.
    :param thickness: The height step between layers.
    :param speed: The contour speed.
    :param tilt_deg: The spray tilt of the contour.
    :param skip_speed: The speed of the move up to the next layer.
    :return: The toolpath.
    """
    if len(vertices) < 3:
        raise BuildMonitorToolpathError("A polygon contour needs at least three vertices.")

    builder = _PathBuilder()
    ring = list(vertices) + [vertices[0]]
    for layer in range(layers):
        z = layer * thickness
        if layer == 0:
            builder.move_to((ring[0][0], ring[0][1], z))
        else:
            builder.line_to((ring[0][0], ring[0][1], z), "skip", skip_speed, 0.0, layer)
        for x, y in ring[1:]:
            builder.line_to((x, y, z), "edge", speed, tilt_deg, layer)

    return builder.build()
