__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import glob
import heapq
import json
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from buildmonitor.entity.frame import ProfileFrame
from buildmonitor.entity.pose import PoseSample
from buildmonitor.exception import BuildMonitorEntityError, BuildMonitorIOError, BuildMonitorStreamError
from buildmonitor.geomcore import RigidTransform
from buildmonitor.toolpath import layer_starts

logger = logging.getLogger(__name__)

SCAN_STREAM_PATTERN = re.compile(r"^scan-(\d+)\.jsonl$")


@dataclass
class StreamStats:
    """
    Counters gathered while reading one stream.
    """

    path: str
    records: int = 0
    unparseable: int = 0
    #: ``(t_before_s, t_after_s)`` for every gap longer than the warning threshold.
    gaps: List[Tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {"path": os.path.basename(self.path),
                "records": self.records,
                "unparseable": self.unparseable,
                "gaps": [[round(a, 6), round(b, 6)] for a, b in self.gaps]}


def dump_record(record: Dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def write_jsonl(path: str,
                records: Iterable[Dict[str, Any]]) -> str:
    """
    Write one compact JSON object per line.
    """
    try:
        with open(path, "w", encoding="utf-8") as f:
            for record in records:
                f.write(dump_record(record))
                f.write("\n")
    except OSError as e:
        raise BuildMonitorIOError(f"Could not write stream {path}: {e}") from e

    return path


def _read_records(path: str,
                  record_cls: type,
                  stats: StreamStats) -> Iterator[Any]:
    if not os.path.exists(path):
        raise BuildMonitorIOError(f"Stream file not found: {path}")

    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                stats.records += 1
                try:
                    record = record_cls(json.loads(line), line_number)
                except (ValueError, BuildMonitorEntityError):
                    logger.warning(f"{os.path.basename(path)} line {line_number} is not a valid record, skipping.")
                    stats.unparseable += 1
                    continue
                if not record.usable:
                    stats.unparseable += 1
                    continue
                yield record
    except OSError as e:
        raise BuildMonitorIOError(f"Could not read stream {path}: {e}") from e


def _check_order(kind: str,
                 path: str,
                 previous_us: Optional[int],
                 current_us: int,
                 gap_warning_s: float,
                 stats: StreamStats) -> None:
    if previous_us is None:
        return
    if current_us < previous_us:
        raise BuildMonitorStreamError(f"{kind} stream {os.path.basename(path)} goes back in time: "
                                      f"{current_us} µs after {previous_us} µs.")
    if (current_us - previous_us) / 1e6 > gap_warning_s:
        logger.warning(f"{kind} stream {os.path.basename(path)} has a {(current_us - previous_us) / 1e6:.3f} s gap "
                       f"at {previous_us / 1e6:.3f} s.")
        stats.gaps.append((previous_us / 1e6, current_us / 1e6))


def read_frames(path: str,
                gap_warning_s: float = 1.0,
                stats: Optional[StreamStats] = None) -> Iterator[ProfileFrame]:
    """
    Read a scan stream lazily. Records that cannot be decoded are counted and skipped.

    :param path: The ``scan-<id>.jsonl`` file.
    :param gap_warning_s: Warn (and record the gap) when consecutive frames are further apart than this.
    :param stats: Counters to update, optional.
    :return: The frames, in file order.
    :raises BuildMonitorStreamError: If time goes backwards.
    """
    stats = stats if stats is not None else StreamStats(path)
    previous_us: Optional[int] = None
    for frame in _read_records(path, ProfileFrame, stats):
        _check_order("Scan", path, previous_us, frame.t_us, gap_warning_s, stats)
        previous_us = frame.t_us
        yield frame


def merge_frames(streams: Iterable[Iterator[ProfileFrame]]) -> Iterator[ProfileFrame]:
    """
    Interleave per-scanner frame iterators in to one time-ordered iterator (ties broken by scanner id).
    """
    return heapq.merge(*streams, key=lambda frame: (frame.t_us, frame.scanner_id))


def find_scan_streams(stream_dir: str) -> Dict[int, str]:
    """
    Find the ``scan-<id>.jsonl`` files in a directory, by scanner id.
    """
    if not os.path.isdir(stream_dir):
        raise BuildMonitorIOError(f"Stream directory not found: {stream_dir}")

    streams = {}
    for path in sorted(glob.glob(os.path.join(stream_dir, "scan-*.jsonl"))):
        match = SCAN_STREAM_PATTERN.match(os.path.basename(path))
        if match:
            streams[int(match.group(1))] = path

    if not streams:
        raise BuildMonitorIOError(f"No scan streams found in {stream_dir}")

    return streams


class PoseStream:
    """
    A time-sorted robot pose stream that can be queried at any time inside its span: translations are
    interpolated linearly and rotations spherically.
    """

    def __init__(self,
                 samples: List[PoseSample],
                 stats: Optional[StreamStats] = None) -> None:
        if not samples:
            raise BuildMonitorStreamError("Pose stream is empty.")

        #: Sample times, in s.
        self.times: np.ndarray = np.array([s.t_us for s in samples], dtype=float) / 1e6
        #: ``(N, 3)`` tool positions, in mm.
        self.translations: np.ndarray = np.array([s.transform.translation for s in samples])
        #: Counters from reading the stream, if it came from a file.
        self.stats: Optional[StreamStats] = stats

        rotations = Rotation.from_matrix(np.array([s.transform.rotation for s in samples]))
        self._rotations = rotations
        self._slerp = Slerp(self.times, rotations) if len(samples) > 1 else None

        if len(samples) > 1 and np.any(np.diff(self.times) <= 0):
            raise BuildMonitorStreamError("Pose stream times must strictly increase.")

    def __len__(self) -> int:
        return len(self.times)

    def __repr__(self) -> str:
        return f"<PoseStream: {len(self)} samples, {self.start:.3f}..{self.end:.3f} s>"

    @property
    def start(self) -> float:
        return float(self.times[0])

    @property
    def end(self) -> float:
        return float(self.times[-1])

    def covers(self,
               t: float) -> bool:
        return self.start - 1e-9 <= t <= self.end + 1e-9

    def at(self,
           t: float) -> RigidTransform:
        """
        The interpolated pose at time ``t``.

        :raises BuildMonitorStreamError: If ``t`` is outside the stream.
        """
        if not self.covers(t):
            raise BuildMonitorStreamError(f"Pose stream [{self.start:.6f}, {self.end:.6f}] s does not cover "
                                          f"{t:.6f} s.")
        if self._slerp is None:
            return RigidTransform(self._rotations.as_matrix()[0], self.translations[0])

        t = min(max(t, self.start), self.end)
        translation = np.array([np.interp(t, self.times, self.translations[:, k]) for k in range(3)])
        rotation = self._slerp([t]).as_matrix()[0]

        return RigidTransform(_clean_rotation(rotation), translation)

    def positions(self,
                  times: Any) -> np.ndarray:
        times = np.clip(np.asarray(times, dtype=float), self.start, self.end)
        return np.column_stack([np.interp(times, self.times, self.translations[:, k]) for k in range(3)])


def _clean_rotation(rotation: np.ndarray) -> np.ndarray:
    # Slerp round-trips through quaternions; snap the result back on to an exactly orthonormal matrix
    u, _, vt = np.linalg.svd(rotation)
    return u @ vt


def read_poses(path: str,
               gap_warning_s: float = 1.0) -> PoseStream:
    """
    Read a pose stream in full.

    :param path: The ``poses.jsonl`` file.
    :param gap_warning_s: Warn (and record the gap) when consecutive samples are further apart than this.
    :return: The stream.
    :raises BuildMonitorStreamError: If time goes backwards or the stream is empty.
    """
    stats = StreamStats(path)
    samples: List[PoseSample] = []
    previous_us: Optional[int] = None
    for sample in _read_records(path, PoseSample, stats):
        _check_order("Pose", path, previous_us, sample.t_us, gap_warning_s, stats)
        if previous_us is not None and sample.t_us == previous_us:
            logger.debug(f"Dropping duplicate pose at {sample.t_us} µs.")
            continue
        previous_us = sample.t_us
        samples.append(sample)

    logger.debug(f"Read {len(samples)} poses from {path}")

    return PoseStream(samples, stats)


@dataclass(frozen=True)
class LayerSpan:
    """
    A layer found in a recorded tool-height signal: the time it starts and ends, and its nominal tool height.
    """

    index: int
    t_start: float
    t_end: float
    z_tool: float

    def to_dict(self) -> Dict[str, Any]:
        return {"index": self.index, "t_start_s": round(self.t_start, 6), "t_end_s": round(self.t_end, 6),
                "z_tool_mm": round(self.z_tool, 6)}


def detect_layers(poses: PoseStream,
                  layer_thickness: float) -> List[LayerSpan]:
    """
    Split the pose stream in to layers from the tool height alone: a layer starts wherever the height steps up by
    more than half a layer thickness. A layer ends where the next one starts, the last at the end of the stream.

    :param poses: The pose stream.
    :param layer_thickness: The nominal layer thickness, in mm.
    :return: The layers, in order.
    """
    z = poses.translations[:, 2]
    starts = layer_starts(z, layer_thickness)

    spans = []
    for index, first in enumerate(starts):
        last = starts[index + 1] if index + 1 < len(starts) else len(z)
        t_end = float(poses.times[last]) if last < len(z) else poses.end
        values, counts = np.unique(np.round(z[first:last], 3), return_counts=True)
        spans.append(LayerSpan(index, float(poses.times[first]), t_end, float(values[np.argmax(counts)])))

    return spans
