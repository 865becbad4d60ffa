__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import logging
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from buildmonitor.constants import Constants
from buildmonitor.entity.defect import DefectRegion, DefectTrack
from buildmonitor.exception import BuildMonitorConfigError, BuildMonitorIOError

logger = logging.getLogger(__name__)

OVERLAP_MODES = ("xy", "3d")


def overlap(region: DefectRegion,
            track: DefectTrack,
            mode: str = "xy") -> float:
    """
    How much a region's box overlaps the box of a track's latest entry: XY footprint area, or volume in ``3d`` mode.
    """
    if mode == "3d":
        return region.bbox.intersection_volume(track.latest.bbox)
    return region.bbox.intersection_area_xy(track.latest.bbox)


def associate(tracks: List[DefectTrack],
              regions: Sequence[DefectRegion],
              layer: int,
              k_miss: int = 2,
              overlap_mode: str = "xy") -> List[DefectTrack]:
    """
    Match one layer's regions to the active tracks and update the tracks in place. Candidate pairs share a class and
    overlap; they are taken greedily by descending overlap (ties to the lower track id, then the lower region id),
    each region and each track at most once. Unmatched regions start new tracks with ids after every id used so
    far; unmatched active tracks count a miss and close after ``k_miss`` consecutive misses.

    :param tracks: Every track of the run so far, active and closed.
    :param regions: The regions found on ``layer``.
    :param layer: The layer being associated.
    :param k_miss: Misses before a track closes.
    :param overlap_mode: ``xy`` or ``3d``.
    :return: ``tracks``, with new tracks appended.
    """
    if overlap_mode not in OVERLAP_MODES:
        raise BuildMonitorConfigError(f"Overlap mode must be one of {OVERLAP_MODES}, got \"{overlap_mode}\".")

    active = [track for track in tracks if track.is_active]
    candidates = []
    for region in regions:
        for track in active:
            if track.defect_class != region.defect_class or track.latest.layer >= layer:
                continue
            amount = overlap(region, track, overlap_mode)
            if amount > 0:
                candidates.append((-amount, track.track_id, region.region_id, track, region))
    candidates.sort(key=lambda candidate: candidate[:3])

    matched_tracks = set()
    matched_regions = set()
    for _, track_id, region_id, track, region in candidates:
        if track_id in matched_tracks or region_id in matched_regions:
            continue
        track.extend(region)
        matched_tracks.add(track_id)
        matched_regions.add(region_id)

    next_id = max((track.track_id for track in tracks), default=-1) + 1
    for region in sorted(regions, key=lambda r: r.region_id):
        if region.region_id in matched_regions:
            continue
        track = DefectTrack(next_id, region.defect_class)
        track.extend(region)
        tracks.append(track)
        logger.debug(f"Layer {layer}: new {region.defect_class} track #{next_id}.")
        next_id += 1

    for track in active:
        if track.track_id in matched_tracks:
            continue
        track.missed += 1
        if track.missed >= k_miss:
            track.status = Constants.CLOSED
            track.closed_layer = layer
            logger.debug(f"Layer {layer}: track #{track.track_id} closed after {track.missed} missed layers.")

    return tracks


def trend(track: DefectTrack,
          slope_threshold: float = 0.05,
          window: int = 3) -> str:
    """
    Whether a track's peak deviation is growing, shrinking or holding: the least-squares slope of peak ``|d|``
    against layer over the last ``window`` entries, compared with ``±slope_threshold`` mm per layer. Tracks with
    fewer than 3 entries are undetermined.
    """
    entries = track.entries[-window:]
    if len(entries) < 3:
        return Constants.UNDETERMINED

    layers = np.array([entry.layer for entry in entries], dtype=float)
    peaks = np.array([entry.peak_dev for entry in entries], dtype=float)
    slope = float(np.polyfit(layers, peaks, 1)[0])

    if slope > slope_threshold:
        return Constants.AMPLIFYING
    elif slope < -slope_threshold:
        return Constants.COMPENSATING
    return Constants.STABLE


def layer_report(tracks: Sequence[DefectTrack],
                 layer: int,
                 summary: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    The report for one layer: the global deviation summary, the tracks still active, and the history of closed
    tracks with their full series.
    """
    summary = dict(summary or {})
    summary.setdefault("mean_dev_mm", 0.0)
    summary.setdefault("max_dev_mm", 0.0)

    active = sorted((t for t in tracks if t.is_active), key=lambda t: t.track_id)
    closed = sorted((t for t in tracks if not t.is_active), key=lambda t: t.track_id)

    return {"layer": layer,
            "global": summary,
            "tracks": [track.to_dict() for track in active],
            "history": [track.to_dict(include_series=True) for track in closed]}


def tracks_frame(tracks: Sequence[DefectTrack]) -> pd.DataFrame:
    """
    One row per track and layer, for plotting how each defect's area and height evolve.
    """
    rows = []
    for track in sorted(tracks, key=lambda t: t.track_id):
        trends = dict(track.trend_history)
        for entry in track.entries:
            rows.append({"track_id": track.track_id,
                         "layer": entry.layer,
                         "class": track.defect_class,
                         "status": track.status,
                         "area_mm2": round(entry.area, 6),
                         "height_mm": round(entry.height, 6),
                         "peak_dev_mm": round(entry.peak_dev, 6),
                         "trend": trends.get(entry.layer, Constants.UNDETERMINED)})

    return pd.DataFrame(rows, columns=list(Constants.TRACK_CSV_COLUMNS))


class DefectTracker:
    """
    Owns a run's tracks and feeds them one layer of regions at a time.
    """

    def __init__(self,
                 k_miss: int = 2,
                 slope_threshold: float = 0.05,
                 window: int = 3,
                 overlap_mode: str = "xy") -> None:
        if k_miss < 1 or window < 3:
            raise BuildMonitorConfigError("k_miss must be at least 1 and the trend window at least 3.")
        if overlap_mode not in OVERLAP_MODES:
            raise BuildMonitorConfigError(f"Overlap mode must be one of {OVERLAP_MODES}, got \"{overlap_mode}\".")

        self.k_miss: int = k_miss
        self.slope_threshold: float = slope_threshold
        self.window: int = window
        self.overlap_mode: str = overlap_mode
        #: Every track of the run, in creation order.
        self.tracks: List[DefectTrack] = []
        self._last_layer: Optional[int] = None

    def __repr__(self) -> str:
        return f"<DefectTracker: {len(self.tracks)} tracks>"

    @classmethod
    def from_config(cls,
                    config: Any) -> "DefectTracker":
        return cls(int(config.k_miss), float(config.trend_slope_mm_per_layer), int(config.trend_window),
                   str(config.overlap_mode))

    def update(self,
               regions: Sequence[DefectRegion],
               layer: int) -> List[DefectTrack]:
        """
        Associate a layer's regions, then re-evaluate the trend of every track that gained an entry.

        :return: The tracks still active.
        """
        if self._last_layer is not None and layer <= self._last_layer:
            raise BuildMonitorConfigError(f"Layers must be tracked in order; got {layer} after {self._last_layer}.")
        self._last_layer = layer

        associate(self.tracks, regions, layer, self.k_miss, self.overlap_mode)
        for track in self.tracks:
            if track.is_active and track.latest.layer == layer:
                track.trend_history.append((layer, trend(track, self.slope_threshold, self.window)))

        return [track for track in self.tracks if track.is_active]

    def report(self,
               layer: int,
               summary: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        return layer_report(self.tracks, layer, summary)

    def to_frame(self) -> pd.DataFrame:
        return tracks_frame(self.tracks)

    def write_csv(self,
                  path: str) -> str:
        try:
            self.to_frame().to_csv(path, index=False)
        except OSError as e:
            raise BuildMonitorIOError(f"Could not write {path}: {e}") from e

        return path
