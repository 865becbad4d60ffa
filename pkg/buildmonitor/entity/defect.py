__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from buildmonitor.constants import Constants
from buildmonitor.geomcore import Aabb

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class DefectRegion:
    """
    An edge-connected, single-class patch of deviated vertices on one layer's scanned mesh.
    """

    #: The region's index within its layer.
    region_id: int
    #: One of the defect classes.
    defect_class: str
    #: Indices of the region's vertices in the deviation mesh.
    vertices: np.ndarray
    #: Surface area, in mm².
    area: float
    #: Bounding box of the region's vertices.
    bbox: Aabb
    #: The layer the region was found on.
    layer: int
    #: The largest absolute deviation in the region, in mm.
    peak_dev: float
    #: Area-weighted mean signed deviation, in mm.
    mean_dev: float = 0.0
    #: Area-weighted centroid, in mm.
    centroid: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __repr__(self) -> str:
        return f"<DefectRegion: {self.defect_class} #{self.region_id} layer {self.layer}, {self.area:.2f} mm²>"

    def __str__(self) -> str:  # pragma: no cover
        return (f"DefectRegion #{self.region_id}: {self.defect_class}, {self.area:.2f} mm², "
                f"height {self.height:.3f} mm, peak {self.peak_dev:.3f} mm")

    @property
    def height(self) -> float:
        return float(self.bbox.extent[2])

    def to_dict(self) -> Dict[str, Any]:
        return {"id": self.region_id,
                "class": self.defect_class,
                "layer": self.layer,
                "vertex_count": int(len(self.vertices)),
                "area_mm2": round(self.area, 6),
                "height_mm": round(self.height, 6),
                "peak_dev_mm": round(self.peak_dev, 6),
                "mean_dev_mm": round(self.mean_dev, 6),
                "centroid": [round(float(v), 6) for v in self.centroid],
                "bbox": self.bbox.to_dict()}


@dataclass(frozen=True, eq=False)
class TrackEntry:
    """
    A track's observation on one layer.
    """

    layer: int
    area: float
    height: float
    peak_dev: float
    bbox: Aabb
    centroid: np.ndarray

    @classmethod
    def from_region(cls,
                    region: DefectRegion) -> "TrackEntry":
        return cls(region.layer, region.area, region.height, region.peak_dev, region.bbox,
                   np.array(region.centroid, dtype=float))

    def to_dict(self) -> Dict[str, Any]:
        return {"layer": self.layer,
                "area_mm2": round(self.area, 6),
                "height_mm": round(self.height, 6),
                "peak_dev_mm": round(self.peak_dev, 6),
                "centroid": [round(float(v), 6) for v in self.centroid],
                "bbox": self.bbox.to_dict()}


@dataclass(eq=False)
class DefectTrack:
    """
    The lineage of a defect across layers. Entries are in layer order and share the track's class.
    """

    #: Stable id, never reused within a run.
    track_id: int
    #: One of the defect classes.
    defect_class: str
    #: Per-layer observations.
    entries: List[TrackEntry] = field(default_factory=list)
    #: ``active`` or ``closed``.
    status: str = Constants.ACTIVE
    #: Consecutive layers without a matching region.
    missed: int = 0
    #: The trend evaluated after each layer the track was active on, as ``(layer, trend)``.
    trend_history: List[tuple] = field(default_factory=list)
    #: The layer the track closed on.
    closed_layer: Optional[int] = None

    def __repr__(self) -> str:
        return f"<DefectTrack: #{self.track_id} {self.defect_class}, {len(self.entries)} entries, {self.status}>"

    def __str__(self) -> str:  # pragma: no cover
        return f"DefectTrack #{self.track_id}: {self.defect_class}, {self.status}, trend {self.trend}"

    @property
    def latest(self) -> TrackEntry:
        return self.entries[-1]

    @property
    def is_active(self) -> bool:
        return self.status == Constants.ACTIVE

    @property
    def trend(self) -> str:
        return self.trend_history[-1][1] if self.trend_history else Constants.UNDETERMINED

    def extend(self,
               region: DefectRegion) -> None:
        self.entries.append(TrackEntry.from_region(region))
        self.missed = 0

    def entry_for(self,
                  layer: int) -> Optional[TrackEntry]:
        for entry in self.entries:
            if entry.layer == layer:
                return entry
        return None

    def to_dict(self,
                include_series: bool = False) -> Dict[str, Any]:
        latest = self.latest
        data = {"id": self.track_id,
                "class": self.defect_class,
                "status": self.status,
                "area_mm2": round(latest.area, 6),
                "height_mm": round(latest.height, 6),
                "peak_dev_mm": round(latest.peak_dev, 6),
                "trend": self.trend,
                "bbox": latest.bbox.to_dict(),
                "first_layer": self.entries[0].layer,
                "last_layer": latest.layer,
                "missed": self.missed}
        if include_series:
            data["series"] = [entry.to_dict() for entry in self.entries]
            data["trend_history"] = [{"layer": layer, "trend": trend} for layer, trend in self.trend_history]
            data["closed_layer"] = self.closed_layer
        return data
