__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import logging
from typing import Any, Dict, Optional

import numpy as np

from buildmonitor.exception import BuildMonitorEntityError
from buildmonitor.entity.record import Record

logger = logging.getLogger(__name__)


class ProfileFrame(Record):
    """
    One laser-line profile: ``points`` are ``(x_l, z_l)`` pairs in the profiler's laser plane, in mm, and
    ``valid_mask`` marks which samples returned a surface hit.
    """

    def __init__(self,
                 parsed: Dict[str, Any],
                 line_number: int = 0) -> None:
        super().__init__(parsed, line_number)

        #: Trigger time, in µs.
        self.t_us: Optional[int] = self.safe_simple_parse(key="t_us", cast=int, required=True)
        #: The profiler that captured the frame.
        self.scanner_id: Optional[int] = self.safe_simple_parse(key="scanner_id", cast=int, required=True)
        #: ``(N, 2)`` samples in the laser plane.
        self.points: Optional[np.ndarray] = self.safe_parse(self._parse_points)
        #: ``N`` booleans, ``True`` where the sample is a surface hit.
        self.valid_mask: Optional[np.ndarray] = self.safe_parse(self._parse_valid_mask)

    def __repr__(self) -> str:
        return f"<ProfileFrame: scanner {self.scanner_id} at {self.t_us} µs>"

    def __str__(self) -> str:  # pragma: no cover
        return f"ProfileFrame: scanner {self.scanner_id}, t={self.t_us} µs, {self.valid_count} valid samples"

    @classmethod
    def build(cls,
              t_us: int,
              scanner_id: int,
              points: np.ndarray,
              valid_mask: np.ndarray) -> "ProfileFrame":
        """
        Build a frame from values rather than decoded JSON.
        """
        points = np.asarray(points, dtype=float)
        valid_mask = np.asarray(valid_mask, dtype=bool)
        return cls({"t_us": int(t_us), "scanner_id": int(scanner_id),
                    "points": points, "valid_mask": valid_mask})

    @property
    def t(self) -> float:
        return self.t_us / 1e6

    @property
    def valid_count(self) -> int:
        return 0 if self.valid_mask is None else int(np.count_nonzero(self.valid_mask))

    def local_points(self,
                     valid_only: bool = True) -> np.ndarray:
        """
        The samples as 3D points in the profiler frame {L}; the laser plane is ``y_l = 0``.
        """
        points = self.points
        if valid_only:
            points = points[self.valid_mask]
        return np.column_stack([points[:, 0], np.zeros(len(points)), points[:, 1]])

    def to_dict(self) -> Dict[str, Any]:
        """
        The stream record. Invalid samples are written as zeros; coordinates are rounded to the µm.
        """
        points = np.where(self.valid_mask[:, None], np.round(self.points, 6), 0.0)
        return {"t_us": self.t_us, "scanner_id": self.scanner_id,
                "valid_mask": [int(v) for v in self.valid_mask],
                "points": points.tolist()}

    def _parse_points(self) -> np.ndarray:
        points = np.asarray(self.simple_parse("points", required=True), dtype=float)
        if points.ndim != 2 or points.shape[1] != 2:
            raise BuildMonitorEntityError(f"Frame points must be [x_l, z_l] pairs, got shape {points.shape}.")
        return points

    def _parse_valid_mask(self) -> np.ndarray:
        raw = self.simple_parse("valid_mask")
        count = 0 if self.points is None else len(self.points)
        if raw is None:
            return np.ones(count, dtype=bool)

        mask = np.asarray(raw).astype(bool).reshape(-1)
        if self.points is not None and len(mask) != count:
            raise BuildMonitorEntityError(f"Frame has {count} points but {len(mask)} mask entries.")
        return mask
