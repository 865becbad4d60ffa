__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Sequence, Union

import numpy as np
from scipy.linalg import polar
from scipy.spatial.transform import Rotation

from buildmonitor.exception import BuildMonitorGeometryError, BuildMonitorIOError

logger = logging.getLogger(__name__)

#: Per-entry tolerance for a rotation to be accepted as orthonormal as-is.
ORTHONORMAL_TOLERANCE = 1e-9
#: Per-entry deviation up to which an externally supplied rotation is repaired by polar decomposition.
REORTHONORMALIZE_TOLERANCE = 1e-6

#: A point, or an ``(N, 3)`` array of points, in mm.
Point3 = Union[Sequence[float], np.ndarray]


def as_points(points: Any) -> np.ndarray:
    """
    Coerce ``points`` to a float ``(N, 3)`` array. A single point becomes a one-row array.

    :param points: A point or sequence of points.
    :return: The points as an array.
    """
    array = np.asarray(points, dtype=float)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2 or array.shape[1] != 3:
        raise BuildMonitorGeometryError(f"Expected points of shape (N, 3), got {array.shape}.")
    return array


def orthonormal_error(rotation: np.ndarray) -> float:
    return float(np.max(np.abs(rotation.T @ rotation - np.eye(3))))


def orthonormalize(rotation: Any,
                   tolerance: float = REORTHONORMALIZE_TOLERANCE) -> np.ndarray:
    """
    Return ``rotation`` as a proper rotation matrix. Matrices already orthonormal are returned unchanged,
    near-orthonormal matrices (off by no more than ``tolerance`` per entry) are projected on to the nearest
    rotation by polar decomposition, and anything worse is rejected.

    :param rotation: A 3×3 matrix.
    :param tolerance: The largest per-entry deviation from orthonormality that will be repaired.
    :return: The orthonormal rotation.
    """
    matrix = np.asarray(rotation, dtype=float)
    if matrix.shape != (3, 3) or not np.all(np.isfinite(matrix)):
        raise BuildMonitorGeometryError(f"Rotation must be a finite 3×3 matrix, got shape {matrix.shape}.")

    error = orthonormal_error(matrix)
    if error <= ORTHONORMAL_TOLERANCE and np.linalg.det(matrix) > 0:
        return matrix
    if error > tolerance:
        raise BuildMonitorGeometryError(f"Rotation is not orthonormal (max deviation {error:.3g}).")

    unitary, _ = polar(matrix)
    if np.linalg.det(unitary) <= 0:
        raise BuildMonitorGeometryError("Rotation is a reflection (det < 0).")

    logger.warning(f"Re-orthonormalized a rotation off by {error:.3g} per entry.")

    return unitary


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """
    A rigid-body transform, stored as rotation and translation so it can never pick up shear or scale. Applying
    the transform to a point ``p`` gives ``R p + t``.
    """

    #: The 3×3 orthonormal rotation.
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    #: The translation, in mm.
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        rotation = np.array(self.rotation, dtype=float)
        translation = np.array(self.translation, dtype=float).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise BuildMonitorGeometryError(f"Invalid transform shapes {rotation.shape} and {translation.shape}.")
        if not np.all(np.isfinite(rotation)) or not np.all(np.isfinite(translation)):
            raise BuildMonitorGeometryError("Transform contains non-finite values.")
        if orthonormal_error(rotation) > ORTHONORMAL_TOLERANCE or abs(np.linalg.det(rotation) - 1.0) > 1e-9:
            raise BuildMonitorGeometryError("Transform rotation is not orthonormal with det +1.")

        rotation.flags.writeable = False
        translation.flags.writeable = False
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    def __repr__(self) -> str:
        return f"<RigidTransform: t={self.translation.tolist()}>"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation) and
                    np.array_equal(self.translation, other.translation))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> "RigidTransform":
        return cls(np.eye(3), np.array([x, y, z], dtype=float))

    @classmethod
    def rot_z(cls,
              degrees: float,
              translation: Point3 = (0.0, 0.0, 0.0)) -> "RigidTransform":
        """
        A rotation about +Z by ``degrees``, followed by ``translation``.
        """
        return cls(Rotation.from_euler("z", degrees, degrees=True).as_matrix(), np.asarray(translation, float))

    @classmethod
    def from_matrix(cls,
                    matrix: Any,
                    repair: bool = False) -> "RigidTransform":
        """
        Build a transform from a 4×4 homogeneous matrix.

        :param matrix: The homogeneous matrix.
        :param repair: Re-orthonormalize a near-orthonormal rotation instead of rejecting it.
        :return: The transform.
        """
        m = np.asarray(matrix, dtype=float)
        if m.shape != (4, 4):
            raise BuildMonitorGeometryError(f"Homogeneous matrix must be 4×4, got {m.shape}.")
        if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-12):
            raise BuildMonitorGeometryError("Homogeneous matrix has a non-affine last row.")
        rotation = orthonormalize(m[:3, :3]) if repair else m[:3, :3]
        return cls(rotation, m[:3, 3])

    @classmethod
    def from_external(cls,
                      rotation: Any,
                      translation: Any) -> "RigidTransform":
        """
        Build a transform from numbers produced outside this package (calibration files, pose streams), repairing
        small orthonormality errors.
        """
        rotation_array = np.asarray(rotation, dtype=float)
        if rotation_array.size != 9:
            raise BuildMonitorGeometryError(f"Rotation must have 9 entries, got {rotation_array.size}.")
        return cls(orthonormalize(rotation_array.reshape(3, 3)), np.asarray(translation, dtype=float))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self,
              points: Any) -> np.ndarray:
        """
        Apply this transform to one point or an ``(N, 3)`` array of points.
        """
        array = as_points(points)
        return array @ self.rotation.T + self.translation

    def apply_vectors(self,
                      vectors: Any) -> np.ndarray:
        return as_points(vectors) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        return invert(self)


def compose(a: RigidTransform,
            b: RigidTransform) -> RigidTransform:
    """
    Compose two transforms, the result applies ``b`` first and then ``a``.

    :param a: The outer transform.
    :param b: The inner transform.
    :return: ``a ∘ b``.
    """
    rotation = a.rotation @ b.rotation
    # Products of rotations drift off orthonormal by ~1e-16 per multiply; repair so long chains stay valid
    if orthonormal_error(rotation) > ORTHONORMAL_TOLERANCE / 10:
        rotation, _ = polar(rotation)
    return RigidTransform(rotation, a.rotation @ b.translation + a.translation)


def invert(a: RigidTransform) -> RigidTransform:
    rotation = a.rotation.T
    return RigidTransform(rotation, -rotation @ a.translation)


def project_points(pose_ob: RigidTransform,
                   calib_bl: RigidTransform,
                   local_points: Any) -> np.ndarray:
    """
    Map points measured in a profiler frame {L} in to the work-object frame {O}, through the robot pose
    (flange/tool frame {B} in {O}) and the profiler's hand-eye calibration ({L} in {B}).

    :param pose_ob: The pose of {B} in {O} at the measurement time.
    :param calib_bl: The mounting of the profiler {L} in {B}.
    :param local_points: ``(N, 3)`` points in {L}.
    :return: ``(N, 3)`` points in {O}, in the same order.
    """
    points = as_points(local_points)
    if not np.all(np.isfinite(points)):
        raise BuildMonitorGeometryError("Cannot project non-finite points.")

    return compose(pose_ob, calib_bl).apply(points)


@dataclass(frozen=True, eq=False)
class Aabb:
    """
    An axis-aligned bounding box, in mm.
    """

    #: The minimum corner.
    min: np.ndarray
    #: The maximum corner.
    max: np.ndarray

    def __post_init__(self) -> None:
        lo = np.array(self.min, dtype=float).reshape(3)
        hi = np.array(self.max, dtype=float).reshape(3)
        if np.any(lo > hi):
            raise BuildMonitorGeometryError(f"Aabb min {lo.tolist()} exceeds max {hi.tolist()}.")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def __repr__(self) -> str:
        return f"<Aabb: {self.min.tolist()} .. {self.max.tolist()}>"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Aabb):
            return NotImplemented
        return bool(np.array_equal(self.min, other.min) and np.array_equal(self.max, other.max))

    @classmethod
    def from_points(cls,
                    points: Any) -> "Aabb":
        array = as_points(points)
        if len(array) == 0:
            raise BuildMonitorGeometryError("Cannot bound an empty point set.")
        return cls(array.min(axis=0), array.max(axis=0))

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return (self.min + self.max) / 2.0

    def intersection_extent(self,
                            other: "Aabb") -> np.ndarray:
        return np.clip(np.minimum(self.max, other.max) - np.maximum(self.min, other.min), 0.0, None)

    def intersection_area_xy(self,
                             other: "Aabb") -> float:
        """
        The area of overlap of the two boxes' XY footprints, in mm².
        """
        extent = self.intersection_extent(other)
        return float(extent[0] * extent[1])

    def intersection_volume(self,
                            other: "Aabb") -> float:
        extent = self.intersection_extent(other)
        return float(np.prod(extent))

    def expanded(self,
                 margin: float) -> "Aabb":
        return Aabb(self.min - margin, self.max + margin)

    def to_dict(self) -> Dict[str, Any]:
        return {"min": [round(float(v), 6) for v in self.min], "max": [round(float(v), 6) for v in self.max]}


def load_calibration(path: str) -> Dict[int, RigidTransform]:
    """
    Load per-profiler hand-eye calibrations from a JSON file mapping scanner id to
    ``{"rotation": [9 floats, row-major], "translation": [3 floats, mm]}``. Rotations are re-checked for
    orthonormality, with small numerical errors repaired.

    :param path: The calibration file.
    :return: The mounting transform per scanner id.
    """
    if not os.path.exists(path):
        raise BuildMonitorIOError(f"Calibration file not found: {path}")

    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, ValueError) as e:
        raise BuildMonitorIOError(f"Could not read calibration file {path}: {e}") from e

    calibrations = {}
    for scanner_id, entry in data.items():
        try:
            calibrations[int(scanner_id)] = RigidTransform.from_external(entry["rotation"], entry["translation"])
        except (KeyError, TypeError, ValueError, BuildMonitorGeometryError) as e:
            raise BuildMonitorIOError(f"Calibration entry \"{scanner_id}\" in {path} is malformed: {e}") from e

    return calibrations


def calibration_to_dict(calibrations: Dict[int, RigidTransform]) -> Dict[str, Any]:
    return {str(scanner_id): {"rotation": transform.rotation.reshape(-1).tolist(),
                              "translation": transform.translation.tolist()}
            for scanner_id, transform in sorted(calibrations.items())}
