__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import logging
import math
import os
import struct
import threading
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

from buildmonitor.constants import Constants
from buildmonitor.exception import BuildMonitorConfigError, BuildMonitorIOError
from buildmonitor.geomcore import as_points

logger = logging.getLogger(__name__)

ACTIVE_REGION = "active"
INACTIVE_REGION = "inactive"

BLOCK = Constants.BLOCK_SIZE
BLOCK_VOXELS = BLOCK ** 3
GRID_HEADER = struct.Struct("<4sIdd")
BLOCK_KEY = struct.Struct("<3i")

# Voxel keys are packed in to one int64 (21 bits per axis) for fast de-duplication
_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1

BlockKey = Tuple[int, int, int]


def pack_keys(keys: np.ndarray) -> np.ndarray:
    shifted = keys.astype(np.int64) + _KEY_OFFSET
    return (shifted[:, 0] << (2 * _KEY_BITS)) | (shifted[:, 1] << _KEY_BITS) | shifted[:, 2]


def unpack_keys(packed: np.ndarray) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.int64)
    return np.column_stack([(packed >> (2 * _KEY_BITS)) & _KEY_MASK,
                            (packed >> _KEY_BITS) & _KEY_MASK,
                            packed & _KEY_MASK]) - _KEY_OFFSET


def weight_for(d: Any,
               region: str,
               truncation: float) -> Any:
    """
    The measurement weight for a projective signed distance ``d``.

    In the inactive region, 1 behind the surface, falling linearly from 1 to 0 across the band in front of it, and
    0 beyond it. In the active region, 1 everywhere up to the far edge of the band, so new material is never
    discounted, and 0 beyond it.

    :param d: Signed distance(s), in mm, positive toward the sensor.
    :param region: ``active`` or ``inactive``.
    :param truncation: The truncation distance δ, in mm.
    :return: The weight(s).
    """
    if not truncation > 0:
        raise BuildMonitorConfigError(f"Truncation must be positive, got {truncation}.")
    if region not in (ACTIVE_REGION, INACTIVE_REGION):
        raise BuildMonitorConfigError(f"Region must be \"{ACTIVE_REGION}\" or \"{INACTIVE_REGION}\", got "
                                      f"\"{region}\".")

    d = np.asarray(d, dtype=float)
    weights = _weights(d, np.full(d.shape, region == ACTIVE_REGION), truncation)
    return float(weights) if weights.ndim == 0 else weights


def _weights(d: np.ndarray,
             active: np.ndarray,
             truncation: float) -> np.ndarray:
    ramp = np.clip(1.0 - d / truncation, 0.0, 1.0)
    inactive = np.where(d < 0, 1.0, np.where(d > truncation, 0.0, ramp))
    return np.where(active, np.where(d > truncation, 0.0, 1.0), inactive)


def tsdf_update(D: Any,
                W: Any,
                d: Any,
                w: Any) -> Tuple[Any, Any]:
    """
    The weighted running-mean update of a voxel: ``D' = (W·D + w·d) / (W + w)`` and ``W' = W + w``. Where
    ``W + w`` is 0 the voxel is left as it was.
    """
    D, W, d, w = (np.asarray(v, dtype=float) for v in (D, W, d, w))
    total = W + w
    with np.errstate(divide="ignore", invalid="ignore"):
        fused = np.where(total > 0, (W * D + w * d) / total, D)
    if fused.ndim == 0:
        return float(fused), float(total)
    return fused, total


@dataclass(frozen=True)
class ActiveRegion:
    """
    The neighborhood of the current deposition spot, where the surface is still growing.
    """

    center: Tuple[float, float, float]
    radius: float = 10.0

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise BuildMonitorConfigError(f"Active region radius must be positive, got {self.radius}.")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))

    def contains(self,
                 points: Any) -> np.ndarray:
        offsets = as_points(points) - np.asarray(self.center)
        return np.einsum("ij,ij->i", offsets, offsets) <= self.radius ** 2


def update_active_region(region: ActiveRegion,
                         nozzle_pos: Any,
                         surface_height: Optional[float] = None,
                         standoff: float = 0.0) -> ActiveRegion:
    """
    Re-center the active region on the surface under the nozzle.

    :param region: The current region.
    :param nozzle_pos: The nozzle position at frame time, in mm.
    :param surface_height: The reconstructed surface height under the nozzle, if known.
    :param standoff: Used to estimate the surface height as ``nozzle z - standoff`` when it is not known.
    :return: The moved region, radius unchanged.
    """
    x, y, z = (float(v) for v in np.asarray(nozzle_pos, dtype=float).reshape(3))
    if surface_height is None or not math.isfinite(surface_height):
        surface_height = z - standoff
    return ActiveRegion((x, y, surface_height), region.radius)


class _Block:
    __slots__ = ("D", "W", "lock")

    def __init__(self) -> None:
        self.D = np.zeros((BLOCK, BLOCK, BLOCK))
        self.W = np.zeros((BLOCK, BLOCK, BLOCK))
        self.lock = threading.Lock()

    def writable(self) -> None:
        # Arrays shared with a snapshot are read-only; copy them before the first write
        if not self.D.flags.writeable:
            self.D = self.D.copy()
            self.W = self.W.copy()


@dataclass
class IntegrationResult:
    """
    Counters from integrating one frame.
    """

    points: int = 0
    skipped: int = 0
    active_points: int = 0
    voxels: int = 0
    clamped: int = 0


class GridView:
    """
    An immutable, point-in-time view of a sparse TSDF grid.
    """

    def __init__(self,
                 voxel_size: float,
                 truncation: float,
                 blocks: Optional[Dict[BlockKey, Tuple[np.ndarray, np.ndarray]]] = None) -> None:
        #: Edge length of a voxel, in mm.
        self.voxel_size: float = float(voxel_size)
        #: The truncation distance δ, in mm.
        self.truncation: float = float(truncation)
        self._blocks: Dict[BlockKey, Tuple[np.ndarray, np.ndarray]] = blocks or {}
        # Block z indices per (x, y) block column
        self._columns: Dict[Tuple[int, int], List[int]] = {}
        for (kx, ky, kz), (D, W) in self._blocks.items():
            D.flags.writeable = False
            W.flags.writeable = False
            self._columns.setdefault((kx, ky), []).append(kz)

    def __repr__(self) -> str:
        return f"<GridView: {len(self._blocks)} blocks at {self.voxel_size} mm>"

    def __len__(self) -> int:
        return len(self._blocks)

    @property
    def block_count(self) -> int:
        return len(self._blocks)

    @property
    def is_empty(self) -> bool:
        return not self._blocks

    def block_keys(self) -> list:
        return sorted(self._blocks)

    def block(self,
              key: BlockKey) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        return self._blocks.get(tuple(key))

    def blocks(self) -> Iterator[Tuple[BlockKey, np.ndarray, np.ndarray]]:
        for key in sorted(self._blocks):
            D, W = self._blocks[key]
            yield key, D, W

    def observed(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Every observed voxel (``W > 0``): its integer key, ``D`` and ``W``, sorted by key.
        """
        keys, ds, ws = [], [], []
        for key, D, W in self.blocks():
            local = np.argwhere(W > 0)
            if len(local):
                keys.append(local + np.asarray(key) * BLOCK)
                ds.append(D[W > 0])
                ws.append(W[W > 0])
        if not keys:
            return np.zeros((0, 3), dtype=np.int64), np.zeros(0), np.zeros(0)
        return np.concatenate(keys).astype(np.int64), np.concatenate(ds), np.concatenate(ws)

    @property
    def voxel_count(self) -> int:
        return int(sum(np.count_nonzero(W) for _, W in self._blocks.values()))

    def voxel_center(self,
                     keys: Any) -> np.ndarray:
        return (np.asarray(keys, dtype=float) + 0.5) * self.voxel_size

    def voxel_key(self,
                  points: Any) -> np.ndarray:
        return np.floor(as_points(points) / self.voxel_size).astype(np.int64)

    def lookup(self,
               keys: Any) -> Tuple[np.ndarray, np.ndarray]:
        """
        ``D`` and ``W`` at integer voxel keys. Voxels in unallocated blocks read as ``D = 0``, ``W = 0``.
        """
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        D = np.zeros(len(keys))
        W = np.zeros(len(keys))
        if not len(keys) or not self._blocks:
            return D, W

        block_keys = np.floor_divide(keys, BLOCK)
        local = keys - block_keys * BLOCK
        packed = pack_keys(block_keys)
        order = np.argsort(packed, kind="stable")
        splits = np.nonzero(np.diff(packed[order]))[0] + 1
        for rows in np.split(order, splits):
            arrays = self._blocks.get(tuple(int(v) for v in block_keys[rows[0]]))
            if arrays is None:
                continue
            i, j, k = local[rows].T
            D[rows] = arrays[0][i, j, k]
            W[rows] = arrays[1][i, j, k]

        return D, W

    def sample(self,
               points: Any) -> Tuple[np.ndarray, np.ndarray]:
        """
        Trilinearly interpolate ``D`` at arbitrary points.

        :param points: ``(N, 3)`` query points, in mm.
        :return: The interpolated distances and a mask that is ``True`` where all 8 surrounding voxels are observed.
        """
        grid = as_points(points) / self.voxel_size - 0.5
        base = np.floor(grid).astype(np.int64)
        frac = grid - base

        value = np.zeros(len(grid))
        valid = np.ones(len(grid), dtype=bool)
        for corner in np.ndindex(2, 2, 2):
            offset = np.array(corner)
            D, W = self.lookup(base + offset)
            weight = np.prod(np.where(offset == 1, frac, 1.0 - frac), axis=1)
            value += weight * D
            valid &= W > 0

        return np.where(valid, value, np.nan), valid

    def surface_height(self,
                       x: float,
                       y: float) -> float:
        """
        The height of the top-most zero crossing of ``D`` (negative below, positive above) in the voxel column
        containing ``(x, y)``, or ``nan`` if the column holds no crossing.
        """
        i = int(math.floor(x / self.voxel_size))
        j = int(math.floor(y / self.voxel_size))
        bi, bj = i // BLOCK, j // BLOCK
        li, lj = i - bi * BLOCK, j - bj * BLOCK

        column_k, column_d = [], []
        for kz in self._columns.get((bi, bj), ()):
            D, W = self._blocks[(bi, bj, kz)]
            observed = W[li, lj] > 0
            column_k.append(np.nonzero(observed)[0] + kz * BLOCK)
            column_d.append(D[li, lj][observed])
        if not column_k:
            return math.nan

        k = np.concatenate(column_k)
        d = np.concatenate(column_d)
        order = np.argsort(k)
        k, d = k[order], d[order]

        crossings = np.nonzero((np.diff(k) == 1) & (d[:-1] < 0) & (d[1:] >= 0))[0]
        if not len(crossings):
            return math.nan

        c = crossings[-1]
        fraction = -d[c] / (d[c + 1] - d[c])
        return float((k[c] + 0.5 + fraction) * self.voxel_size)

    def equals(self,
               other: "GridView") -> bool:
        if self.block_keys() != other.block_keys():
            return False
        return all(np.array_equal(self._blocks[key][0], other._blocks[key][0]) and
                   np.array_equal(self._blocks[key][1], other._blocks[key][1]) for key in self._blocks)


class SparseTsdfGrid:
    """
    A sparse truncated-signed-distance grid: voxels are allocated in 8×8×8 leaf blocks only where measurements
    land. Voxel ``(i, j, k)`` is centered at ``((i, j, k) + 0.5) · voxel_size``. Positive ``D`` is outside the
    material, toward the sensor.

    Frames from different scanners may be integrated from different threads. Each block is updated under its own
    lock, and allocating blocks is serialized on a structure lock.
    """

    def __init__(self,
                 voxel_size: float = 2.0,
                 truncation: Optional[float] = None,
                 max_weight: float = 128.0,
                 active_weight_cap: float = 4.0,
                 active_change_threshold: Optional[float] = 0.1) -> None:
        truncation = 3.0 * voxel_size if truncation is None else truncation
        if not voxel_size > 0 or not truncation > 0:
            raise BuildMonitorConfigError("Voxel size and truncation must be positive.")
        if truncation < voxel_size:
            raise BuildMonitorConfigError(f"Truncation ({truncation}) must be at least the voxel size "
                                          f"({voxel_size}).")

        #: Edge length of a voxel, in mm.
        self.voxel_size: float = float(voxel_size)
        #: The truncation distance δ, in mm.
        self.truncation: float = float(truncation)
        #: Weight ceiling applied to inactive-region updates.
        self.max_weight: float = float(max_weight)
        #: Ceiling on a voxel's prior weight when an active-region measurement disagrees with it.
        self.active_weight_cap: float = float(active_weight_cap)
        #: The disagreement, in mm, above which the prior weight is capped. None means δ/2.
        self.active_change_threshold: float = self.truncation / 2.0 if active_change_threshold is None \
            else float(active_change_threshold)

        self._blocks: Dict[BlockKey, _Block] = {}
        self._structure_lock = threading.Lock()

    def __repr__(self) -> str:
        return f"<SparseTsdfGrid: {len(self._blocks)} blocks at {self.voxel_size} mm>"

    @classmethod
    def from_config(cls,
                    config: Any) -> "SparseTsdfGrid":
        return cls(float(config.voxel_size_mm), config.truncation, float(config.max_weight),
                   float(config.active_weight_cap), config.active_change_threshold)

    @property
    def block_count(self) -> int:
        return len(self._blocks)

    def _block(self,
               key: BlockKey) -> _Block:
        block = self._blocks.get(key)
        if block is None:
            with self._structure_lock:
                block = self._blocks.get(key)
                if block is None:
                    block = _Block()
                    self._blocks[key] = block
        return block

    def integrate(self,
                  keys: np.ndarray,
                  sum_w: np.ndarray,
                  sum_wd: np.ndarray,
                  active: np.ndarray) -> int:
        """
        Apply one frame's aggregated measurements: per voxel, the summed weight, the summed weighted distance, and
        whether any active-region ray touched it.

        :return: The number of voxels whose prior weight was capped.
        """
        block_keys = np.floor_divide(keys, BLOCK)
        packed = pack_keys(block_keys)
        order = np.argsort(packed, kind="stable")
        packed = packed[order]
        splits = np.nonzero(np.diff(packed))[0] + 1

        clamped = 0
        for rows in np.split(order, splits):
            block_key = tuple(int(v) for v in block_keys[rows[0]])
            i, j, k = (keys[rows] - np.asarray(block_key) * BLOCK).T
            block = self._block(block_key)
            with block.lock:
                block.writable()
                clamped += self._update_block(block, (i, j, k), sum_w[rows], sum_wd[rows], active[rows])

        return clamped

    def _update_block(self,
                      block: _Block,
                      index: Tuple[np.ndarray, np.ndarray, np.ndarray],
                      sum_w: np.ndarray,
                      sum_wd: np.ndarray,
                      active: np.ndarray) -> int:
        D_prev = block.D[index]
        W_prev = block.W[index]
        d_mean = sum_wd / sum_w

        stale = active & (W_prev > 0) & (np.abs(d_mean - D_prev) > self.active_change_threshold)
        W_prev = np.where(stale, np.minimum(W_prev, self.active_weight_cap), W_prev)

        D_new, W_new = tsdf_update(D_prev, W_prev, d_mean, sum_w)
        W_new = np.where(active, W_new, np.minimum(W_new, self.max_weight))

        block.D[index] = np.clip(D_new, -self.truncation, self.truncation)
        block.W[index] = W_new

        return int(np.count_nonzero(stale & (block.W[index] > 0)))

    def assign(self,
               keys: Any,
               D: Any,
               W: Any) -> None:
        """
        Overwrite voxels outright, allocating blocks as needed.
        """
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        if not len(keys):
            return
        D = np.broadcast_to(np.asarray(D, dtype=float), (len(keys),))
        W = np.broadcast_to(np.asarray(W, dtype=float), (len(keys),))

        block_keys = np.floor_divide(keys, BLOCK)
        packed = pack_keys(block_keys)
        order = np.argsort(packed, kind="stable")
        splits = np.nonzero(np.diff(packed[order]))[0] + 1
        for rows in np.split(order, splits):
            block_key = tuple(int(v) for v in block_keys[rows[0]])
            i, j, k = (keys[rows] - np.asarray(block_key) * BLOCK).T
            block = self._block(block_key)
            with block.lock:
                block.writable()
                block.D[i, j, k] = D[rows]
                block.W[i, j, k] = W[rows]

    def snapshot(self) -> GridView:
        """
        A consistent, immutable view of the grid. Blocks are shared with the view and copied on the next write, so
        taking a snapshot costs one reference per block.
        """
        blocks = {}
        with self._structure_lock:
            for key, block in self._blocks.items():
                with block.lock:
                    block.D.flags.writeable = False
                    block.W.flags.writeable = False
                    blocks[key] = (block.D, block.W)

        return GridView(self.voxel_size, self.truncation, blocks)


def snapshot(grid: SparseTsdfGrid) -> GridView:
    return grid.snapshot()


def integrate_frame(grid: SparseTsdfGrid,
                    sensor_origin: Any,
                    points_o: Any,
                    active: Optional[ActiveRegion] = None,
                    force_inactive: bool = False) -> IntegrationResult:
    """
    Fuse one frame of surface points in to ``grid`` by casting a ray from the sensor to each point and updating
    every voxel whose center projects within ±δ of the hit along the ray with the projective signed distance
    ``d = |hit - origin| - (center - origin)·u`` (positive between the sensor and the surface).

    Rays that touch the same voxel within the frame are combined in to one weighted measurement before the
    running-mean update. A voxel touched by any ray whose hit lies inside the active region is updated with the
    active-region rules.

    :param grid: The grid to update.
    :param sensor_origin: One ray origin for the frame, or one per point, in mm.
    :param points_o: ``(N, 3)`` surface points in the work-object frame, in mm.
    :param active: The active region, if any.
    :param force_inactive: Use the inactive-region rules everywhere.
    :return: Counters for the frame.
    """
    points = np.asarray(points_o, dtype=float).reshape(-1, 3)
    origins = np.broadcast_to(np.asarray(sensor_origin, dtype=float), points.shape)

    finite = np.all(np.isfinite(points), axis=1) & np.all(np.isfinite(origins), axis=1)
    rays = points[finite] - origins[finite]
    lengths = np.linalg.norm(rays, axis=1)
    usable = lengths > 0
    result = IntegrationResult(points=int(np.count_nonzero(finite) - np.count_nonzero(~usable)),
                               skipped=int(len(points) - np.count_nonzero(finite) + np.count_nonzero(~usable)))
    if result.skipped:
        logger.debug(f"Skipped {result.skipped} non-finite or degenerate points.")

    hits = points[finite][usable]
    ray_origins = origins[finite][usable]
    lengths = lengths[usable]
    if not len(hits):
        return result
    directions = rays[usable] / lengths[:, None]

    if active is not None and not force_inactive:
        ray_active = active.contains(hits)
    else:
        ray_active = np.zeros(len(hits), dtype=bool)
    result.active_points = int(np.count_nonzero(ray_active))

    # March the ±δ band around each hit finely enough to touch every voxel the ray crosses
    delta = grid.truncation
    step = grid.voxel_size / 4.0
    offsets = np.arange(-delta, delta + step / 2, step)
    samples = hits[:, None, :] + offsets[None, :, None] * directions[:, None, :]
    keys = np.floor(samples / grid.voxel_size).astype(np.int64)
    packed = pack_keys(keys.reshape(-1, 3)).reshape(len(hits), len(offsets))

    first = np.ones(packed.shape, dtype=bool)
    first[:, 1:] = packed[:, 1:] != packed[:, :-1]
    ray_index = np.broadcast_to(np.arange(len(hits))[:, None], packed.shape)[first]
    voxel_packed = packed[first]

    centers = (unpack_keys(voxel_packed) + 0.5) * grid.voxel_size
    d = lengths[ray_index] - np.einsum("ij,ij->i", centers - ray_origins[ray_index], directions[ray_index])
    in_band = np.abs(d) <= delta
    d, ray_index, voxel_packed = d[in_band], ray_index[in_band], voxel_packed[in_band]

    w = _weights(d, ray_active[ray_index], delta)
    keep = w > 0
    if not np.any(keep):
        return result
    d, w, ray_index, voxel_packed = d[keep], w[keep], ray_index[keep], voxel_packed[keep]

    unique, inverse = np.unique(voxel_packed, return_inverse=True)
    sum_w = np.bincount(inverse, weights=w, minlength=len(unique))
    sum_wd = np.bincount(inverse, weights=w * d, minlength=len(unique))
    voxel_active = np.bincount(inverse, weights=ray_active[ray_index].astype(float), minlength=len(unique)) > 0

    result.voxels = len(unique)
    result.clamped = grid.integrate(unpack_keys(unique), sum_w, sum_wd, voxel_active)

    return result


def save_grid(view: GridView,
              path: str) -> str:
    """
    Write a grid view in the versioned little-endian binary format: a header of magic, version, voxel size and
    truncation, then per block its key as 3 int32 and 512 float32 ``(D, W)`` pairs, voxels in x-major order.
    """
    try:
        with open(path, "wb") as f:
            f.write(GRID_HEADER.pack(Constants.GRID_MAGIC, Constants.GRID_VERSION, view.voxel_size,
                                     view.truncation))
            for key, D, W in view.blocks():
                f.write(BLOCK_KEY.pack(*key))
                f.write(np.column_stack([D.reshape(-1), W.reshape(-1)]).astype("<f4").tobytes())
    except OSError as e:
        raise BuildMonitorIOError(f"Could not write grid {path}: {e}") from e

    return path


def load_grid(path: str) -> GridView:
    """
    Read a grid written by :func:`save_grid`.
    """
    if not os.path.exists(path):
        raise BuildMonitorIOError(f"Grid file not found: {path}")

    block_bytes = BLOCK_VOXELS * 2 * 4
    try:
        with open(path, "rb") as f:
            header = f.read(GRID_HEADER.size)
            if len(header) != GRID_HEADER.size:
                raise BuildMonitorIOError(f"Grid file {path} is truncated.")
            magic, version, voxel_size, truncation = GRID_HEADER.unpack(header)
            if magic != Constants.GRID_MAGIC:
                raise BuildMonitorIOError(f"{path} is not a grid file.")
            if version != Constants.GRID_VERSION:
                raise BuildMonitorIOError(f"Grid file {path} has unsupported version {version}.")

            blocks = {}
            while True:
                raw_key = f.read(BLOCK_KEY.size)
                if not raw_key:
                    break
                payload = f.read(block_bytes)
                if len(raw_key) != BLOCK_KEY.size or len(payload) != block_bytes:
                    raise BuildMonitorIOError(f"Grid file {path} is truncated.")
                values = np.frombuffer(payload, dtype="<f4").astype(float).reshape(BLOCK_VOXELS, 2)
                blocks[BLOCK_KEY.unpack(raw_key)] = (values[:, 0].reshape(BLOCK, BLOCK, BLOCK).copy(),
                                                     values[:, 1].reshape(BLOCK, BLOCK, BLOCK).copy())
    except OSError as e:
        raise BuildMonitorIOError(f"Could not read grid {path}: {e}") from e

    return GridView(voxel_size, truncation, blocks)
