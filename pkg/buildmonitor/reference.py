__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from buildmonitor.deposition import (DepositionModel, HeightField, PlantedDefect, deposit_schedule, deposit_step,
                                     quadrature_step)
from buildmonitor.exception import BuildMonitorReferenceError
from buildmonitor.fusion import GridView, SparseTsdfGrid
from buildmonitor.meshing import TriangleMesh, marching_cubes
from buildmonitor.toolpath import TIME_TOLERANCE, Toolpath, deposition_schedule, substrate_bounds

__all__ = ["DepositionModel", "HeightField", "deposit_step", "ReferenceSettings", "ReferenceModel",
           "ReferenceBuilder", "build_reference", "reference_mesh", "heightfield_to_grid"]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReferenceSettings:
    """
    How the reference is discretized: the height grid, the quadrature step and the distance grid it is converted to.
    The voxel size and truncation should match the fusion grid the reference is compared against.
    """

    cell: float = 0.5
    margin: float = 20.0
    dt_max: float = 0.01
    voxel_size: float = 2.0
    truncation: float = 6.0
    defects: Tuple[PlantedDefect, ...] = ()

    @classmethod
    def from_config(cls,
                    config: Any,
                    defects: Sequence[PlantedDefect] = ()) -> "ReferenceSettings":
        return cls(cell=float(config.heightfield_cell_mm),
                   margin=float(config.substrate_margin_mm),
                   dt_max=float(config.quadrature_dt_s),
                   voxel_size=float(config.voxel_size_mm),
                   truncation=float(config.truncation),
                   defects=tuple(defects))


@dataclass(frozen=True, eq=False)
class ReferenceModel:
    """
    The near-net reference at one point of the build: the grown height field, and the same surface as a distance
    grid on the fusion lattice.
    """

    #: The last layer incorporated, if built up to a layer.
    layer: Optional[int]
    #: Toolpath time the model is grown to, in s.
    t: float
    heights: HeightField
    grid: GridView
    #: Quadrature steps applied.
    steps: int

    def __repr__(self) -> str:
        return f"<ReferenceModel: layer {self.layer}, t={self.t:.3f} s, {self.steps} steps>"

    @property
    def is_empty(self) -> bool:
        return self.steps == 0 or not np.any(self.heights.heights > 0)

    def distance(self,
                 points: Any) -> Tuple[np.ndarray, np.ndarray]:
        """
        Signed distance to the reference surface from its distance grid, and where that value can be trusted (all
        interpolation corners observed and the value inside the truncation band).
        """
        values, valid = self.grid.sample(points)
        valid &= np.abs(np.nan_to_num(values, nan=np.inf)) < self.grid.truncation
        return values, valid

    def to_dict(self) -> Dict[str, Any]:
        return {"layer": self.layer,
                "t_s": round(self.t, 6),
                "steps": self.steps,
                "volume_mm3": round(self.heights.volume(), 6),
                "max_height_mm": round(float(self.heights.heights.max()), 6)}


def heightfield_to_grid(h: HeightField,
                        voxel_size: float,
                        truncation: float) -> GridView:
    """
    Convert a height field to a truncated distance grid on the fusion lattice. Every voxel whose center lies over
    the plate and within the truncation band of the surface gets ``D`` = its height above the surface, scaled by the
    cosine of the surface slope so it approximates the distance along the normal, with ``W = 1``.

    :param h: The surface.
    :param voxel_size: The fusion voxel size, in mm.
    :param truncation: The truncation distance δ, in mm.
    :return: The grid.
    """
    grid = SparseTsdfGrid(voxel_size=voxel_size, truncation=truncation)

    upper = h.upper
    i = np.arange(int(math.ceil(h.origin[0] / voxel_size - 0.5)), int(math.floor(upper[0] / voxel_size - 0.5)) + 1)
    j = np.arange(int(math.ceil(h.origin[1] / voxel_size - 0.5)), int(math.floor(upper[1] / voxel_size - 0.5)) + 1)
    if not len(i) or not len(j):
        return grid.snapshot()

    ii, jj = np.meshgrid(i, j, indexing="ij")
    cx = (ii.reshape(-1) + 0.5) * voxel_size
    cy = (jj.reshape(-1) + 0.5) * voxel_size
    surface = h.height_at(cx, cy)

    gx, gy = np.gradient(h.heights, h.cell)
    slope = HeightField(tuple(h.origin), h.cell, h.shape, np.sqrt(1.0 + gx ** 2 + gy ** 2))
    stretch = slope.height_at(cx, cy)

    k = np.arange(int(math.floor((float(np.nanmin(surface)) - truncation) / voxel_size)),
                  int(math.floor((float(np.nanmax(surface)) + truncation) / voxel_size)) + 1)
    cz = (k + 0.5) * voxel_size
    D = (cz[None, :] - surface[:, None]) / stretch[:, None]
    band = np.abs(D) <= truncation

    column, level = np.nonzero(band)
    keys = np.column_stack([ii.reshape(-1)[column], jj.reshape(-1)[column], k[level]])
    grid.assign(keys, D[column, level], 1.0)

    return grid.snapshot()


class ReferenceBuilder:
    """
    Grows one reference height field forward in time, so a run's per-layer references cost one pass over the
    toolpath in total. Models it returns are independent copies.
    """

    def __init__(self,
                 toolpath: Toolpath,
                 model: DepositionModel,
                 settings: Optional[ReferenceSettings] = None) -> None:
        self.toolpath: Toolpath = toolpath
        self.model: DepositionModel = model
        self.settings: ReferenceSettings = settings or ReferenceSettings()

        self.schedule = deposition_schedule(toolpath, quadrature_step(model, toolpath.max_speed, self.settings.dt_max))
        self._step_ends = self.schedule.t_end
        self._applied = 0
        self._t = 0.0
        self.heights: HeightField = HeightField.from_bounds(substrate_bounds(toolpath, self.settings.margin),
                                                            self.settings.cell) if toolpath.segments else \
            HeightField((0.0, 0.0), self.settings.cell, (2, 2))

    def __repr__(self) -> str:
        return f"<ReferenceBuilder: t={self._t:.3f} s, {self._applied}/{len(self.schedule)} steps>"

    @property
    def t(self) -> float:
        return self._t

    def advance_to(self,
                   t: float,
                   layer: Optional[int] = None) -> ReferenceModel:
        """
        Grow the reference by every quadrature step that completes by ``t``.

        :raises BuildMonitorReferenceError: If ``t`` is outside the toolpath or earlier than a previous call.
        """
        duration = self.toolpath.duration
        if t < -TIME_TOLERANCE or t > duration + 1e-6:
            raise BuildMonitorReferenceError(f"Time {t} s is outside the toolpath duration [0, {duration}] s.")
        if t < self._t - TIME_TOLERANCE:
            raise BuildMonitorReferenceError(f"Reference is already grown to {self._t} s, cannot go back to {t} s.")

        upto = int(np.searchsorted(self._step_ends, t + 1e-9, side="right"))
        if upto > self._applied:
            logger.debug(f"Growing reference to {t:.3f} s, {upto - self._applied} quadrature steps.")
            deposit_schedule(self.heights, self.model, self.schedule[self._applied:upto], self.settings.defects)
            self._applied = upto
        self._t = max(self._t, t)

        heights = self.heights.copy()
        grid = heightfield_to_grid(heights, self.settings.voxel_size, self.settings.truncation)
        return ReferenceModel(layer, float(t), heights, grid, self._applied)

    def advance_to_layer(self,
                         layer: int) -> ReferenceModel:
        if layer not in self.toolpath.layer_indices:
            raise BuildMonitorReferenceError(f"Layer {layer} is not in the toolpath "
                                             f"(layers {self.toolpath.layer_indices}).")
        return self.advance_to(self.toolpath.layer_end_time(layer), layer)


def build_reference(toolpath: Toolpath,
                    model: DepositionModel,
                    layer: Optional[int] = None,
                    t: Optional[float] = None,
                    settings: Optional[ReferenceSettings] = None) -> ReferenceModel:
    """
    Integrate the plume over the executed toolpath up to the end of ``layer``, or up to time ``t`` (the whole
    toolpath if neither is given).

    :param toolpath: The executed path.
    :param model: The plume.
    :param layer: The last layer to incorporate.
    :param t: The toolpath time to stop at, in s.
    :param settings: Discretization settings.
    :return: The reference.
    :raises BuildMonitorReferenceError: If ``layer`` or ``t`` is out of range.
    """
    if layer is not None and t is not None:
        raise BuildMonitorReferenceError("Build a reference up to a layer or a time, not both.")

    builder = ReferenceBuilder(toolpath, model, settings)
    if layer is not None:
        return builder.advance_to_layer(layer)

    return builder.advance_to(toolpath.duration if t is None else t)


def reference_mesh(ref: ReferenceModel) -> TriangleMesh:
    """
    The reference surface, extracted from its distance grid exactly as fused surfaces are.

    :raises BuildMonitorReferenceError: If nothing has been deposited.
    """
    if ref.is_empty:
        raise BuildMonitorReferenceError("The reference model is empty; nothing has been deposited yet.")

    return marching_cubes(ref.grid)
