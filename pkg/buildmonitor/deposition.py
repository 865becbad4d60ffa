__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import logging
import math
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from buildmonitor.exception import BuildMonitorConfigError
from buildmonitor.geomcore import Aabb
from buildmonitor.toolpath import DepositionSchedule

logger = logging.getLogger(__name__)

#: Cells further than this many plume standard deviations from the plume center receive nothing.
PLUME_CUTOFF_SIGMAS = 4.0


def cos_power_table(p: float = 2.0,
                    step_deg: float = 5.0) -> np.ndarray:
    """
    Tabulate the efficiency law ``cos(θ)^p`` on ``[0°, 90°]``.
    """
    degrees = np.arange(0.0, 90.0 + step_deg / 2, step_deg)
    degrees[-1] = min(degrees[-1], 90.0)
    values = np.clip(np.cos(np.radians(degrees)), 0.0, 1.0) ** p
    return np.column_stack([degrees, values])


@dataclass(frozen=True, eq=False)
class DepositionModel:
    """
    The Gaussian plume: peak growth rate ``amplitude`` (mm/s) at the plume center, isotropic standard deviation
    ``sigma`` (mm), and the deposition efficiency ``ζ(θ)`` as a table of ``(degrees, efficiency)`` rows.
    """

    amplitude: float
    sigma: float
    zeta_table: np.ndarray

    def __post_init__(self) -> None:
        table = np.array(self.zeta_table, dtype=float)
        if not self.amplitude > 0:
            raise BuildMonitorConfigError(f"Deposition amplitude must be positive, got {self.amplitude}.")
        if not self.sigma > 0:
            raise BuildMonitorConfigError(f"Plume sigma must be positive, got {self.sigma}.")
        if table.ndim != 2 or table.shape[1] != 2 or len(table) < 1:
            raise BuildMonitorConfigError("Efficiency table must be rows of [deg, value].")
        if np.any(np.diff(table[:, 0]) <= 0) or table[0, 0] != 0.0 or table[-1, 0] > 90.0:
            raise BuildMonitorConfigError("Efficiency table angles must increase from 0° and stay within 90°.")
        if abs(table[0, 1] - 1.0) > 1e-12:
            raise BuildMonitorConfigError("Efficiency at 0° must be 1.")
        if np.any(table[:, 1] < 0) or np.any(table[:, 1] > 1) or np.any(np.diff(table[:, 1]) > 0):
            raise BuildMonitorConfigError("Efficiency values must be within [0, 1] and non-increasing.")
        table.flags.writeable = False
        object.__setattr__(self, "zeta_table", table)

    def __repr__(self) -> str:
        return f"<DepositionModel: A={self.amplitude} mm/s, sigma={self.sigma} mm>"

    @classmethod
    def from_config(cls,
                    block: Dict[str, Any]) -> "DepositionModel":
        """
        Build a model from a ``deposition`` config block: ``{A_mm_per_s, sigma_mm, zeta}``, where ``zeta`` is either
        a ``[[deg, value], ...]`` table or ``{"law": "cos_power", "p": ..., "step_deg": ...}``.
        """
        try:
            amplitude = float(block["A_mm_per_s"])
            sigma = float(block["sigma_mm"])
        except (KeyError, TypeError, ValueError) as e:
            raise BuildMonitorConfigError(f"Deposition block is missing or malformed: {e}")

        zeta = block.get("zeta")
        if zeta is None:
            table = cos_power_table()
        elif isinstance(zeta, dict):
            if zeta.get("law", "cos_power") != "cos_power":
                raise BuildMonitorConfigError(f"Unknown efficiency law \"{zeta.get('law')}\".")
            table = cos_power_table(float(zeta.get("p", 2.0)), float(zeta.get("step_deg", 5.0)))
        else:
            table = np.asarray(zeta, dtype=float)

        return cls(amplitude, sigma, table)

    def to_dict(self) -> Dict[str, Any]:
        return {"A_mm_per_s": self.amplitude, "sigma_mm": self.sigma, "zeta": self.zeta_table.tolist()}

    def zeta(self,
             tilt_deg: Any) -> Any:
        """
        Deposition efficiency at the given spray angle(s), linearly interpolated in the table.
        """
        return np.interp(tilt_deg, self.zeta_table[:, 0], self.zeta_table[:, 1])

    def scaled(self,
               factor: float) -> "DepositionModel":
        return replace(self, amplitude=self.amplitude * factor)


def calibrated_amplitude(layer_thickness: float,
                         speed: float,
                         spacing: float,
                         sigma: float) -> float:
    """
    The peak rate A at which a raster at ``speed`` with line ``spacing`` grows ``layer_thickness`` per pass:
    one pass lays a ridge of area ``A·2πσ²/v`` per unit length, spread over ``spacing``.
    """
    return layer_thickness * speed * spacing / (2.0 * math.pi * sigma ** 2)


def quadrature_step(model: DepositionModel,
                    max_speed: float,
                    dt_max: float) -> float:
    """
    The time step for integrating the plume along a path: at most ``dt_max``, and short enough that the plume is
    sampled at least every σ/2 of travel at ``max_speed``.
    """
    if max_speed > 0 and dt_max > model.sigma / (2.0 * max_speed):
        dt = model.sigma / (2.0 * max_speed)
        logger.debug(f"Quadrature step reduced to {dt:.6f} s for {max_speed} mm/s moves.")
        return dt
    return dt_max


def straight_pass_peak(model: DepositionModel,
                       speed: float,
                       tilt_deg: float = 0.0) -> float:
    """
    The closed-form cross-track peak height of an infinitely long straight pass.
    """
    return float(model.zeta(tilt_deg)) * model.amplitude / speed * math.sqrt(2.0 * math.pi) * model.sigma


class HeightField:
    """
    A regular grid of surface heights over the substrate plate, sampled at nodes ``origin + (i, j)·cell``. Heights
    are measured from the plate top (z = 0) and never negative.
    """

    def __init__(self,
                 origin: Tuple[float, float],
                 cell: float,
                 shape: Tuple[int, int],
                 heights: Optional[np.ndarray] = None) -> None:
        if not cell > 0 or shape[0] < 2 or shape[1] < 2:
            raise BuildMonitorConfigError(f"Height field needs a positive cell and at least 2×2 nodes, "
                                          f"got cell {cell} and shape {shape}.")

        #: XY of node ``(0, 0)``, in mm.
        self.origin: np.ndarray = np.asarray(origin, dtype=float)
        #: Node spacing, in mm.
        self.cell: float = float(cell)
        #: Node heights, indexed ``[i (x), j (y)]``, in mm.
        self.heights: np.ndarray = np.zeros(shape) if heights is None else np.array(heights, dtype=float)

        if self.heights.shape != tuple(shape):
            raise BuildMonitorConfigError(f"Heights shape {self.heights.shape} does not match {shape}.")

    def __repr__(self) -> str:
        return f"<HeightField: {self.shape[0]}×{self.shape[1]} nodes at {self.cell} mm>"

    @classmethod
    def from_bounds(cls,
                    bounds: Aabb,
                    cell: float) -> "HeightField":
        nx = int(math.ceil((bounds.max[0] - bounds.min[0]) / cell)) + 1
        ny = int(math.ceil((bounds.max[1] - bounds.min[1]) / cell)) + 1
        return cls((bounds.min[0], bounds.min[1]), cell, (max(nx, 2), max(ny, 2)))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.heights.shape

    @property
    def xs(self) -> np.ndarray:
        return self.origin[0] + np.arange(self.shape[0]) * self.cell

    @property
    def ys(self) -> np.ndarray:
        return self.origin[1] + np.arange(self.shape[1]) * self.cell

    @property
    def upper(self) -> np.ndarray:
        return self.origin + (np.array(self.shape) - 1) * self.cell

    def copy(self) -> "HeightField":
        return HeightField(tuple(self.origin), self.cell, self.shape, self.heights.copy())

    def contains(self,
                 x: Any,
                 y: Any) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        upper = self.upper
        return (x >= self.origin[0]) & (x <= upper[0]) & (y >= self.origin[1]) & (y <= upper[1])

    def height_at(self,
                  x: Any,
                  y: Any) -> np.ndarray:
        """
        Bilinearly interpolated height at XY positions. Positions off the plate give ``nan``.
        """
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        inside = self.contains(x, y)

        u = np.clip((x - self.origin[0]) / self.cell, 0.0, self.shape[0] - 1.0)
        v = np.clip((y - self.origin[1]) / self.cell, 0.0, self.shape[1] - 1.0)
        i0 = np.minimum(np.floor(u).astype(int), self.shape[0] - 2)
        j0 = np.minimum(np.floor(v).astype(int), self.shape[1] - 2)
        fu = u - i0
        fv = v - j0

        h = self.heights
        value = ((1 - fu) * (1 - fv) * h[i0, j0] + fu * (1 - fv) * h[i0 + 1, j0] +
                 (1 - fu) * fv * h[i0, j0 + 1] + fu * fv * h[i0 + 1, j0 + 1])

        return np.where(inside, value, np.nan)

    def volume(self) -> float:
        """
        Deposited volume above the plate, in mm³ (trapezoidal rule over the nodes).
        """
        weights_x = np.ones(self.shape[0])
        weights_x[[0, -1]] = 0.5
        weights_y = np.ones(self.shape[1])
        weights_y[[0, -1]] = 0.5
        return float(weights_x @ self.heights @ weights_y) * self.cell ** 2


def deposit_step(h: HeightField,
                 model: DepositionModel,
                 nozzle_xy: Any,
                 tilt: float,
                 dt: float,
                 gain: Optional[np.ndarray] = None) -> HeightField:
    """
    Grow ``h`` in place by the plume held at ``nozzle_xy`` for ``dt``: each node within 4σ of the plume center gains
    ``ζ(tilt)·A·exp(−r²/(2σ²))·dt``.

    :param h: The height field to grow.
    :param model: The plume.
    :param nozzle_xy: The plume center (only x and y are used).
    :param tilt: The spray angle, in degrees.
    :param dt: The step, in s.
    :param gain: Optional per-node multiplier on the increment (planted deposition-rate defects).
    :return: ``h``.
    """
    if not dt > 0:
        return h

    cx, cy = float(nozzle_xy[0]), float(nozzle_xy[1])
    reach = PLUME_CUTOFF_SIGMAS * model.sigma
    i0 = max(int(math.ceil((cx - reach - h.origin[0]) / h.cell)), 0)
    i1 = min(int(math.floor((cx + reach - h.origin[0]) / h.cell)), h.shape[0] - 1)
    j0 = max(int(math.ceil((cy - reach - h.origin[1]) / h.cell)), 0)
    j1 = min(int(math.floor((cy + reach - h.origin[1]) / h.cell)), h.shape[1] - 1)
    if i0 > i1 or j0 > j1:
        return h

    dx2 = (h.origin[0] + np.arange(i0, i1 + 1) * h.cell - cx) ** 2
    dy2 = (h.origin[1] + np.arange(j0, j1 + 1) * h.cell - cy) ** 2
    two_sigma2 = 2.0 * model.sigma ** 2
    plume = np.outer(np.exp(-dx2 / two_sigma2), np.exp(-dy2 / two_sigma2))
    plume[np.add.outer(dx2, dy2) > reach ** 2] = 0.0

    increment = float(model.zeta(tilt)) * model.amplitude * dt * plume
    if gain is not None:
        increment *= gain[i0:i1 + 1, j0:j1 + 1]
    h.heights[i0:i1 + 1, j0:j1 + 1] += increment

    return h


@dataclass(frozen=True)
class PlantedDefect:
    """
    A disc of the substrate where the true deposition rate differs from the model by ``gain``, over an inclusive
    range of layers. Only the simulator applies these; the reference model can be given them to predict detection.
    """

    center: Tuple[float, float]
    radius_mm: float
    gain: float
    layers: Tuple[int, int] = (0, 1_000_000)

    @classmethod
    def from_config(cls,
                    block: Dict[str, Any]) -> "PlantedDefect":
        try:
            center = (float(block["center"][0]), float(block["center"][1]))
            layers = tuple(int(v) for v in block.get("layers", (0, 1_000_000)))
            defect = cls(center, float(block["radius_mm"]), float(block["gain"]), (layers[0], layers[1]))
        except (KeyError, IndexError, TypeError, ValueError) as e:
            raise BuildMonitorConfigError(f"Planted defect block is malformed: {e}")
        if defect.radius_mm <= 0 or defect.gain < 0:
            raise BuildMonitorConfigError("Planted defects need a positive radius and a non-negative gain.")
        return defect

    def active_in(self, layer: int) -> bool:
        return self.layers[0] <= layer <= self.layers[1]


def gain_map(h: HeightField,
             defects: Sequence[PlantedDefect],
             layer: int) -> Optional[np.ndarray]:
    """
    The per-node deposition multiplier for ``layer``, or ``None`` where no defect is active.
    """
    active = [d for d in defects if d.active_in(layer)]
    if not active:
        return None

    gain = np.ones(h.shape)
    xx, yy = np.meshgrid(h.xs, h.ys, indexing="ij")
    for defect in active:
        inside = (xx - defect.center[0]) ** 2 + (yy - defect.center[1]) ** 2 <= defect.radius_mm ** 2
        gain[inside] *= defect.gain

    return gain


def deposit_schedule(h: HeightField,
                     model: DepositionModel,
                     schedule: DepositionSchedule,
                     defects: Sequence[PlantedDefect] = ()) -> HeightField:
    """
    Apply every step of ``schedule`` to ``h`` in order.
    """
    gains: Dict[int, Optional[np.ndarray]] = {}
    for position, tilt, dt, layer in zip(schedule.positions, schedule.tilts, schedule.dt, schedule.layers):
        layer = int(layer)
        if layer not in gains:
            gains[layer] = gain_map(h, defects, layer) if defects else None
        deposit_step(h, model, position, float(tilt), float(dt), gains[layer])

    return h


def defects_from_config(blocks: Optional[List[Dict[str, Any]]]) -> List[PlantedDefect]:
    return [PlantedDefect.from_config(block) for block in blocks or []]
