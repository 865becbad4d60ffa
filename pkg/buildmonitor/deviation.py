__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Union

import numpy as np
from matplotlib import colormaps

from buildmonitor.constants import Constants
from buildmonitor.entity.defect import DefectRegion
from buildmonitor.exception import BuildMonitorConfigError, BuildMonitorMeshError
from buildmonitor.geomcore import Aabb
from buildmonitor.meshing import MeshDistance, TriangleMesh, connected_components, mean_curvature, submesh
from buildmonitor.reference import ReferenceModel, reference_mesh

logger = logging.getLogger(__name__)

_CLASS_NAMES = {code: name for name, code in Constants.CLASS_CODES.items()}


@dataclass(eq=False)
class DeviationMap:
    """
    A scanned mesh with its signed deviation from the reference at every vertex (positive where there is material
    beyond the reference), and once classified, a class and local metric per vertex.
    """

    mesh: TriangleMesh
    #: Signed deviation per vertex, in mm.
    deviation: np.ndarray
    #: Class code per vertex, see ``Constants.CLASS_CODES``.
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    #: Normalized local metric per vertex, in ``[-1, 1]``.
    metric: np.ndarray = field(default_factory=lambda: np.zeros(0))
    #: Discrete mean curvature per vertex, in 1/mm.
    curvature: Optional[np.ndarray] = None
    #: Vertices whose deviation came from exact triangle queries rather than the reference grid.
    from_mesh: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self) -> None:
        n = len(self.mesh.vertices)
        self.deviation = np.asarray(self.deviation, dtype=float)
        if len(self.deviation) != n:
            raise BuildMonitorMeshError(f"Expected {n} deviations, got {len(self.deviation)}.")
        if len(self.classes) != n:
            self.classes = np.full(n, Constants.CLASS_CODES[Constants.NORMAL], dtype=np.int64)
        if len(self.metric) != n:
            self.metric = np.zeros(n)
        if len(self.from_mesh) != n:
            self.from_mesh = np.zeros(n, dtype=bool)

    def __repr__(self) -> str:
        return f"<DeviationMap: {len(self.deviation)} vertices>"

    def class_names(self) -> List[str]:
        return [_CLASS_NAMES[int(code)] for code in self.classes]

    def mask(self,
             defect_class: str) -> np.ndarray:
        return self.classes == Constants.CLASS_CODES[defect_class]


def compute_deviation(scanned: TriangleMesh,
                      ref: Union[ReferenceModel, TriangleMesh],
                      accelerator: Optional[MeshDistance] = None) -> DeviationMap:
    """
    Signed deviation of every scanned vertex from the reference surface. Against a :class:`ReferenceModel`, the
    reference distance grid answers wherever it is trusted and exact triangle queries against the reference mesh
    answer everywhere else; against a mesh, every vertex is queried exactly.

    :param scanned: The scanned surface.
    :param ref: The reference, as a model or a mesh, in the same frame.
    :param accelerator: A prebuilt :class:`MeshDistance` over the reference mesh.
    :return: The unclassified map.
    :raises BuildMonitorMeshError: If either surface is empty.
    """
    if scanned.is_empty:
        raise BuildMonitorMeshError("Cannot compute deviations of an empty scanned mesh.")

    vertices = scanned.vertices
    deviation = np.zeros(len(vertices))
    from_mesh = np.ones(len(vertices), dtype=bool)

    if isinstance(ref, ReferenceModel):
        values, valid = ref.distance(vertices)
        deviation[valid] = values[valid]
        from_mesh = ~valid
        if np.any(from_mesh) and accelerator is None:
            accelerator = MeshDistance(reference_mesh(ref))
    elif accelerator is None:
        if ref.is_empty:
            raise BuildMonitorMeshError("Cannot compute deviations against an empty reference mesh.")
        accelerator = MeshDistance(ref)

    if np.any(from_mesh):
        deviation[from_mesh] = accelerator.query(vertices[from_mesh])
        logger.debug(f"{int(np.count_nonzero(from_mesh))} of {len(vertices)} vertices queried against the "
                     f"reference mesh.")

    return DeviationMap(scanned, deviation, from_mesh=from_mesh)


def classify(deviation_map: DeviationMap,
             global_tolerance: float,
             local_threshold: float,
             curvature: Optional[np.ndarray] = None) -> DeviationMap:
    """
    Classify every vertex. Vertices beyond ``±global_tolerance`` are global over- or underbuild. The rest get the
    local metric ``m = H·d`` normalized by its largest magnitude over the eligible vertices; ``|m|`` above
    ``local_threshold`` is a local deviation, ``local_over`` for positive ``m`` and ``local_under`` for negative.
    Boundary and non-manifold vertices are never locally deviated.

    :param deviation_map: The map from :func:`compute_deviation`.
    :param global_tolerance: δ_G, in mm.
    :param local_threshold: δ_L, in ``(0, 1]``.
    :param curvature: Precomputed mean curvature, otherwise computed from the mesh.
    :return: A classified copy of the map.
    """
    if not global_tolerance > 0:
        raise BuildMonitorConfigError(f"Global tolerance must be positive, got {global_tolerance}.")
    if not 0 < local_threshold <= 1:
        raise BuildMonitorConfigError(f"Local threshold must be in (0, 1], got {local_threshold}.")

    d = deviation_map.deviation
    codes = Constants.CLASS_CODES
    classes = np.full(len(d), codes[Constants.NORMAL], dtype=np.int64)
    classes[d > global_tolerance] = codes[Constants.OVERBUILD]
    classes[d < -global_tolerance] = codes[Constants.UNDERBUILD]

    if curvature is None:
        curvature, flags = mean_curvature(deviation_map.mesh)
    else:
        curvature = np.asarray(curvature, dtype=float)
        flags = deviation_map.mesh.boundary_vertices() | deviation_map.mesh.nonmanifold_vertices()

    eligible = (np.abs(d) <= global_tolerance) & ~flags
    product = np.where(eligible, curvature * d, 0.0)
    scale = float(np.max(np.abs(product))) if len(product) else 0.0
    metric = product / scale if scale > 0 else np.zeros(len(d))

    local = eligible & (np.abs(metric) > local_threshold)
    classes[local & (metric > 0)] = codes[Constants.LOCAL_OVER]
    classes[local & (metric < 0)] = codes[Constants.LOCAL_UNDER]

    return replace(deviation_map, classes=classes, metric=metric, curvature=curvature)


def segment(deviation_map: DeviationMap,
            min_area: float,
            layer: int = 0) -> List[DefectRegion]:
    """
    Split the deviated vertices in to edge-connected single-class regions, dropping regions whose area does not
    exceed ``min_area``. A vertex's area is a third of its incident triangles' area.

    Regions are numbered by class, then by centroid, so numbering does not depend on vertex order.
    """
    mesh = deviation_map.mesh
    if mesh.is_empty:
        return []

    vertex_area = mesh.vertex_areas()
    d = deviation_map.deviation
    normal = Constants.CLASS_CODES[Constants.NORMAL]

    found = []
    for group in connected_components(mesh, deviation_map.classes):
        code = int(deviation_map.classes[group[0]])
        if code == normal:
            continue
        area = float(vertex_area[group].sum())
        if area <= min_area:
            continue
        weights = vertex_area[group]
        total = weights.sum()
        points = mesh.vertices[group]
        centroid = (weights @ points) / total if total > 0 else points.mean(axis=0)
        mean_dev = float(weights @ d[group] / total) if total > 0 else float(d[group].mean())
        found.append((code, tuple(np.round(centroid, 6)), group, area, centroid, mean_dev))

    found.sort(key=lambda item: (item[0], item[1]))
    return [DefectRegion(region_id=i,
                         defect_class=_CLASS_NAMES[code],
                         vertices=group,
                         area=area,
                         bbox=Aabb.from_points(mesh.vertices[group]),
                         layer=layer,
                         peak_dev=float(np.max(np.abs(d[group]))),
                         mean_dev=mean_dev,
                         centroid=centroid)
            for i, (code, _, group, area, centroid, mean_dev) in enumerate(found)]


def summarize(deviation_map: DeviationMap) -> Dict[str, Any]:
    """
    Mean, RMS and largest absolute deviation, and the vertex count of each class.
    """
    d = deviation_map.deviation
    counts = np.bincount(deviation_map.classes, minlength=len(Constants.CLASS_CODES))
    return {"vertices": int(len(d)),
            "mean_dev_mm": round(float(d.mean()), 6) if len(d) else 0.0,
            "mean_abs_dev_mm": round(float(np.abs(d).mean()), 6) if len(d) else 0.0,
            "rms_dev_mm": round(float(np.sqrt(np.mean(d ** 2))), 6) if len(d) else 0.0,
            "max_dev_mm": round(float(np.max(np.abs(d))), 6) if len(d) else 0.0,
            "class_counts": {name: int(counts[code]) for name, code in sorted(Constants.CLASS_CODES.items())}}


def deviation_colors(deviation_map: DeviationMap,
                     global_tolerance: float,
                     local_threshold: float) -> np.ndarray:
    """
    Per-vertex RGB: a red ramp for overbuild and a blue ramp for underbuild (deeper with ``|d|`` from δ_G to 3·δ_G),
    an orange-purple ramp for local deviations (deeper with ``|m|`` from δ_L to 1), and grey elsewhere.
    """
    colors = np.tile(np.array(Constants.NORMAL_RGB, dtype=np.uint8), (len(deviation_map.deviation), 1))
    d = np.abs(deviation_map.deviation)
    m = np.abs(deviation_map.metric)

    for defect_class, (name, start, end) in Constants.CLASS_COLORMAPS.items():
        mask = deviation_map.mask(defect_class)
        if not np.any(mask):
            continue
        if defect_class in (Constants.OVERBUILD, Constants.UNDERBUILD):
            strength = np.clip((d[mask] - global_tolerance) / (2.0 * global_tolerance), 0.0, 1.0)
        else:
            span = max(1.0 - local_threshold, 1e-9)
            strength = np.clip((m[mask] - local_threshold) / span, 0.0, 1.0)
        rgba = colormaps[name](start + strength * (end - start))
        colors[mask] = np.round(np.asarray(rgba)[:, :3] * 255).astype(np.uint8)

    return colors


def deviation_mesh(deviation_map: DeviationMap,
                   global_tolerance: float,
                   local_threshold: float) -> TriangleMesh:
    return deviation_map.mesh.with_channels(deviation_map.deviation,
                                            deviation_colors(deviation_map, global_tolerance, local_threshold))


def class_meshes(deviation_map: DeviationMap,
                 global_tolerance: float,
                 local_threshold: float) -> Dict[str, TriangleMesh]:
    """
    The colored deviation mesh split per defect class; classes without a whole triangle are left out.
    """
    colored = deviation_mesh(deviation_map, global_tolerance, local_threshold)
    meshes = {}
    for defect_class in Constants.DEFECT_CLASSES:
        part, _ = submesh(colored, deviation_map.mask(defect_class))
        if not part.is_empty:
            meshes[defect_class] = part
    return meshes


def edge_center_heights(mesh: TriangleMesh,
                        footprint: Aabb,
                        band: float = 3.0) -> Dict[str, Optional[float]]:
    """
    Compare the reconstructed height at the rim of a part with its interior: the mean height of upward-facing
    vertices within ``band`` of the footprint's XY edge, and of those further in.

    :param mesh: The reconstructed surface.
    :param footprint: The part's XY extent (z ignored).
    :param band: The width of the rim, in mm.
    :return: ``edge_height_mm``, ``center_height_mm`` and their ratio, ``None`` where a zone has no vertices.
    """
    if mesh.is_empty:
        return {"edge_height_mm": None, "center_height_mm": None, "edge_center_ratio": None}

    x, y, z = mesh.vertices.T
    upward = mesh.vertex_normals()[:, 2] > 0.5
    inside = ((x >= footprint.min[0]) & (x <= footprint.max[0]) & (y >= footprint.min[1]) & (y <= footprint.max[1]))
    inset = np.minimum.reduce([x - footprint.min[0], footprint.max[0] - x, y - footprint.min[1], footprint.max[1] - y])
    edge = upward & inside & (inset < band)
    center = upward & inside & (inset >= band)

    edge_height = round(float(z[edge].mean()), 6) if np.any(edge) else None
    center_height = round(float(z[center].mean()), 6) if np.any(center) else None
    ratio = round(edge_height / center_height, 6) if edge_height is not None and center_height else None

    return {"edge_height_mm": edge_height, "center_height_mm": center_height, "edge_center_ratio": ratio}
