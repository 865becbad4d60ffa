__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import logging
import os
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from buildmonitor.exception import BuildMonitorIOError, BuildMonitorMeshError
from buildmonitor.fusion import GridView
from buildmonitor.mctable import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE

logger = logging.getLogger(__name__)

# Edge and corner keys are packed as 20 bits per axis plus a 2-bit tag (axis 0-2, or 3 for a grid corner)
_VERTEX_BITS = 20
_VERTEX_OFFSET = 1 << (_VERTEX_BITS - 1)
_CORNER_TAG = 3

_TRI_PADDED = np.full((256, 15), -1, dtype=np.int64)
for _case, _edges in enumerate(TRI_TABLE):
    _TRI_PADDED[_case, :len(_edges)] = _edges
_TRI_COUNT = np.array([len(edges) // 3 for edges in TRI_TABLE])

_CORNERS = np.array(CORNER_OFFSETS, dtype=np.int64)
_EDGE_A = np.array([a for a, _ in EDGE_CORNERS])
_EDGE_B = np.array([b for _, b in EDGE_CORNERS])
# Each edge runs along one axis from its lower corner
_EDGE_AXIS = np.argmax(np.abs(_CORNERS[_EDGE_B] - _CORNERS[_EDGE_A]), axis=1)
_EDGE_LOW = np.where((_CORNERS[_EDGE_B] - _CORNERS[_EDGE_A]).sum(axis=1) > 0, _EDGE_A, _EDGE_B)
_EDGE_HIGH = np.where(_EDGE_LOW == _EDGE_A, _EDGE_B, _EDGE_A)


class TriangleMesh:
    """
    An indexed triangle mesh, in mm, with an optional per-vertex scalar channel (a deviation) and per-vertex
    RGB colors. Triangles are wound so their right-hand normal points out of the material.
    """

    def __init__(self,
                 vertices: Any,
                 triangles: Any,
                 scalar: Optional[Any] = None,
                 colors: Optional[Any] = None) -> None:
        #: ``(N, 3)`` vertex positions.
        self.vertices: np.ndarray = np.asarray(vertices, dtype=float).reshape(-1, 3)
        #: ``(M, 3)`` vertex indices per triangle.
        self.triangles: np.ndarray = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        #: ``N`` per-vertex values, or ``None``.
        self.scalar: Optional[np.ndarray] = None if scalar is None else np.asarray(scalar, dtype=float)
        #: ``(N, 3)`` uint8 colors, or ``None``.
        self.colors: Optional[np.ndarray] = None if colors is None else np.asarray(colors, dtype=np.uint8)

        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise BuildMonitorMeshError("Triangle indices out of range.")
        if self.scalar is not None and len(self.scalar) != len(self.vertices):
            raise BuildMonitorMeshError("Scalar channel length does not match the vertex count.")
        if self.colors is not None and self.colors.shape != self.vertices.shape:
            raise BuildMonitorMeshError("Color channel shape does not match the vertices.")

    def __repr__(self) -> str:
        return f"<TriangleMesh: {len(self.vertices)} vertices, {len(self.triangles)} triangles>"

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def with_channels(self,
                      scalar: Optional[Any] = None,
                      colors: Optional[Any] = None) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.triangles, scalar, colors)

    def triangle_normals(self,
                         unit: bool = True) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        normals = np.cross(b - a, c - a)
        if not unit:
            return normals
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        return np.divide(normals, lengths, out=np.zeros_like(normals), where=lengths > 0)

    def triangle_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.triangle_normals(unit=False), axis=1)

    def surface_area(self) -> float:
        return float(self.triangle_areas().sum())

    def vertex_areas(self) -> np.ndarray:
        """
        A third of the area of each incident triangle, per vertex.
        """
        areas = np.repeat(self.triangle_areas() / 3.0, 3)
        return np.bincount(self.triangles.reshape(-1), weights=areas, minlength=len(self.vertices))

    def vertex_normals(self) -> np.ndarray:
        """
        Area-weighted unit vertex normals.
        """
        face = self.triangle_normals(unit=False)
        normals = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(normals, self.triangles[:, k], face)
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        return np.divide(normals, lengths, out=np.zeros_like(normals), where=lengths > 0)

    def edges(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        The unique undirected edges as ``(E, 2)`` sorted pairs, and how many triangles share each.
        """
        if self.is_empty:
            return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
        pairs = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(pairs, axis=0, return_counts=True)

    def boundary_vertices(self) -> np.ndarray:
        """
        A mask of vertices on an edge used by only one triangle.
        """
        edges, counts = self.edges()
        mask = np.zeros(len(self.vertices), dtype=bool)
        mask[edges[counts == 1].reshape(-1)] = True
        return mask

    def nonmanifold_vertices(self) -> np.ndarray:
        edges, counts = self.edges()
        mask = np.zeros(len(self.vertices), dtype=bool)
        mask[edges[counts > 2].reshape(-1)] = True
        return mask

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        if not len(self.vertices):
            raise BuildMonitorMeshError("An empty mesh has no bounds.")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def _pack_vertex_keys(keys: np.ndarray,
                      tags: np.ndarray) -> np.ndarray:
    shifted = keys.astype(np.int64) + _VERTEX_OFFSET
    packed = (shifted[:, 0] << (2 * _VERTEX_BITS)) | (shifted[:, 1] << _VERTEX_BITS) | shifted[:, 2]
    return (packed << 2) | tags


def marching_cubes(view: GridView,
                   iso: float = 0.0) -> TriangleMesh:
    """
    Extract the ``D = iso`` surface of a grid view. Cubes join neighboring voxel centers; only cubes whose 8
    corners are all observed emit triangles. Vertices shared by neighboring cubes are welded, so the output is
    watertight wherever the observed region is.

    :param view: The grid to extract from.
    :param iso: The iso value, in mm.
    :return: The mesh, empty when the field has no crossing.
    """
    origins, _, _ = view.observed()
    if not len(origins):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3)))

    values = np.empty((len(origins), 8))
    observed = np.ones(len(origins), dtype=bool)
    for c, offset in enumerate(_CORNERS):
        D, W = view.lookup(origins + offset)
        values[:, c] = D
        observed &= W > 0

    cases = (values < iso).astype(np.int64) @ (1 << np.arange(8))
    emit = observed & (_TRI_COUNT[cases] > 0)
    origins, values, cases = origins[emit], values[emit], cases[emit]
    if not len(origins):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3)))

    vertex_keys, positions = [], []
    triangle_keys = []
    for slot in range(5):
        has = _TRI_COUNT[cases] > slot
        if not np.any(has):
            break
        corner_keys = []
        for column in range(3):
            edges = _TRI_PADDED[cases[has], 3 * slot + column]
            key, position = _edge_vertices(origins[has], values[has], edges, iso, view.voxel_size)
            corner_keys.append(key)
            vertex_keys.append(key)
            positions.append(position)
        triangle_keys.append(np.column_stack(corner_keys))

    keys = np.concatenate(vertex_keys)
    unique, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    vertices = np.concatenate(positions)[first]
    triangles = np.concatenate(triangle_keys)
    triangles = np.searchsorted(unique, triangles)
    # The table winds normals in to the material
    triangles = triangles[:, [0, 2, 1]]

    return _compact(vertices, triangles)


def _edge_vertices(origins: np.ndarray,
                   values: np.ndarray,
                   edges: np.ndarray,
                   iso: float,
                   voxel_size: float) -> Tuple[np.ndarray, np.ndarray]:
    low = _EDGE_LOW[edges]
    high = _EDGE_HIGH[edges]
    rows = np.arange(len(origins))
    v0 = values[rows, low]
    v1 = values[rows, high]
    t = np.clip((iso - v0) / (v1 - v0), 0.0, 1.0)

    low_key = origins + _CORNERS[low]
    high_key = origins + _CORNERS[high]
    position = (low_key + 0.5 + t[:, None] * (high_key - low_key)) * voxel_size

    # A crossing exactly at a corner is that corner, whichever edge found it
    keys = np.where(t <= 0.0, _pack_vertex_keys(low_key, np.full(len(t), _CORNER_TAG)),
                    np.where(t >= 1.0, _pack_vertex_keys(high_key, np.full(len(t), _CORNER_TAG)),
                             _pack_vertex_keys(low_key, _EDGE_AXIS[edges])))
    return keys, position


def _compact(vertices: np.ndarray,
             triangles: np.ndarray,
             scalar: Optional[np.ndarray] = None,
             colors: Optional[np.ndarray] = None) -> TriangleMesh:
    collapsed = ((triangles[:, 0] == triangles[:, 1]) | (triangles[:, 1] == triangles[:, 2]) |
                 (triangles[:, 2] == triangles[:, 0]))
    triangles = triangles[~collapsed]
    if len(triangles):
        a, b, c = (vertices[triangles[:, k]] for k in range(3))
        triangles = triangles[np.linalg.norm(np.cross(b - a, c - a), axis=1) > 1e-12]

    used = np.unique(triangles.reshape(-1))
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))

    return TriangleMesh(vertices[used], remap[triangles],
                        None if scalar is None else scalar[used],
                        None if colors is None else colors[used])


def submesh(mesh: TriangleMesh,
            vertex_mask: Any) -> Tuple[TriangleMesh, np.ndarray]:
    """
    The triangles whose three vertices are all selected, with unused vertices dropped.

    :param mesh: The source mesh.
    :param vertex_mask: ``N`` booleans.
    :return: The submesh, and for each of its vertices the index in ``mesh``.
    """
    mask = np.asarray(vertex_mask, dtype=bool)
    keep = mask[mesh.triangles].all(axis=1)
    triangles = mesh.triangles[keep]
    used = np.unique(triangles.reshape(-1))
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))

    sub = TriangleMesh(mesh.vertices[used], remap[triangles],
                       None if mesh.scalar is None else mesh.scalar[used],
                       None if mesh.colors is None else mesh.colors[used])
    return sub, used


def crop_xy(mesh: TriangleMesh,
            lower: Any,
            upper: Any) -> TriangleMesh:
    """
    The part of ``mesh`` whose triangles lie entirely within the XY rectangle ``[lower, upper]``.
    """
    lo = np.asarray(lower, dtype=float)[:2]
    hi = np.asarray(upper, dtype=float)[:2]
    xy = mesh.vertices[:, :2]
    cropped, _ = submesh(mesh, np.all((xy >= lo) & (xy <= hi), axis=1))
    return cropped


def heightfield_mesh(heights: Any,
                     xs: Any,
                     ys: Any) -> TriangleMesh:
    """
    Triangulate a height grid: one vertex per node, two upward-facing triangles per cell.

    :param heights: ``(nx, ny)`` heights, indexed ``[i (x), j (y)]``.
    :param xs: ``nx`` node x coordinates.
    :param ys: ``ny`` node y coordinates.
    :return: The mesh.
    """
    heights = np.asarray(heights, dtype=float)
    nx, ny = heights.shape
    xx, yy = np.meshgrid(np.asarray(xs, dtype=float), np.asarray(ys, dtype=float), indexing="ij")
    vertices = np.column_stack([xx.reshape(-1), yy.reshape(-1), heights.reshape(-1)])

    i, j = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
    v00 = (i * ny + j).reshape(-1)
    v10 = v00 + ny
    v11 = v10 + 1
    v01 = v00 + 1
    triangles = np.concatenate([np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])])

    return TriangleMesh(vertices, triangles)


def connected_components(mesh: TriangleMesh,
                         vertex_flags: Any) -> List[np.ndarray]:
    """
    Group vertices in to maximal sets joined by mesh edges whose two ends carry the same label.

    :param mesh: The mesh.
    :param vertex_flags: One hashable label per vertex.
    :return: Sorted vertex index arrays, ordered by their smallest index.
    """
    labels = np.asarray(vertex_flags)
    n = len(mesh.vertices)
    if len(labels) != n:
        raise BuildMonitorMeshError(f"Expected {n} labels, got {len(labels)}.")
    if n == 0:
        return []

    edges, _ = mesh.edges()
    like = edges[labels[edges[:, 0]] == labels[edges[:, 1]]] if len(edges) else np.zeros((0, 2), dtype=int)
    adjacency = sparse.coo_matrix((np.ones(len(like)), (like[:, 0], like[:, 1])), shape=(n, n))
    _, component = csgraph.connected_components(adjacency, directed=False)

    order = np.argsort(component, kind="stable")
    splits = np.nonzero(np.diff(component[order]))[0] + 1
    groups = [np.sort(group) for group in np.split(order, splits)]
    groups.sort(key=lambda group: int(group[0]))

    return groups


def _cotangents(a: np.ndarray,
                b: np.ndarray,
                c: np.ndarray) -> np.ndarray:
    # Cotangent of the angle at ``a`` in triangle ``abc``
    u = b - a
    v = c - a
    cross = np.linalg.norm(np.cross(u, v), axis=1)
    dot = np.einsum("ij,ij->i", u, v)
    return np.divide(dot, cross, out=np.zeros_like(dot), where=cross > 0)


def mean_curvature(mesh: TriangleMesh) -> Tuple[np.ndarray, np.ndarray]:
    """
    Discrete mean curvature per vertex from the cotangent Laplacian and the mixed (Voronoi, or obtuse-safe)
    vertex area: ``|Σ (cot α + cot β)(x_i - x_j)| / (4 A_mixed)``, positive where the surface bulges along its
    normal. Boundary and non-manifold vertices get 0 and are flagged.

    :param mesh: The mesh.
    :return: Curvature in 1/mm, and a mask of flagged vertices.
    """
    n = len(mesh.vertices)
    flags = mesh.boundary_vertices() | mesh.nonmanifold_vertices()
    if mesh.is_empty:
        return np.zeros(n), np.ones(n, dtype=bool)

    tri = mesh.triangles
    p = [mesh.vertices[tri[:, k]] for k in range(3)]
    cot = np.column_stack([_cotangents(p[0], p[1], p[2]),
                           _cotangents(p[1], p[2], p[0]),
                           _cotangents(p[2], p[0], p[1])])

    # The angle at corner k weighs the opposite edge
    rows = np.concatenate([tri[:, 1], tri[:, 2], tri[:, 0]])
    cols = np.concatenate([tri[:, 2], tri[:, 0], tri[:, 1]])
    weights = np.concatenate([cot[:, 0], cot[:, 1], cot[:, 2]])
    W = sparse.coo_matrix((weights, (rows, cols)), shape=(n, n)).tocsr()
    W = W + W.T
    laplacian = sparse.diags(np.asarray(W.sum(axis=1)).reshape(-1)) - W
    curvature_normal = laplacian @ mesh.vertices

    mixed = _mixed_areas(mesh, p, cot)
    magnitude = np.linalg.norm(curvature_normal, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        H = np.where(mixed > 0, magnitude / (4.0 * mixed), 0.0)
    sign = np.sign(np.einsum("ij,ij->i", curvature_normal, mesh.vertex_normals()))
    H = H * np.where(sign == 0, 1.0, sign)

    flags |= mixed <= 0
    H[flags] = 0.0

    return H, flags


def _mixed_areas(mesh: TriangleMesh,
                 p: List[np.ndarray],
                 cot: np.ndarray) -> np.ndarray:
    tri = mesh.triangles
    area = mesh.triangle_areas()
    sq = [np.einsum("ij,ij->i", p[(k + 2) % 3] - p[(k + 1) % 3], p[(k + 2) % 3] - p[(k + 1) % 3]) for k in range(3)]
    # sq[k] is the squared length of the edge opposite corner k

    obtuse = cot < 0
    any_obtuse = obtuse.any(axis=1)
    mixed = np.zeros(len(mesh.vertices))
    for k in range(3):
        j, m = (k + 1) % 3, (k + 2) % 3
        voronoi = (sq[m] * cot[:, m] + sq[j] * cot[:, j]) / 8.0
        share = np.where(~any_obtuse, voronoi, np.where(obtuse[:, k], area / 2.0, area / 4.0))
        np.add.at(mixed, tri[:, k], share)

    return mixed


class MeshDistance:
    """
    Exact signed distance queries against one mesh. Triangle centroids are indexed in a k-d tree; each query finds
    the nearest centroid's triangle distance ``d0`` and then checks exactly every triangle whose centroid lies
    within ``d0`` plus the largest centroid-to-vertex radius, so the result always equals an all-triangle scan. The
    sign comes from the angle-weighted pseudonormal of the closest feature (face, edge or vertex).
    """

    def __init__(self,
                 mesh: TriangleMesh) -> None:
        if mesh.is_empty:
            raise BuildMonitorMeshError("Cannot query distances against an empty mesh.")

        self.mesh: TriangleMesh = mesh
        tri = mesh.triangles
        self._a, self._b, self._c = (mesh.vertices[tri[:, k]] for k in range(3))
        centroids = (self._a + self._b + self._c) / 3.0
        self._tree = cKDTree(centroids)
        self._radius = float(max(np.linalg.norm(corner - centroids, axis=1).max()
                                 for corner in (self._a, self._b, self._c)))

        self._face_normals = mesh.triangle_normals()
        self._vertex_normals = self._angle_weighted_normals()
        self._edge_normals, self._triangle_edges = self._edge_pseudonormals()

    def __repr__(self) -> str:
        return f"<MeshDistance: {len(self.mesh.triangles)} triangles>"

    def _angle_weighted_normals(self) -> np.ndarray:
        normals = np.zeros_like(self.mesh.vertices)
        corners = (self._a, self._b, self._c)
        for k in range(3):
            u = corners[(k + 1) % 3] - corners[k]
            v = corners[(k + 2) % 3] - corners[k]
            cos = np.einsum("ij,ij->i", u, v) / np.maximum(np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1),
                                                          1e-300)
            angle = np.arccos(np.clip(cos, -1.0, 1.0))
            np.add.at(normals, self.mesh.triangles[:, k], angle[:, None] * self._face_normals)
        return normals

    def _edge_pseudonormals(self) -> Tuple[np.ndarray, np.ndarray]:
        tri = self.mesh.triangles
        # Edges ab, bc, ca of every triangle
        pairs = np.sort(np.stack([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]], axis=1), axis=2)
        unique, inverse = np.unique(pairs.reshape(-1, 2), axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        normals = np.zeros((len(unique), 3))
        np.add.at(normals, inverse, np.repeat(self._face_normals, 3, axis=0))
        return normals, inverse.reshape(-1, 3)

    def _closest(self,
                 queries: np.ndarray,
                 candidates: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        points, features = closest_points_on_triangles(queries, self._a[candidates], self._b[candidates],
                                                       self._c[candidates])
        return points, features, np.linalg.norm(queries - points, axis=1)

    def _sign(self,
              queries: np.ndarray,
              triangles: np.ndarray,
              points: np.ndarray,
              features: np.ndarray) -> np.ndarray:
        pseudo = np.empty((len(triangles), 3))
        is_vertex = features < 3
        is_edge = (features >= 3) & (features < 6)
        is_face = features == 6
        pseudo[is_vertex] = self._vertex_normals[self.mesh.triangles[triangles[is_vertex], features[is_vertex]]]
        pseudo[is_edge] = self._edge_normals[self._triangle_edges[triangles[is_edge], features[is_edge] - 3]]
        pseudo[is_face] = self._face_normals[triangles[is_face]]
        side = np.einsum("ij,ij->i", queries - points, pseudo)
        return np.where(side < 0, -1.0, 1.0)

    def query(self,
              points: Any) -> np.ndarray:
        """
        Signed distances, negative inside the material.
        """
        queries = np.asarray(points, dtype=float).reshape(-1, 3)
        if not len(queries):
            return np.zeros(0)
        if not np.all(np.isfinite(queries)):
            raise BuildMonitorMeshError("Distance queries must be finite.")

        _, nearest = self._tree.query(queries)
        _, _, d0 = self._closest(queries, nearest)
        balls = self._tree.query_ball_point(queries, d0 + self._radius + 1e-9)

        counts = np.array([len(ball) for ball in balls])
        query_index = np.repeat(np.arange(len(queries)), counts)
        candidates = np.concatenate([np.asarray(ball, dtype=np.int64) for ball in balls])
        return self._reduce(queries, query_index, candidates)

    def brute_force(self,
                    points: Any,
                    chunk: int = 128) -> np.ndarray:
        """
        The same query by scanning every triangle.
        """
        queries = np.asarray(points, dtype=float).reshape(-1, 3)
        n_tri = len(self.mesh.triangles)
        results = []
        for start in range(0, len(queries), chunk):
            block = queries[start:start + chunk]
            query_index = np.repeat(np.arange(len(block)), n_tri)
            candidates = np.tile(np.arange(n_tri), len(block))
            results.append(self._reduce(block, query_index, candidates))
        return np.concatenate(results) if results else np.zeros(0)

    def _reduce(self,
                queries: np.ndarray,
                query_index: np.ndarray,
                candidates: np.ndarray) -> np.ndarray:
        points, features, distances = self._closest(queries[query_index], candidates)
        # Nearest candidate per query; ties go to the lowest triangle index
        order = np.lexsort((candidates, distances, query_index))
        first = np.ones(len(order), dtype=bool)
        first[1:] = query_index[order][1:] != query_index[order][:-1]
        best = order[first]

        sign = self._sign(queries[query_index[best]], candidates[best], points[best], features[best])
        result = np.empty(len(queries))
        result[query_index[best]] = sign * distances[best]
        return result


def closest_points_on_triangles(p: np.ndarray,
                                a: np.ndarray,
                                b: np.ndarray,
                                c: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Closest point on each triangle ``abc`` to each point ``p`` (row-wise), by Voronoi-region tests.

    :return: The closest points, and the feature they lie on: 0-2 vertex a/b/c, 3-5 edge ab/bc/ca, 6 face.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)

    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)

    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    result = np.empty_like(p)
    feature = np.full(len(p), -1, dtype=np.int64)
    todo = np.ones(len(p), dtype=bool)

    def assign(mask: np.ndarray, points: np.ndarray, code: int) -> None:
        chosen = todo & mask
        result[chosen] = points[chosen]
        feature[chosen] = code
        todo[chosen] = False

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), a, 0)
        assign((d3 >= 0) & (d4 <= d3), b, 1)

        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab, 3)

        assign((d6 >= 0) & (d5 <= d6), c, 2)

        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac, 5)

        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b), 4)

        denominator = va + vb + vc
        v = vb / denominator
        w = vc / denominator
        assign(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac, 6)

    return result, feature


def signed_distance_to_mesh(query: Any,
                            mesh: TriangleMesh,
                            accelerator: Optional[MeshDistance] = None) -> Any:
    """
    Signed distance from point(s) to ``mesh``, negative inside the material.

    :param query: One point or ``(N, 3)`` points.
    :param mesh: A non-empty, consistently wound mesh.
    :param accelerator: A prebuilt :class:`MeshDistance` for ``mesh``, to reuse across calls.
    :return: A float for one point, otherwise an array.
    """
    accelerator = accelerator or MeshDistance(mesh)
    array = np.asarray(query, dtype=float)
    distances = accelerator.query(array)
    return float(distances[0]) if array.ndim == 1 else distances


def write_ply(path: str,
              mesh: TriangleMesh) -> str:
    """
    Write an ASCII PLY with optional ``scalar_deviation`` and ``red``/``green``/``blue`` vertex properties.
    """
    header = ["ply", "format ascii 1.0", "comment units mm", f"element vertex {len(mesh.vertices)}",
              "property float x", "property float y", "property float z"]
    if mesh.scalar is not None:
        header.append("property float scalar_deviation")
    if mesh.colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {len(mesh.triangles)}", "property list uchar int vertex_indices", "end_header"]

    try:
        with open(path, "w", encoding="ascii", newline="\n") as f:
            f.write("\n".join(header))
            f.write("\n")
            for i, vertex in enumerate(mesh.vertices):
                fields = [f"{v:.6f}" for v in vertex]
                if mesh.scalar is not None:
                    fields.append(f"{mesh.scalar[i]:.6f}")
                if mesh.colors is not None:
                    fields += [str(int(v)) for v in mesh.colors[i]]
                f.write(" ".join(fields))
                f.write("\n")
            for a, b, c in mesh.triangles:
                f.write(f"3 {a} {b} {c}\n")
    except OSError as e:
        raise BuildMonitorIOError(f"Could not write mesh {path}: {e}") from e

    return path


def read_ply(path: str) -> TriangleMesh:
    """
    Read an ASCII PLY triangle mesh, keeping ``scalar_deviation`` and vertex colors if present.
    """
    if not os.path.exists(path):
        raise BuildMonitorIOError(f"Mesh file not found: {path}")

    try:
        with open(path, "r", encoding="ascii", errors="replace") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise BuildMonitorIOError(f"Could not read mesh {path}: {e}") from e

    if not lines or lines[0].strip() != "ply":
        raise BuildMonitorMeshError(f"{path} is not a PLY file.")

    counts: Dict[str, int] = {}
    properties: List[str] = []
    element = None
    body_start = None
    for index, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise BuildMonitorMeshError(f"{path} is not ASCII PLY (got \"{parts[1]}\").")
        elif parts[0] == "element":
            element = parts[1]
            counts[element] = int(parts[2])
        elif parts[0] == "property" and element == "vertex":
            properties.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = index + 1
            break
    if body_start is None or "vertex" not in counts:
        raise BuildMonitorMeshError(f"{path} has a malformed PLY header.")

    n_vertices = counts["vertex"]
    n_faces = counts.get("face", 0)
    try:
        vertex_rows = np.array([lines[body_start + i].split() for i in range(n_vertices)], dtype=float)
        vertex_rows = vertex_rows.reshape(n_vertices, len(properties))
        triangles = []
        for i in range(n_faces):
            parts = [int(v) for v in lines[body_start + n_vertices + i].split()]
            if parts[0] < 3:
                continue
            # Fan-triangulate polygons
            for k in range(2, parts[0]):
                triangles.append((parts[1], parts[k], parts[k + 1]))
    except (IndexError, ValueError) as e:
        raise BuildMonitorMeshError(f"{path} has malformed PLY content: {e}") from e

    column = {name: i for i, name in enumerate(properties)}
    if not all(axis in column for axis in ("x", "y", "z")):
        raise BuildMonitorMeshError(f"{path} has no x/y/z vertex properties.")

    vertices = vertex_rows[:, [column["x"], column["y"], column["z"]]]
    scalar = vertex_rows[:, column["scalar_deviation"]] if "scalar_deviation" in column else None
    colors = vertex_rows[:, [column["red"], column["green"], column["blue"]]] \
        if all(c in column for c in ("red", "green", "blue")) else None

    return TriangleMesh(vertices, np.array(triangles, dtype=np.int64).reshape(-1, 3), scalar, colors)
