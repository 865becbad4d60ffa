__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import unittest

import numpy as np

from buildmonitor.fusion import SparseTsdfGrid
from buildmonitor.meshing import TriangleMesh, heightfield_mesh


def icosphere(level: int = 2,
              radius: float = 1.0,
              center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """
    A sphere from a subdivided icosahedron, wound with outward normals.
    """
    phi = (1.0 + 5.0 ** 0.5) / 2.0
    vertices = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
                (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
                (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    vertices = [np.array(v, dtype=float) / np.linalg.norm(v) for v in vertices]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]

    for _ in range(level):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = vertices[a] + vertices[b]
                vertices.append(m / np.linalg.norm(m))
                cache[key] = len(vertices) - 1
            return cache[key]

        subdivided = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            subdivided += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = subdivided

    return TriangleMesh(np.array(vertices) * radius + np.asarray(center, dtype=float), np.array(faces))


def plane_mesh(size: float = 20.0,
               n: int = 21,
               z: float = 0.0) -> TriangleMesh:
    """
    A flat square at height ``z``, centered on the origin, with upward normals.
    """
    xs = np.linspace(-size / 2.0, size / 2.0, n)
    return heightfield_mesh(np.full((n, n), z), xs, xs)


def sphere_grid(radius: float,
                voxel_size: float,
                center=(0.0, 0.0, 0.0)) -> SparseTsdfGrid:
    """
    A grid holding the exact truncated distance to a sphere, negative inside, in every voxel of the band.
    """
    grid = SparseTsdfGrid(voxel_size=voxel_size)
    delta = grid.truncation
    reach = int(np.ceil((radius + delta) / voxel_size)) + 1
    c = np.asarray(center, dtype=float)
    base = np.floor(c / voxel_size).astype(int)
    r = np.arange(-reach, reach + 1)
    keys = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3) + base
    distance = np.linalg.norm((keys + 0.5) * voxel_size - c, axis=1) - radius
    band = np.abs(distance) <= delta
    grid.assign(keys[band], distance[band], 1.0)
    return grid


class TestCase(unittest.TestCase):
    def assert_points_close(self, expected, actual, atol=1e-9):
        expected = np.asarray(expected, dtype=float)
        actual = np.asarray(actual, dtype=float)
        self.assertEqual(expected.shape, actual.shape)
        self.assertTrue(np.allclose(expected, actual, atol=atol),
                        f"Largest difference {np.max(np.abs(expected - actual))} exceeds {atol}")

    def assert_rigid(self, transform):
        rotation = transform.rotation
        self.assertTrue(np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-9))
        self.assertAlmostEqual(1.0, float(np.linalg.det(rotation)), places=9)

    def assert_watertight(self, mesh):
        _, counts = mesh.edges()
        self.assertTrue(np.all(counts == 2), f"{int(np.count_nonzero(counts != 2))} edges are not shared by two "
                                             "triangles")
