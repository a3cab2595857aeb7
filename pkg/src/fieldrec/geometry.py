"""Point-cloud and mesh containers, spatial indexing, normalization, sampling.

All geometry is stored as float64 numpy arrays. Containers validate their
invariants at construction and are immutable by convention afterwards;
`SpatialIndex` and `TriangleMesh` are safe for concurrent reads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ArgumentError, DegenerateMeshError, EmptyInputError, ScaleZeroError


class PointCloud:
    """An unordered set of 3D points (may be empty; loaders reject empty files)."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ArgumentError("point cloud contains non-finite coordinates")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]

    def bounds(self):
        return self.points.min(axis=0), self.points.max(axis=0)

    def bbox_diagonal(self):
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))


class OrientedPointCloud(PointCloud):
    """Points with one unit normal per point."""

    def __init__(self, points, normals):
        super().__init__(points)
        nrm = np.asarray(normals, dtype=np.float64)
        if nrm.shape != self.points.shape:
            raise ArgumentError(
                f"normals shape {nrm.shape} does not match points {self.points.shape}")
        lengths = np.linalg.norm(nrm, axis=1)
        if not np.all(np.abs(lengths - 1.0) <= 1e-6):
            worst = float(np.abs(lengths - 1.0).max())
            raise ArgumentError(f"normals are not unit length (worst deviation {worst:.2e})")
        self.normals = nrm


class TriangleMesh:
    """Indexed triangle mesh with per-face normals/centroids on demand."""

    def __init__(self, vertices, faces):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and len(self.vertices) == 0:
            raise ArgumentError("mesh has faces but no vertices")
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ArgumentError("face indices out of range")
        self._face_normals = None
        self._face_centroids = None
        self._face_areas = None

    def __len__(self):
        return len(self.faces)

    @property
    def is_empty(self):
        return len(self.faces) == 0 or len(self.vertices) == 0

    def _area_vectors(self):
        v = self.vertices
        f = self.faces
        return 0.5 * np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])

    def face_areas(self):
        if self._face_areas is None:
            self._face_areas = np.linalg.norm(self._area_vectors(), axis=1)
        return self._face_areas

    def face_normals(self):
        """Unit per-face normals; degenerate (zero-area) faces get zero rows."""
        if self._face_normals is None:
            av = self._area_vectors()
            area = np.linalg.norm(av, axis=1, keepdims=True)
            self._face_normals = np.divide(
                av, area, out=np.zeros_like(av), where=area > 1e-300)
        return self._face_normals

    def face_centroids(self):
        if self._face_centroids is None:
            v, f = self.vertices, self.faces
            self._face_centroids = (v[f[:, 0]] + v[f[:, 1]] + v[f[:, 2]]) / 3.0
        return self._face_centroids

    def euler_characteristic(self):
        edges = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]],
                                self.faces[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        n_edges = len(np.unique(edges, axis=0))
        return len(self.vertices) - n_edges + len(self.faces)


def empty_mesh():
    return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


class SpatialIndex:
    """Immutable nearest-neighbor index over a point snapshot (kd-tree backed)."""

    def __init__(self, points):
        pts = points.points if isinstance(points, PointCloud) else np.asarray(points, np.float64)
        if len(pts) == 0:
            raise EmptyInputError("cannot index an empty point set")
        self.points = np.ascontiguousarray(pts)
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def knn(self, query, k):
        """The k nearest points, ties broken by insertion index.

        Returns (indices, distances) with distances sorted ascending.
        """
        n = len(self.points)
        if not 0 < k <= n:
            raise ArgumentError(f"k={k} out of range for a set of {n} points")
        query = np.asarray(query, dtype=np.float64)
        d, _ = self._tree.query(query, k=k)
        dmax = float(np.atleast_1d(d)[-1])
        cand = self._tree.query_ball_point(query, dmax * (1.0 + 1e-12) + 1e-300)
        cand = np.sort(np.asarray(cand, dtype=np.int64))
        dist = np.linalg.norm(self.points[cand] - query, axis=1)
        order = np.lexsort((cand, dist))[:k]
        return cand[order], dist[order]

    def nearest_distances(self, queries):
        """Distance from each query to its nearest indexed point (bulk, fast path)."""
        d, _ = self._tree.query(np.asarray(queries, dtype=np.float64), k=1)
        return np.atleast_1d(d)

    def nearest_indices(self, queries):
        d, i = self._tree.query(np.asarray(queries, dtype=np.float64), k=1)
        return np.atleast_1d(i), np.atleast_1d(d)

    def kth_distances(self, queries, k):
        """Distance to the k-th nearest neighbor for each query (bulk)."""
        if k > len(self.points):
            raise ArgumentError(f"k={k} exceeds set size {len(self.points)}")
        d, _ = self._tree.query(np.asarray(queries, dtype=np.float64), k=k)
        return d[..., -1] if k > 1 else np.atleast_1d(d)

    def knn_bulk(self, queries, k):
        """Indices and distances of the k nearest neighbors for many queries.

        Fast path without the stable tie guarantee of `knn`.
        """
        if k > len(self.points):
            raise ArgumentError(f"k={k} exceeds set size {len(self.points)}")
        d, i = self._tree.query(np.asarray(queries, dtype=np.float64), k=k)
        if k == 1:
            d, i = d[..., None], i[..., None]
        return i, d

    def within_radius(self, queries, radius):
        return self._tree.query_ball_point(np.asarray(queries, np.float64), radius)


@dataclass(frozen=True)
class NormalizationTransform:
    """Maps raw coordinates into the unit frame and back."""

    center: np.ndarray
    scale: float

    def apply(self, points):
        return (np.asarray(points, dtype=np.float64) - self.center) / self.scale

    def invert(self, points):
        return np.asarray(points, dtype=np.float64) * self.scale + self.center


def normalize_unit(cloud):
    """Center at the bounding-box center and scale the longest side to 1."""
    if len(cloud) == 0:
        raise EmptyInputError("cannot normalize an empty cloud")
    lo, hi = cloud.bounds()
    side = hi - lo
    scale = float(side.max())
    if scale <= 0.0:
        raise ScaleZeroError("all points coincide; cannot normalize")
    center = (lo + hi) / 2.0
    transform = NormalizationTransform(center=center, scale=scale)
    return PointCloud(transform.apply(cloud.points)), transform


def downsample(cloud, n, seed):
    """Seeded uniform subsample without replacement, preserving point order."""
    if n <= 0:
        raise ArgumentError("downsample count must be positive")
    if n >= len(cloud):
        return cloud
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5eed]))
    idx = np.sort(rng.choice(len(cloud), size=n, replace=False))
    return PointCloud(cloud.points[idx])


def sample_mesh_surface(mesh, n, seed):
    """Sample `n` points uniformly by area from the mesh surface."""
    if mesh.is_empty:
        raise DegenerateMeshError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = float(areas.sum())
    if total <= 0.0:
        raise DegenerateMeshError("mesh has zero total area")
    if n == 0:
        return PointCloud(np.zeros((0, 3)))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xface]))
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    r1 = rng.random(n)
    r2 = rng.random(n)
    u = np.sqrt(r1)
    a = mesh.vertices[mesh.faces[face_idx, 0]]
    b = mesh.vertices[mesh.faces[face_idx, 1]]
    c = mesh.vertices[mesh.faces[face_idx, 2]]
    pts = (1.0 - u)[:, None] * a + (u * (1.0 - r2))[:, None] * b + (u * r2)[:, None] * c
    return PointCloud(pts)


def knn(index, query, k):
    """Functional form of `SpatialIndex.knn`; returns [(point, distance)...]."""
    idx, dist = index.knn(query, k)
    return [(index.points[i], float(d)) for i, d in zip(idx, dist)]
