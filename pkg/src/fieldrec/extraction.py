"""Isosurface extraction and the field-guided cloud enhancement stages.

Marching cubes is delegated to scikit-image and wrapped with this library's
contract: empty mesh (not an error) when the level set is absent, vertex
welding at 1e-9, removal of sub-1e-14-area faces, and face orientation fixed
by the sign of the sampled field gradient at face centroids. Inpainting keeps
level-set samples at least three standard deviations away from the input
cloud; normals come from the normalized field gradient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage import measure

from .errors import (ArgumentError, ContractError, EmptyLevelSetError, QualityError)
from .field import GRAD_EPS, eval_field, gradient_np
from .geometry import (OrientedPointCloud, PointCloud, SpatialIndex, TriangleMesh,
                       empty_mesh, sample_mesh_surface)

WELD_EPS = 1e-9
DEGENERATE_AREA = 1e-14


@dataclass(frozen=True)
class GridSpec:
    """A regular evaluation lattice: per-axis resolution and bounds."""

    resolution: tuple
    lo: tuple
    hi: tuple
    iso: float = 0.0

    def __post_init__(self):
        if min(self.resolution) < 8:
            raise ArgumentError("grid resolution must be at least 8 per axis")
        if not all(h > l for l, h in zip(self.lo, self.hi)):
            raise ArgumentError("grid bounds are empty or inverted")

    @staticmethod
    def cube(resolution, half_extent=0.55, iso=0.0):
        """Symmetric cube around the origin (unit frame plus margin by default)."""
        r = (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution)
        return GridSpec(resolution=r, lo=(-half_extent,) * 3,
                        hi=(half_extent,) * 3, iso=iso)

    @staticmethod
    def for_cloud(points, resolution, margin=0.05, iso=0.0):
        """Bounds covering `points` with a relative margin of the largest side."""
        pts = points.points if isinstance(points, PointCloud) else np.asarray(points)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        pad = margin * float((hi - lo).max())
        r = (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution)
        return GridSpec(resolution=r, lo=tuple(lo - pad), hi=tuple(hi + pad), iso=iso)

    def axes(self):
        return tuple(np.linspace(self.lo[i], self.hi[i], self.resolution[i])
                     for i in range(3))

    def cell_sizes(self):
        return tuple((self.hi[i] - self.lo[i]) / (self.resolution[i] - 1)
                     for i in range(3))

    def max_cell(self):
        return max(self.cell_sizes())

    def nodes(self):
        """All grid node coordinates, shape (nx*ny*nz, 3), x fastest in axis 0."""
        xs, ys, zs = self.axes()
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def contains(self, points):
        pts = np.asarray(points)
        return np.all((pts >= np.asarray(self.lo)) & (pts <= np.asarray(self.hi)))


def evaluate_on_grid(field, grid, batch=8192):
    """Sample the field on all grid nodes; returns (nx, ny, nz) values."""
    values = eval_field(field, grid.nodes(), batch=batch)
    return values.reshape(grid.resolution)


def _weld_and_clean(vertices, faces):
    """Merge vertices within WELD_EPS and drop degenerate faces."""
    if len(vertices) == 0 or len(faces) == 0:
        return empty_mesh()
    keys = np.round(vertices / WELD_EPS).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    welded = vertices[first]
    faces = inverse[faces]
    # drop faces with repeated vertices or vanishing area
    distinct = ((faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2])
                & (faces[:, 0] != faces[:, 2]))
    faces = faces[distinct]
    if len(faces) == 0:
        return empty_mesh()
    a = welded[faces[:, 1]] - welded[faces[:, 0]]
    b = welded[faces[:, 2]] - welded[faces[:, 0]]
    areas = 0.5 * np.linalg.norm(np.cross(a, b), axis=1)
    mesh = TriangleMesh(welded, faces[areas >= DEGENERATE_AREA])
    return mesh if len(mesh.faces) else empty_mesh()


def _orient_by_gradient(mesh, values, grid):
    """Flip faces whose normal opposes the sampled field gradient."""
    if mesh.is_empty:
        return mesh
    spacing = grid.cell_sizes()
    gx, gy, gz = np.gradient(values, *spacing)
    centroids = mesh.face_centroids()
    # trilinear interpolation of the gradient at the centroids
    rel = (centroids - np.asarray(grid.lo)) / np.asarray(spacing)
    rel = np.clip(rel, 0, np.asarray(grid.resolution) - 1 - 1e-9)
    i0 = np.floor(rel).astype(np.int64)
    frac = rel - i0
    grad = np.zeros_like(centroids)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                wgt = (np.where(dx, frac[:, 0], 1 - frac[:, 0])
                       * np.where(dy, frac[:, 1], 1 - frac[:, 1])
                       * np.where(dz, frac[:, 2], 1 - frac[:, 2]))
                ii = (np.minimum(i0[:, 0] + dx, grid.resolution[0] - 1),
                      np.minimum(i0[:, 1] + dy, grid.resolution[1] - 1),
                      np.minimum(i0[:, 2] + dz, grid.resolution[2] - 1))
                grad += wgt[:, None] * np.stack([gx[ii], gy[ii], gz[ii]], axis=1)
    flip = (mesh.face_normals() * grad).sum(axis=1) < 0.0
    faces = mesh.faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return TriangleMesh(mesh.vertices, faces)


def marching_cubes(values, grid, mask=None):
    """Triangulate the iso-crossings of values sampled on `grid`.

    No sign change (or an empty mask) yields an empty mesh. Faces are wound
    so normals point along the field gradient (outward for SDF conventions).
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape != tuple(grid.resolution):
        raise ArgumentError(f"values shape {values.shape} != grid {grid.resolution}")
    if mask is None:
        volume, gate = values, None
        checked = values
    else:
        if not mask.any():
            return empty_mesh()
        checked = values[mask]
        # unset nodes get a finite "far" sentinel so the volume stays finite;
        # the gating mask is eroded so every triangulated cell reads only
        # genuinely evaluated corners (the backend gates cells by a corner
        # subset and would otherwise interpolate against the sentinel)
        volume = np.where(mask, values, grid.iso + 1.0)
        gate = ndimage.binary_erosion(mask, structure=np.ones((3, 3, 3), bool),
                                      border_value=1)
        if not gate.any():
            return empty_mesh()
    if not np.all(np.isfinite(checked)):
        raise ContractError("field values must be finite on evaluated grid nodes")
    if checked.min() > grid.iso or checked.max() < grid.iso:
        return empty_mesh()
    try:
        verts, faces, _, _ = measure.marching_cubes(
            volume, level=grid.iso, spacing=grid.cell_sizes(), mask=gate)
    except (ValueError, RuntimeError):
        return empty_mesh()
    verts = verts + np.asarray(grid.lo)
    mesh = _weld_and_clean(verts, faces)
    return _orient_by_gradient(mesh, volume, grid)


def extract_level_set(field, grid, batch=8192):
    """Evaluate the field on the grid and run marching cubes."""
    return marching_cubes(evaluate_on_grid(field, grid, batch=batch), grid)


def sample_level_set(field, grid, n, seed=0):
    """Area-uniform samples of the extracted zero level set."""
    mesh = extract_level_set(field, grid)
    if mesh.is_empty:
        raise EmptyLevelSetError("the field has no zero crossing on the grid")
    return sample_mesh_surface(mesh, n, seed=seed), mesh


@dataclass
class FillReport:
    """Outcome of the far-point inpainting rule."""

    sigma_d: float
    distances: np.ndarray     # nearest-distance of every level-set sample to P
    kept: np.ndarray          # boolean mask over the level-set samples
    fill_points: np.ndarray   # the kept samples
    merged: PointCloud        # P' = P u P_fill

    def summary(self):
        return {"sigma_d": self.sigma_d,
                "level_set_samples": int(len(self.distances)),
                "fill_points": int(self.kept.sum()),
                "merged_points": int(len(self.merged))}

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write("index,distance,kept\n")
            for i, (d, k) in enumerate(zip(self.distances, self.kept)):
                f.write(f"{i},{d:.17g},{int(k)}\n")

    def write_summary(self, path):
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)
            f.write("\n")


def inpaint(cloud, level_samples):
    """Keep level-set samples at least 3 sigma_d from the input cloud.

    sigma_d is the population standard deviation of the one-sided nearest
    distances. A zero sigma_d (level set collapsed onto the data) keeps
    nothing: there is no sparse region to fill.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    samples = (level_samples.points if isinstance(level_samples, PointCloud)
               else np.asarray(level_samples))
    if len(pts) == 0 or len(samples) == 0:
        raise ArgumentError("inpainting needs nonempty clouds")
    d = SpatialIndex(pts).nearest_distances(samples)
    sigma = float(d.std())
    if sigma > 0.0:
        kept = d >= 3.0 * sigma
    else:
        kept = np.zeros(len(samples), dtype=bool)
    fill = samples[kept]
    merged = PointCloud(np.concatenate([pts, fill], axis=0))
    return FillReport(sigma_d=sigma, distances=d, kept=kept,
                      fill_points=fill, merged=merged)


def assign_normals(cloud, field, max_degenerate_frac=0.01, batch=8192):
    """Per-point unit normals from the field gradient.

    Points with vanishing gradients are dropped (counted); more than
    `max_degenerate_frac` of them is a quality failure.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    if len(pts) == 0:
        raise ArgumentError("cannot orient an empty cloud")
    grads = gradient_np(field, pts, batch=batch)
    norms = np.linalg.norm(grads, axis=1)
    bad = norms <= GRAD_EPS
    n_bad = int(bad.sum())
    if n_bad > max_degenerate_frac * len(pts):
        raise QualityError(
            f"{n_bad}/{len(pts)} degenerate gradients exceeds "
            f"{max_degenerate_frac:.1%}")
    good = ~bad
    normals = grads[good] / norms[good][:, None]
    return OrientedPointCloud(pts[good], normals), n_bad
