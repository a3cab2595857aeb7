import numpy as np
import pytest

from fieldrec import extraction as E
from fieldrec.errors import (ArgumentError, ContractError, EmptyLevelSetError,
                             QualityError)
from fieldrec.field import AffineField, ScaledField, SphereField
from fieldrec.geometry import PointCloud, SpatialIndex

from conftest import sphere_cloud


def sphere_values(grid, radius=0.5):
    nodes = grid.nodes()
    return (np.linalg.norm(nodes, axis=1) - radius).reshape(grid.resolution)


# -- grid spec -----------------------------------------------------------------

def test_grid_spec_validation():
    with pytest.raises(ArgumentError):
        E.GridSpec(resolution=(4, 4, 4), lo=(-1,) * 3, hi=(1,) * 3)
    with pytest.raises(ArgumentError):
        E.GridSpec(resolution=(16,) * 3, lo=(0, 0, 0), hi=(0, 1, 1))


def test_grid_for_cloud_contains_points():
    pts = np.random.default_rng(0).normal(size=(100, 3))
    grid = E.GridSpec.for_cloud(pts, 32, margin=0.05)
    assert grid.contains(pts)


# -- marching cubes -------------------------------------------------------------

def test_marching_cubes_sphere_radii_and_genus():
    grid = E.GridSpec.cube(64, half_extent=1.0)
    mesh = E.marching_cubes(sphere_values(grid), grid)
    radii = np.linalg.norm(mesh.vertices, axis=1)
    cell = grid.max_cell()
    assert np.all(np.abs(radii - 0.5) <= 1.5 * cell)
    assert mesh.euler_characteristic() == 2


def test_marching_cubes_constant_field_empty():
    grid = E.GridSpec.cube(16)
    mesh = E.marching_cubes(np.ones(grid.resolution), grid)
    assert mesh.is_empty


def test_marching_cubes_plane_field():
    grid = E.GridSpec.cube(32, half_extent=1.0)
    values = grid.nodes()[:, 2].reshape(grid.resolution)
    mesh = E.marching_cubes(values, grid)
    assert not mesh.is_empty
    assert np.abs(mesh.vertices[:, 2]).max() < 1e-9
    normals = mesh.face_normals()
    np.testing.assert_allclose(normals, np.tile([0.0, 0.0, 1.0], (len(normals), 1)),
                               atol=1e-12)


def test_marching_cubes_orientation_outward_for_sphere():
    grid = E.GridSpec.cube(32, half_extent=1.0)
    mesh = E.marching_cubes(sphere_values(grid), grid)
    c = mesh.face_centroids()
    outward = (mesh.face_normals() * (c / np.linalg.norm(c, axis=1, keepdims=True))).sum(axis=1)
    assert np.all(outward > 0)


def test_marching_cubes_clean_output():
    grid = E.GridSpec.cube(24, half_extent=1.0)
    rng = np.random.default_rng(3)
    values = sphere_values(grid) + 0.05 * rng.standard_normal(grid.resolution)
    mesh = E.marching_cubes(values, grid)
    assert mesh.faces.min() >= 0 and mesh.faces.max() < len(mesh.vertices)
    assert mesh.face_areas().min() >= E.DEGENERATE_AREA


def test_marching_cubes_rejects_nonfinite():
    grid = E.GridSpec.cube(16)
    values = np.ones(grid.resolution)
    values[0, 0, 0] = np.nan
    with pytest.raises(ContractError):
        E.marching_cubes(values, grid)


def test_marching_cubes_mask_excludes_cells():
    grid = E.GridSpec.cube(32, half_extent=1.0)
    values = sphere_values(grid)
    mask = grid.nodes()[:, 2].reshape(grid.resolution) <= 0.0
    mesh = E.marching_cubes(values, grid, mask=mask)
    assert not mesh.is_empty
    assert mesh.vertices[:, 2].max() <= grid.max_cell() + 1e-12


# -- level-set sampling -----------------------------------------------------------

def test_sample_level_set_sphere_radii():
    grid = E.GridSpec.cube(48, half_extent=0.8)
    cloud, mesh = E.sample_level_set(SphereField(radius=0.5), grid, 10000, seed=1)
    radii = np.linalg.norm(cloud.points, axis=1)
    assert np.all(np.abs(radii - 0.5) <= 2.0 * grid.max_cell())


def test_sample_level_set_zero_count_and_determinism():
    grid = E.GridSpec.cube(24, half_extent=0.8)
    empty, _ = E.sample_level_set(SphereField(radius=0.5), grid, 0, seed=0)
    assert len(empty) == 0
    a, _ = E.sample_level_set(SphereField(radius=0.5), grid, 100, seed=9)
    b, _ = E.sample_level_set(SphereField(radius=0.5), grid, 100, seed=9)
    np.testing.assert_array_equal(a.points, b.points)


def test_sample_level_set_no_crossing_errors():
    grid = E.GridSpec.cube(16, half_extent=0.3)
    probe = SphereField(radius=2.0)  # no zero set inside the grid
    with pytest.raises(EmptyLevelSetError):
        E.sample_level_set(probe, grid, 10, seed=0)


# -- inpainting --------------------------------------------------------------------

def test_inpaint_subset_keeps_nothing():
    pts = sphere_cloud(200, seed=0)
    report = E.inpaint(PointCloud(pts), PointCloud(pts[:50]))
    assert report.sigma_d == 0.0
    assert report.kept.sum() == 0
    np.testing.assert_array_equal(report.merged.points, pts)


def test_inpaint_single_far_sample():
    p = PointCloud([[0.0, 0.0, 0.0]])
    rng = np.random.default_rng(1)
    dirs = rng.standard_normal((999, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    near = dirs * 0.01                       # all at distance 0.01
    far = np.array([[0.5, 0.0, 0.0]])        # one at distance 0.5
    samples = np.concatenate([near, far], axis=0)
    report = E.inpaint(p, PointCloud(samples))
    assert report.sigma_d == pytest.approx(0.0155, abs=5e-4)
    assert report.kept.sum() == 1
    assert report.kept[-1]
    assert len(report.merged) == 2


def test_inpaint_matches_brute_force_filter():
    rng = np.random.default_rng(7)
    p = rng.random((300, 3))
    samples = rng.random((500, 3))
    report = E.inpaint(PointCloud(p), PointCloud(samples))
    d = np.sqrt(((samples[:, None, :] - p[None, :, :]) ** 2).sum(axis=2)).min(axis=1)
    np.testing.assert_allclose(report.distances, d, rtol=1e-12)
    sigma = d.std()
    np.testing.assert_array_equal(report.kept, d >= 3 * sigma)


def test_inpaint_report_files(tmp_path):
    p = PointCloud(sphere_cloud(100, seed=2))
    report = E.inpaint(p, PointCloud(sphere_cloud(100, seed=3)))
    report.write_csv(tmp_path / "fill.csv")
    report.write_summary(tmp_path / "fill.json")
    lines = (tmp_path / "fill.csv").read_text().splitlines()
    assert lines[0] == "index,distance,kept"
    assert len(lines) == 101
    assert "sigma_d" in (tmp_path / "fill.json").read_text()


# -- normal assignment ----------------------------------------------------------------

def test_assign_normals_sphere_radial():
    pts = sphere_cloud(500, radius=0.5, seed=4)
    oriented, dropped = E.assign_normals(PointCloud(pts), SphereField(radius=0.5))
    assert dropped == 0
    radial = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    angles = np.degrees(np.arccos(np.clip((oriented.normals * radial).sum(axis=1), -1, 1)))
    assert angles.max() < 1.0
    np.testing.assert_array_equal(oriented.points, pts)


def test_assign_normals_plane_and_unit_norm():
    pts = np.random.default_rng(5).uniform(-1, 1, size=(200, 3))
    oriented, _ = E.assign_normals(PointCloud(pts), AffineField(a=[0.0, 0.0, 1.0]))
    np.testing.assert_allclose(oriented.normals,
                               np.tile([0.0, 0.0, 1.0], (len(pts), 1)), atol=1e-12)
    norms = np.linalg.norm(oriented.normals, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-9)


def test_assign_normals_quality_gate():
    flat = ScaledField(AffineField(a=[0.0, 0.0, 1.0]), 0.0)
    pts = np.random.default_rng(6).uniform(-1, 1, size=(50, 3))
    with pytest.raises(QualityError):
        E.assign_normals(PointCloud(pts), flat)
