import struct

import numpy as np
import pytest

from fieldrec import fileio
from fieldrec.errors import ArgumentError, EmptyInputError, FormatError
from fieldrec.geometry import OrientedPointCloud, PointCloud, TriangleMesh


def test_xyz_three_lines(tmp_path):
    p = tmp_path / "pts.xyz"
    p.write_text("0 0 0\n1 0 0\n0 1 0\n")
    cloud = fileio.load_point_cloud(p)
    np.testing.assert_array_equal(cloud.points,
                                  [[0, 0, 0], [1, 0, 0], [0, 1, 0]])


def test_xyz_malformed_line_names_line(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("a b c\n")
    with pytest.raises(FormatError) as exc:
        fileio.load_point_cloud(p)
    assert "line 1" in str(exc.value)


def test_xyz_empty_file_errors(tmp_path):
    p = tmp_path / "empty.xyz"
    p.write_text("")
    with pytest.raises(EmptyInputError):
        fileio.load_point_cloud(p)


def test_xyz_extra_columns_ok(tmp_path):
    p = tmp_path / "pts.xyz"
    p.write_text("1 2 3 0 0 1\n")
    cloud = fileio.load_point_cloud(p)
    np.testing.assert_array_equal(cloud.points, [[1.0, 2.0, 3.0]])


def test_ply_ascii_single_vertex_round_trip(tmp_path):
    p = tmp_path / "one.ply"
    fileio.write_ply(p, np.array([[0.5, -0.5, 0.25]]))
    cloud = fileio.load_point_cloud(p)
    np.testing.assert_array_equal(cloud.points, [[0.5, -0.5, 0.25]])


def test_ply_binary_little_endian(tmp_path):
    p = tmp_path / "bin.ply"
    header = (b"ply\nformat binary_little_endian 1.0\n"
              b"element vertex 2\n"
              b"property float x\nproperty float y\nproperty float z\n"
              b"element face 1\n"
              b"property list uchar int vertex_indices\n"
              b"end_header\n")
    body = struct.pack("<3f", 0.0, 0.0, 0.0) + struct.pack("<3f", 1.0, 2.0, 3.0)
    body += struct.pack("<B3i", 3, 0, 1, 0)
    p.write_bytes(header + body)
    cloud = fileio.load_point_cloud(p)
    np.testing.assert_allclose(cloud.points, [[0, 0, 0], [1, 2, 3]])
    mesh = fileio.load_mesh(p)
    assert mesh.faces.tolist() == [[0, 1, 0]]


def test_ply_mesh_and_quads_triangulated(tmp_path):
    p = tmp_path / "quad.ply"
    p.write_text("ply\nformat ascii 1.0\n"
                 "element vertex 4\n"
                 "property float x\nproperty float y\nproperty float z\n"
                 "element face 1\n"
                 "property list uchar int vertex_indices\n"
                 "end_header\n"
                 "0 0 0\n1 0 0\n1 1 0\n0 1 0\n"
                 "4 0 1 2 3\n")
    mesh = fileio.load_mesh(p)
    assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_obj_round_trip(tmp_path):
    mesh = TriangleMesh([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
                        [[0, 1, 2]])
    p = tmp_path / "tri.obj"
    fileio.save_mesh(p, mesh)
    loaded = fileio.load_mesh(p)
    np.testing.assert_array_equal(loaded.vertices, mesh.vertices)
    np.testing.assert_array_equal(loaded.faces, mesh.faces)


def test_obj_vertex_only_load_as_cloud(tmp_path):
    p = tmp_path / "cloud.obj"
    p.write_text("v 1 2 3\nv 4 5 6\nf 1/1 2/2 1\n")
    cloud = fileio.load_point_cloud(p)
    np.testing.assert_array_equal(cloud.points, [[1, 2, 3], [4, 5, 6]])


def test_oriented_ply_round_trip(tmp_path):
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    normals = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    p = tmp_path / "oriented.ply"
    fileio.save_point_cloud(p, OrientedPointCloud(pts, normals))
    loaded = fileio.load_oriented_point_cloud(p)
    np.testing.assert_array_equal(loaded.points, pts)
    np.testing.assert_array_equal(loaded.normals, normals)


def test_ply_scalar_channel(tmp_path):
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    p = tmp_path / "scalars.ply"
    fileio.write_ply(p, pts, scalars=np.array([0.25, 1.0]))
    text = p.read_text()
    assert "property double quality" in text
    assert "0 0 0 0.25" in text


def test_missing_file_errors():
    with pytest.raises(OSError):
        fileio.load_point_cloud("/nonexistent/file.xyz")


def test_unknown_format_rejected(tmp_path):
    with pytest.raises(ArgumentError):
        fileio.load_point_cloud(tmp_path / "data.bin")
    with pytest.raises(ArgumentError):
        fileio.save_point_cloud(tmp_path / "out.obj", PointCloud(np.zeros((1, 3))))
