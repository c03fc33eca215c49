import math

import numpy as np
import pytest

from higrpo.meshsample import (Mesh, MeshError, PointCloud, Texture, allocate_samples, bary_from_uniforms,
                               color_from_bary, face_area, mesh_to_pointcloud, plane_distance,
                               point_from_bary, read_obj, read_ply, read_ppm, sample_barycentric,
                               texel_lookup, write_obj, write_ply, write_ppm)
from higrpo.rng import Stream


def checker(w=2, h=2):
    data = bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 255])
    return Texture(w, h, data)


def unit_square():
    verts = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]
    uvs = [[0, 0], [1, 0], [1, 1], [0, 1]]
    faces = [[0, 1, 2], [0, 2, 3]]
    return Mesh(verts, uvs, faces, faces, checker())


def test_face_area():
    assert face_area([0, 0, 0], [1, 0, 0], [0, 1, 0]) == 0.5
    assert face_area([0, 0, 0], [1, 0, 0], [2, 0, 0]) == 0.0


def test_allocation_ceil_and_errors():
    assert allocate_samples([0.5, 0.5, 0.0, 0.0011], 1000).tolist() == [500, 500, 0, 2]
    with pytest.raises(MeshError):
        allocate_samples([1.0], 0)
    with pytest.raises(MeshError):
        allocate_samples([1.0], -2)


def test_unit_square_point_count():
    cloud = mesh_to_pointcloud(unit_square(), 1000, Stream(0))
    assert len(cloud) == 1000
    assert np.bincount(cloud.face_index).tolist() == [500, 500]


def test_bary_properties():
    u = Stream(4).uniforms(1000)
    v = Stream(5).uniforms(1000)
    a, b, c = bary_from_uniforms(u, v)
    assert np.all(a >= 0) and np.all(b >= 0) and np.all(c >= 0)
    assert np.allclose(a + b + c, 1.0, atol=1e-12)
    assert sum(sample_barycentric(Stream(1))) == pytest.approx(1.0)


def test_vertex_reproduction():
    tri = np.array([[0.0, 0, 0], [2, 0, 0], [0, 3, 1]])
    for k in range(3):
        bary = [0.0, 0.0, 0.0]
        bary[k] = 1.0
        assert np.array_equal(point_from_bary(tri, bary), tri[k])
    p = point_from_bary(tri, (0.2, 0.3, 0.5))
    assert plane_distance(p, tri) < 1e-12


def test_texel_lookup_vflip_and_clamp():
    tex = checker()
    # row 0 of the image is the top (v = 1)
    assert texel_lookup(tex, np.array([[0.25, 0.75]]))[0].tolist() == [1.0, 0.0, 0.0]
    assert texel_lookup(tex, np.array([[0.25, 0.25]]))[0].tolist() == [0.0, 0.0, 1.0]
    assert texel_lookup(tex, np.array([[1.0, 0.0]]))[0].tolist() == [1.0, 1.0, 1.0]
    uvs = np.array([[0, 1], [0.5, 1], [0, 0.5]])
    assert color_from_bary(uvs, (1, 0, 0), tex).tolist() == [1.0, 0.0, 0.0]


def test_empty_mesh_and_degenerate_face():
    empty = Mesh(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3)), checker())
    assert len(mesh_to_pointcloud(empty, 10, Stream(0))) == 0
    degenerate = Mesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 0]] * 3, [[0, 1, 2]], [[0, 0, 0]], checker())
    assert len(mesh_to_pointcloud(degenerate, 100, Stream(0))) == 0


def test_mesh_validation():
    with pytest.raises(MeshError):
        Mesh([[0, 0, 0]], [[0, 0]], [[0, 1, 2]], [[0, 0, 0]], checker())
    with pytest.raises(MeshError):
        Texture(2, 2, b"\x00" * 5)


def test_points_on_surface():
    cloud = mesh_to_pointcloud(unit_square(), 200, Stream(9))
    assert np.all(cloud.points[:, 2] == 0)
    assert cloud.points[:, :2].min() >= 0 and cloud.points[:, :2].max() <= 1


def test_file_round_trips(tmp_path):
    mesh = unit_square()
    write_ppm(mesh.texture, tmp_path / "t.ppm")
    tex = read_ppm(tmp_path / "t.ppm")
    assert tex == mesh.texture
    write_obj(mesh, tmp_path / "m.obj")
    again = read_obj(tmp_path / "m.obj", tex)
    assert np.array_equal(again.vertices, mesh.vertices) and np.array_equal(again.faces, mesh.faces)
    cloud = mesh_to_pointcloud(mesh, 50, Stream(2))
    write_ply(cloud, tmp_path / "c.ply")
    back = read_ply(tmp_path / "c.ply")
    assert np.allclose(back.points, cloud.points.astype(np.float64))
    assert np.allclose(back.colors, np.rint(cloud.colors * 255) / 255)


def test_obj_rejects_quads(tmp_path):
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nf 1/1 2/1 3/1 4/1\n")
    with pytest.raises(MeshError):
        read_obj(tmp_path / "q.obj", checker())


def test_partition_independence():
    # sampling faces separately gives the same points as sampling them together
    mesh = unit_square()
    whole = mesh_to_pointcloud(mesh, 300, Stream(3))
    first = Mesh(mesh.vertices, mesh.uvs, mesh.faces[:1], mesh.face_uvs[:1], mesh.texture)
    part = mesh_to_pointcloud(first, 300, Stream(3))
    assert np.array_equal(whole.points[whole.face_index == 0], part.points)


def test_ply_header(tmp_path):
    write_ply(PointCloud(np.array([[0.5, 0.25, 1.0]]), np.array([[1.0, 0.0, 0.5]])), tmp_path / "p.ply")
    lines = (tmp_path / "p.ply").read_text().splitlines()
    assert lines[2] == "element vertex 1" and lines[-1] == "0.5 0.25 1.0 255 0 128"
