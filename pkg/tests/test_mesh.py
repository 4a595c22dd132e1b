import itertools

import numpy as np
import pytest

from coatsim.mesh import (COVER_EPSILON, COVER_SCALE, MeshTopologyError, TriangleMesh, builtin_mesh,
                          compute_vertex_normals, extrude_cover, icosphere, load_obj, octahedron, quad, unit_cube)


def brute_force_normal(vertices, faces, idx):
    """Area-weighted mean of incident face normals, one face at a time."""
    acc = np.zeros(3)
    for f in faces:
        if idx in f:
            a, b, c = vertices[f]
            acc += np.cross(b - a, c - a)
    return acc / np.linalg.norm(acc)


def test_cube_corner_normals():
    mesh = compute_vertex_normals(unit_cube())
    corners = [i for i, v in enumerate(mesh.vertices) if np.allclose(np.abs(v), 0.5)]
    assert len(corners) == 8
    for i in corners:
        expected = np.sign(mesh.vertices[i]) / np.sqrt(3.0)
        np.testing.assert_allclose(mesh.vertex_normals[i], expected, atol=1e-12)


def test_normals_match_brute_force():
    for mesh in (unit_cube(), octahedron(), icosphere(1)):
        got = compute_vertex_normals(mesh)
        for i in range(mesh.n_vertices):
            np.testing.assert_allclose(got.vertex_normals[i], brute_force_normal(mesh.vertices, mesh.faces, i),
                                       atol=1e-12)


def test_quad_normals_point_up():
    mesh = compute_vertex_normals(quad())
    np.testing.assert_array_equal(mesh.vertex_normals, np.tile([0.0, 0.0, 1.0], (4, 1)))


def test_icosphere_normals_are_nearly_radial():
    mesh = compute_vertex_normals(icosphere(4))
    radial = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    assert np.abs(mesh.vertex_normals - radial).max() < 1e-2


def test_icosphere_is_unit():
    for n in range(4):
        r = np.linalg.norm(icosphere(n).vertices, axis=1)
        np.testing.assert_allclose(r, 1.0, atol=1e-15)


def test_extrude_identity_parameters():
    mesh = compute_vertex_normals(icosphere(1))
    assert np.array_equal(extrude_cover(mesh, 0.0, 1.0).vertices, mesh.vertices)


def test_extrude_sphere_radius():
    out = extrude_cover(compute_vertex_normals(icosphere(2)), COVER_EPSILON, COVER_SCALE)
    np.testing.assert_allclose(np.linalg.norm(out.vertices, axis=1), 1.0004 * 1.0005, atol=1e-6)


def test_extrude_flat_quad():
    mesh = compute_vertex_normals(quad())
    out = extrude_cover(mesh, 0.1, 1.0)
    np.testing.assert_allclose(out.vertices[:, 2], 0.1)
    np.testing.assert_array_equal(out.vertices[:, :2], mesh.vertices[:, :2])


def test_extrude_needs_normals():
    with pytest.raises(ValueError):
        extrude_cover(quad())


def test_degenerate_face_rejected():
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)
    with pytest.raises(MeshTopologyError):
        TriangleMesh(v, np.array([[0, 1, 2]]))


def test_index_out_of_range_rejected():
    v = np.eye(3)
    with pytest.raises(MeshTopologyError):
        TriangleMesh(v, np.array([[0, 1, 3]]))


def test_isolated_vertex_rejected():
    v = np.vstack([np.eye(3), [[5.0, 5.0, 5.0]]])
    with pytest.raises(MeshTopologyError):
        compute_vertex_normals(TriangleMesh(v, np.array([[0, 1, 2]])))


def test_builtin_names():
    assert builtin_mesh("icosphere:2").n_faces == 320
    assert builtin_mesh("octahedron").n_faces == 8
    with pytest.raises(ValueError):
        builtin_mesh("teapot")


def test_load_obj_fan_and_negative_indices(tmp_path):
    path = tmp_path / "sq.obj"
    path.write_text("# square\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\nf -4 -2 -1\n")
    mesh = load_obj(path)
    assert mesh.n_faces == 3
    assert mesh.faces.tolist()[:2] == [[0, 1, 2], [0, 2, 3]]
    assert mesh.faces.tolist()[2] == [0, 2, 3]


def test_cube_is_closed():
    mesh = unit_cube()
    edges = {}
    for f in mesh.faces:
        for a, b in itertools.combinations(sorted(f), 2):
            edges[(a, b)] = edges.get((a, b), 0) + 1
    assert set(edges.values()) == {2}
