"""Mesh primitives: icosphere, OBJ I/O, control-point deformation, sampling."""

import numpy as np
import pytest

from shadowforge.geometry import (
    ControlPointSet,
    MeshError,
    TriMesh,
    apply_control_points,
    control_weights,
    default_control_points,
    load_obj,
    make_icosphere,
    sample_positions,
    save_obj,
    surface_sample,
    vertex_jitter,
)


@pytest.mark.parametrize(
    "subdivisions,n_vertices,n_faces",
    [(0, 12, 20), (1, 42, 80), (2, 162, 320)],
)
def test_icosphere_counts(subdivisions, n_vertices, n_faces):
    mesh = make_icosphere(subdivisions, radius=1.0)
    assert mesh.n_vertices == n_vertices
    assert mesh.n_faces == n_faces


def test_icosphere_vertices_on_sphere():
    mesh = make_icosphere(2, radius=0.3)
    radii = np.linalg.norm(mesh.vertices, axis=1)
    np.testing.assert_allclose(radii, 0.3, rtol=0, atol=1e-12)


def test_icosphere_closed_surface():
    # Closed manifold: every edge is shared by exactly two faces.
    mesh = make_icosphere(1, radius=1.0)
    assert mesh.edge_faces.shape[1] == 2
    assert (mesh.edge_faces >= 0).all()


def test_obj_round_trip_exact(tmp_path):
    mesh = make_icosphere(1, radius=0.7)
    path = tmp_path / "sphere.obj"
    save_obj(mesh, path)
    loaded = load_obj(path)
    np.testing.assert_array_equal(loaded.faces, mesh.faces)
    np.testing.assert_allclose(loaded.vertices, mesh.vertices, rtol=0, atol=1e-12)


def test_load_obj_missing_file(tmp_path):
    with pytest.raises((FileNotFoundError, OSError)):
        load_obj(tmp_path / "absent.obj")


def test_trimesh_validation_rejects_bad_face_index():
    with pytest.raises(MeshError):
        TriMesh(
            vertices=np.zeros((3, 3)),
            faces=np.array([[0, 1, 7]]),
        )


def test_control_weights_partition_of_unity():
    mesh = make_icosphere(2, radius=0.3)
    cps = default_control_points(mesh)
    weights = control_weights(mesh.vertices, cps.anchors, cps.bandwidth)
    assert weights.shape == (mesh.n_vertices, cps.anchors.shape[0])
    np.testing.assert_allclose(weights.sum(axis=1), 1.0, rtol=0, atol=1e-9)
    assert (weights >= 0.0).all()


def test_apply_control_points_zero_offsets_identity():
    mesh = make_icosphere(2, radius=0.3)
    cps = default_control_points(mesh)
    deformed = apply_control_points(mesh, cps)
    np.testing.assert_allclose(deformed.vertices, mesh.vertices, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(deformed.faces, mesh.faces)


def test_apply_control_points_uniform_offset_translates():
    # Partition-of-unity weights turn a constant offset into a translation.
    mesh = make_icosphere(1, radius=0.3)
    cps = default_control_points(mesh)
    shift = np.array([0.05, -0.02, 0.01])
    shifted = ControlPointSet(
        anchors=cps.anchors,
        offsets=np.tile(shift, (cps.anchors.shape[0], 1)),
        bandwidth=cps.bandwidth,
    )
    deformed = apply_control_points(mesh, shifted)
    np.testing.assert_allclose(
        deformed.vertices, mesh.vertices + shift, rtol=0, atol=1e-9
    )


def test_surface_sample_points_lie_on_faces():
    mesh = make_icosphere(1, radius=1.0)
    cloud = surface_sample(mesh, 200, seed=5)
    assert cloud.points.shape == (200, 3)
    assert cloud.face_indices.shape == (200,)
    assert cloud.barycentric.shape == (200, 3)
    np.testing.assert_allclose(cloud.barycentric.sum(axis=1), 1.0, atol=1e-12)
    assert (cloud.barycentric >= 0.0).all()
    rebuilt = sample_positions(mesh, cloud.face_indices, cloud.barycentric)
    np.testing.assert_allclose(rebuilt, cloud.points, rtol=0, atol=1e-12)


def test_surface_sample_deterministic():
    mesh = make_icosphere(1, radius=1.0)
    a = surface_sample(mesh, 50, seed=9)
    b = surface_sample(mesh, 50, seed=9)
    np.testing.assert_array_equal(a.points, b.points)
    c = surface_sample(mesh, 50, seed=10)
    assert not np.array_equal(a.points, c.points)


def test_sample_positions_manual_barycentric():
    mesh = TriMesh(
        vertices=np.array(
            [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 2.0, 0.0]]
        ),
        faces=np.array([[0, 1, 2]]),
    )
    points = sample_positions(
        mesh,
        np.array([0, 0, 0]),
        np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1 / 3, 1 / 3, 1 / 3]]),
    )
    expected = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [2 / 3, 2 / 3, 0.0]])
    np.testing.assert_allclose(points, expected, rtol=0, atol=1e-12)


def test_vertex_jitter_zero_sigma_is_identity():
    mesh = make_icosphere(1, radius=0.5)
    jittered = vertex_jitter(mesh, 0.0, seed=3)
    np.testing.assert_array_equal(jittered.vertices, mesh.vertices)


def test_vertex_jitter_deterministic_and_small():
    mesh = make_icosphere(1, radius=0.5)
    a = vertex_jitter(mesh, 0.002, seed=3)
    b = vertex_jitter(mesh, 0.002, seed=3)
    np.testing.assert_array_equal(a.vertices, b.vertices)
    deltas = np.linalg.norm(a.vertices - mesh.vertices, axis=1)
    assert 0.0 < deltas.max() < 0.02


def test_with_vertices_keeps_topology():
    mesh = make_icosphere(0, radius=1.0)
    moved = mesh.with_vertices(mesh.vertices * 2.0)
    assert moved.n_faces == mesh.n_faces
    np.testing.assert_allclose(
        np.linalg.norm(moved.vertices, axis=1), 2.0, atol=1e-12
    )
