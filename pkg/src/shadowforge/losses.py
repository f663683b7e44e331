"""Mesh smoothness losses with analytic vertex gradients.

Four regularizers keep the optimized meshes smooth and printable: normal
consistency across adjacent faces, mean edge length, symmetric chamfer
distance between point clouds, and uniform-weight Laplacian magnitude.
Each loss has a ``*_grad`` variant returning ``(value, gradients)`` so the
attack loop can chain VJPs without an autodiff tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .diffcore import DiffOp, register_gradcheck_case
from .geometry import MeshError, TriMesh

__all__ = [
    "LossWeights",
    "normal_consistency",
    "normal_consistency_grad",
    "edge_length_mean",
    "edge_length_mean_grad",
    "chamfer",
    "chamfer_grad",
    "laplacian_vectors",
    "laplacian_smoothing",
    "laplacian_smoothing_grad",
    "combine",
]

_TINY = 1e-300


@dataclass(frozen=True)
class LossWeights:
    """Weights for the smoothness terms of the total loss.

    w1 scales normal consistency, w2 edge length, w3 chamfer, w4 Laplacian.
    """

    w1: float = 0.5
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 0.3

    def __post_init__(self):
        for name in ("w1", "w2", "w3", "w4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")


def _unit_normals(vertices: np.ndarray, faces: np.ndarray):
    tri = vertices[faces]
    u = tri[:, 1] - tri[:, 0]
    w = tri[:, 2] - tri[:, 0]
    c = np.cross(u, w)
    norm = np.linalg.norm(c, axis=1)
    n_hat = c / np.maximum(norm, _TINY)[:, None]
    return u, w, norm, n_hat


def normal_consistency_grad(mesh: TriMesh) -> tuple[float, np.ndarray]:
    """Mean of (1 - cos angle) over adjacent face pairs, plus d/dvertices."""
    edge_faces = mesh.edge_faces
    interior = edge_faces[:, 1] >= 0
    if not np.any(interior):
        raise MeshError("no adjacent faces: mesh has no interior edges")
    pairs = edge_faces[interior]
    vertices = mesh.vertices
    faces = mesh.faces
    u, w, norm, n_hat = _unit_normals(vertices, faces)
    n_i = n_hat[pairs[:, 0]]
    n_j = n_hat[pairs[:, 1]]
    cos = np.einsum("ij,ij->i", n_i, n_j)
    n_pairs = len(pairs)
    value = float(np.mean(1.0 - cos))

    g_nhat = np.zeros_like(n_hat)
    np.add.at(g_nhat, pairs[:, 0], -n_j / n_pairs)
    np.add.at(g_nhat, pairs[:, 1], -n_i / n_pairs)
    # Through normalization n_hat = c/|c|: g_c = (I - n n^T) g_nhat / |c|.
    dot = np.einsum("ij,ij->i", g_nhat, n_hat)
    g_c = (g_nhat - dot[:, None] * n_hat) / np.maximum(norm, _TINY)[:, None]
    # c = u x w, so g_u = w x g_c and g_w = g_c x u.
    g_u = np.cross(w, g_c)
    g_w = np.cross(g_c, u)
    grad = np.zeros_like(vertices)
    np.add.at(grad, faces[:, 1], g_u)
    np.add.at(grad, faces[:, 2], g_w)
    np.add.at(grad, faces[:, 0], -(g_u + g_w))
    return value, grad


def normal_consistency(mesh: TriMesh) -> float:
    return normal_consistency_grad(mesh)[0]


def edge_length_mean_grad(mesh: TriMesh) -> tuple[float, np.ndarray]:
    """Mean length over unique undirected edges, plus d/dvertices."""
    edges = mesh.edges
    if len(edges) == 0:
        raise MeshError("mesh has no edges")
    vertices = mesh.vertices
    diff = vertices[edges[:, 0]] - vertices[edges[:, 1]]
    lengths = np.linalg.norm(diff, axis=1)
    n_edges = len(edges)
    value = float(lengths.sum() / n_edges)
    unit = diff / np.maximum(lengths, _TINY)[:, None]
    grad = np.zeros_like(vertices)
    np.add.at(grad, edges[:, 0], unit / n_edges)
    np.add.at(grad, edges[:, 1], -unit / n_edges)
    return value, grad


def edge_length_mean(mesh: TriMesh) -> float:
    return edge_length_mean_grad(mesh)[0]


def _cloud_points(cloud) -> np.ndarray:
    points = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
        raise ValueError(f"expected nonempty (n, 3) point cloud, got shape {points.shape}")
    return points


def chamfer_grad(cloud_a, cloud_b) -> tuple[float, np.ndarray, np.ndarray]:
    """Symmetric sum of squared nearest-neighbor distances, both directions.

    Gradients treat the nearest-neighbor matches as fixed at their current
    assignment, so both clouds receive cotangents from both sum terms.
    """
    a = _cloud_points(cloud_a)
    b = _cloud_points(cloud_b)
    _, idx_ab = cKDTree(b).query(a)
    _, idx_ba = cKDTree(a).query(b)
    diff_ab = a - b[idx_ab]
    diff_ba = b - a[idx_ba]
    value = float((diff_ab * diff_ab).sum() + (diff_ba * diff_ba).sum())
    g_a = 2.0 * diff_ab
    g_b = 2.0 * diff_ba
    np.add.at(g_b, idx_ab, -2.0 * diff_ab)
    np.add.at(g_a, idx_ba, -2.0 * diff_ba)
    return value, g_a, g_b


def chamfer(cloud_a, cloud_b) -> float:
    return chamfer_grad(cloud_a, cloud_b)[0]


def laplacian_vectors(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Per-vertex (mean neighbor position - vertex) and vertex degrees."""
    vertices = mesh.vertices
    edges = mesh.edges
    degree = np.zeros(len(vertices))
    np.add.at(degree, edges[:, 0], 1.0)
    np.add.at(degree, edges[:, 1], 1.0)
    if np.any(degree == 0):
        isolated = np.flatnonzero(degree == 0).tolist()
        raise MeshError(f"isolated vertices with no neighbors: {isolated}")
    neighbor_sum = np.zeros_like(vertices)
    np.add.at(neighbor_sum, edges[:, 0], vertices[edges[:, 1]])
    np.add.at(neighbor_sum, edges[:, 1], vertices[edges[:, 0]])
    return neighbor_sum / degree[:, None] - vertices, degree


def laplacian_smoothing_grad(mesh: TriMesh) -> tuple[float, np.ndarray]:
    """Mean Laplacian-vector magnitude (uniform weights), plus d/dvertices."""
    delta, degree = laplacian_vectors(mesh)
    norms = np.linalg.norm(delta, axis=1)
    n = len(delta)
    value = float(norms.mean())
    unit = np.zeros_like(delta)
    nonzero = norms > _TINY
    unit[nonzero] = delta[nonzero] / norms[nonzero, None]
    g_delta = unit / n
    grad = -g_delta.copy()
    edges = mesh.edges
    # d delta_i / d v_j = I/deg_i for each neighbor j of i.
    np.add.at(grad, edges[:, 1], g_delta[edges[:, 0]] / degree[edges[:, 0], None])
    np.add.at(grad, edges[:, 0], g_delta[edges[:, 1]] / degree[edges[:, 1], None])
    return value, grad


def laplacian_smoothing(mesh: TriMesh) -> float:
    return laplacian_smoothing_grad(mesh)[0]


def combine(
    l_det: float,
    l_norm: float,
    l_edge: float,
    l_chamfer: float,
    l_laplace: float,
    weights: LossWeights,
) -> float:
    """Total loss: detection term plus weighted smoothness terms."""
    values = (l_det, l_norm, l_edge, l_chamfer, l_laplace)
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"non-finite loss input: {values}")
    return float(
        l_det
        + weights.w1 * l_norm
        + weights.w2 * l_edge
        + weights.w3 * l_chamfer
        + weights.w4 * l_laplace
    )


# ---------------------------------------------------------------------------
# Gradcheck cases


def _perturbed_icosphere(seed: int) -> TriMesh:
    from .geometry import make_icosphere

    rng = np.random.default_rng(seed)
    mesh = make_icosphere(1, 1.0)
    return mesh.with_vertices(mesh.vertices + 0.02 * rng.normal(size=mesh.vertices.shape))


def _mesh_loss_case(name: str, grad_fn):
    def build(seed: int):
        mesh = _perturbed_icosphere(seed)

        def forward(inputs):
            return np.asarray(grad_fn(mesh.with_vertices(inputs[0]))[0])

        def vjp(inputs, cotangent):
            _, grad = grad_fn(mesh.with_vertices(inputs[0]))
            return [float(cotangent) * grad]

        op = DiffOp(name=name, forward=forward, vjp=vjp, diff_mask=(True,))
        return op, [mesh.vertices.copy()], {}

    return build


def _chamfer_case(seed: int):
    rng = np.random.default_rng(seed)
    cloud_a = rng.uniform(-1.0, 1.0, size=(40, 3))
    cloud_b = rng.uniform(-1.0, 1.0, size=(45, 3))

    def forward(inputs):
        return np.asarray(chamfer_grad(inputs[0], inputs[1])[0])

    def vjp(inputs, cotangent):
        _, g_a, g_b = chamfer_grad(inputs[0], inputs[1])
        return [float(cotangent) * g_a, float(cotangent) * g_b]

    op = DiffOp(name="losses.chamfer", forward=forward, vjp=vjp, diff_mask=(True, True))
    return op, [cloud_a, cloud_b], {}


register_gradcheck_case(
    "losses.normal_consistency",
    _mesh_loss_case("losses.normal_consistency", normal_consistency_grad),
)
register_gradcheck_case(
    "losses.edge_length_mean",
    _mesh_loss_case("losses.edge_length_mean", edge_length_mean_grad),
)
register_gradcheck_case("losses.chamfer", _chamfer_case)
register_gradcheck_case(
    "losses.laplacian_smoothing",
    _mesh_loss_case("losses.laplacian_smoothing", laplacian_smoothing_grad),
)
