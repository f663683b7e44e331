"""Triangle meshes: OBJ I/O, icosphere generation, control-point deformation, sampling.

Vertices live in model units (meters). All operations are pure: they take
immutable inputs and return new objects; randomness always comes in through an
explicit seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "MeshError",
    "TriMesh",
    "ControlPointSet",
    "PointCloud",
    "load_obj",
    "save_obj",
    "make_icosphere",
    "control_weights",
    "apply_control_points",
    "apply_control_points_vjp",
    "default_control_points",
    "surface_sample",
    "sample_positions",
    "sample_positions_vjp",
    "vertex_jitter",
]

DEGENERATE_AREA_TOL = 1e-12


class MeshError(ValueError):
    """Invalid mesh data: parse failures, bad indices, degenerate faces."""


class TriMesh:
    """Triangle mesh with optional UV coordinates.

    Parameters
    ----------
    vertices : (n, 3) array_like
        Vertex positions in model units.
    faces : (m, 3) array_like of int
        Vertex index triples, counterclockwise when viewed from outside.
    uvs : (k, 2) array_like, optional
        Texture coordinates in [0, 1]^2.
    uv_faces : (m, 3) array_like of int, optional
        UV index triples parallel to ``faces``. Required when ``uvs`` is given
        and face corners need per-face UVs.
    """

    def __init__(self, vertices, faces, uvs=None, uv_faces=None, validate=True):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
        self.uvs = None if uvs is None else np.ascontiguousarray(uvs, dtype=np.float64).reshape(-1, 2)
        self.uv_faces = None if uv_faces is None else np.ascontiguousarray(uv_faces, dtype=np.int64).reshape(-1, 3)
        self._edges = None
        self._edge_faces = None
        if validate:
            self._validate()

    def _validate(self):
        if len(self.faces) and self.faces.max() >= len(self.vertices):
            raise MeshError(
                f"face index {self.faces.max()} out of range for {len(self.vertices)} vertices"
            )
        if len(self.faces) and self.faces.min() < 0:
            raise MeshError("negative face index")
        if self.uv_faces is not None:
            if self.uvs is None:
                raise MeshError("uv_faces given without uvs")
            if len(self.uv_faces) != len(self.faces):
                raise MeshError(
                    f"uv_faces length {len(self.uv_faces)} != faces length {len(self.faces)}"
                )
            if len(self.uv_faces) and self.uv_faces.max() >= len(self.uvs):
                raise MeshError("uv face index out of range")
        bad = np.nonzero(self.face_areas() <= DEGENERATE_AREA_TOL)[0]
        if bad.size:
            raise MeshError(f"degenerate faces (area <= {DEGENERATE_AREA_TOL}): {bad.tolist()}")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        """(m, 3, 3) corner positions."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        tri = self.triangles()
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def face_normals(self) -> np.ndarray:
        """Unit normals from counterclockwise winding."""
        tri = self.triangles()
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norms = np.linalg.norm(cross, axis=1, keepdims=True)
        return cross / np.maximum(norms, 1e-300)

    def _build_edges(self):
        # undirected edges stored once, each with its 1 or 2 incident faces
        he = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        face_of_he = np.repeat(np.arange(len(self.faces)), 3)
        edges, inverse = np.unique(he, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        order = np.argsort(inverse, kind="stable")
        starts = np.flatnonzero(np.diff(inverse[order], prepend=-1))
        counts = np.diff(starts, append=len(order))
        edge_faces = np.full((len(edges), 2), -1, dtype=np.int64)
        edge_faces[:, 0] = face_of_he[order][starts]
        two = counts >= 2
        edge_faces[two, 1] = face_of_he[order][starts[two] + 1]
        self._edges = edges
        self._edge_faces = edge_faces

    @property
    def edges(self) -> np.ndarray:
        """(E, 2) unique undirected edges as sorted vertex index pairs."""
        if self._edges is None:
            self._build_edges()
        return self._edges

    @property
    def edge_faces(self) -> np.ndarray:
        """(E, 2) incident face ids per edge; -1 marks a boundary edge's missing side."""
        if self._edge_faces is None:
            self._build_edges()
        return self._edge_faces

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        """Same connectivity, new vertex positions (no revalidation)."""
        return TriMesh(vertices, self.faces, self.uvs, self.uv_faces, validate=False)

    def bounding_box(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass
class ControlPointSet:
    """Anchor points whose displacement offsets drive a smooth mesh deformation.

    ``offsets`` are the optimization variables; ``bandwidth`` is the Gaussian
    kernel sigma in model units.
    """

    anchors: np.ndarray
    offsets: np.ndarray
    bandwidth: float

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64).reshape(-1, 3)
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        if len(self.anchors) < 1:
            raise ValueError("need at least one control point")
        if self.anchors.shape != self.offsets.shape:
            raise ValueError("anchors and offsets must have matching shapes")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")

    @property
    def k(self) -> int:
        return len(self.anchors)


@dataclass
class PointCloud:
    """Points sampled from a mesh surface, with (face, barycentric) provenance."""

    points: np.ndarray
    face_indices: np.ndarray
    barycentric: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.face_indices = np.asarray(self.face_indices, dtype=np.int64).ravel()
        self.barycentric = np.asarray(self.barycentric, dtype=np.float64).reshape(-1, 3)
        if np.any(self.barycentric < -1e-9) or np.any(
            np.abs(self.barycentric.sum(axis=1) - 1.0) > 1e-9
        ):
            raise ValueError("barycentric coordinates must be nonnegative and sum to 1")

    def __len__(self):
        return len(self.points)


# ---------------------------------------------------------------------------
# OBJ I/O


def load_obj(path) -> TriMesh:
    """Parse a Wavefront OBJ file (``v``, ``vt``, ``f`` records, 1-based).

    Faces must be triangles; ``f a/at b/bt c/ct`` syntax attaches UV indices.
    Normals in the file are ignored. Raises :class:`MeshError` with the line
    number on malformed records, out-of-range indices, or degenerate faces.
    """
    vertices, uvs, faces, uv_faces = [], [], [], []
    any_uv_face = False
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            try:
                if tag == "v":
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                elif tag == "vt":
                    uvs.append([float(parts[1]), float(parts[2])])
                elif tag == "f":
                    corners = parts[1:]
                    if len(corners) != 3:
                        raise MeshError(
                            f"{path}:{lineno}: only triangle faces supported "
                            f"(got {len(corners)} corners)"
                        )
                    vi, ti = [], []
                    for c in corners:
                        fields = c.split("/")
                        v_idx = int(fields[0])
                        if v_idx == 0:
                            raise MeshError(f"{path}:{lineno}: OBJ indices are 1-based, got 0")
                        if v_idx < 0:
                            raise MeshError(f"{path}:{lineno}: negative OBJ index unsupported")
                        vi.append(v_idx - 1)
                        if len(fields) > 1 and fields[1] != "":
                            t_idx = int(fields[1])
                            if t_idx == 0:
                                raise MeshError(
                                    f"{path}:{lineno}: OBJ indices are 1-based, got 0"
                                )
                            ti.append(t_idx - 1)
                    faces.append(vi)
                    if len(ti) == 3:
                        uv_faces.append(ti)
                        any_uv_face = True
                    elif ti:
                        raise MeshError(f"{path}:{lineno}: mixed UV/no-UV corners in face")
            except MeshError:
                raise
            except (ValueError, IndexError) as exc:
                raise MeshError(f"{path}:{lineno}: cannot parse {tag!r} record: {exc}") from exc
    if not vertices:
        raise MeshError(f"{path}: no vertices found")
    if any_uv_face and len(uv_faces) != len(faces):
        raise MeshError(f"{path}: some faces carry UV indices and some do not")
    try:
        return TriMesh(
            vertices,
            faces,
            uvs=np.array(uvs) if uvs else None,
            uv_faces=np.array(uv_faces) if any_uv_face else None,
        )
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}") from exc


def save_obj(mesh: TriMesh, path) -> None:
    """Write ``v``/``vt``/``f`` records; the exact subset :func:`load_obj` reads."""
    with open(path, "w", encoding="utf-8") as fh:
        # repr of Python floats is the shortest round-trip decimal.
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        if mesh.uvs is not None:
            for t in mesh.uvs:
                fh.write(f"vt {float(t[0])!r} {float(t[1])!r}\n")
        if mesh.uv_faces is not None:
            for f, t in zip(mesh.faces, mesh.uv_faces):
                fh.write(
                    f"f {f[0] + 1}/{t[0] + 1} {f[1] + 1}/{t[1] + 1} {f[2] + 1}/{t[2] + 1}\n"
                )
        else:
            for f in mesh.faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


# ---------------------------------------------------------------------------
# Icosphere


def make_icosphere(subdivisions: int, radius: float) -> TriMesh:
    """Closed icosphere: icosahedron subdivided ``subdivisions`` times.

    Every vertex sits at distance ``radius`` from the origin. Combinatorics:
    V = 10*4^s + 2, F = 20*4^s, E = 30*4^s.
    """
    if subdivisions < 0:
        raise ValueError("subdivisions must be nonnegative")
    if subdivisions > 6:
        raise ValueError("subdivisions > 6 would explode the face count")
    if not radius > 0:
        raise ValueError("radius must be positive")

    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    verts = verts / np.linalg.norm(verts, axis=1, keepdims=True)

    for _ in range(subdivisions):
        vlist = list(verts)
        midpoint_cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            idx = midpoint_cache.get(key)
            if idx is None:
                m = vlist[a] + vlist[b]
                m = m / np.linalg.norm(m)
                idx = len(vlist)
                vlist.append(m)
                midpoint_cache[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
        verts = np.array(vlist)
        faces = np.array(new_faces, dtype=np.int64)

    return TriMesh(verts * radius, faces)


# ---------------------------------------------------------------------------
# Control-point deformation


def control_weights(vertices: np.ndarray, anchors: np.ndarray, bandwidth: float) -> np.ndarray:
    """Row-normalized Gaussian weights w_ij = exp(-|v_i - c_j|^2 / (2 sigma^2)).

    Rows whose weights all underflow to zero fall back to uniform weights.
    """
    d2 = ((vertices[:, None, :] - anchors[None, :, :]) ** 2).sum(axis=2)
    w = np.exp(-d2 / (2.0 * bandwidth * bandwidth))
    sums = w.sum(axis=1)
    dead = sums == 0.0
    if np.any(dead):
        w[dead] = 1.0 / len(anchors)
        sums[dead] = 1.0
    return w / sums[:, None]


def apply_control_points(base: TriMesh, c: ControlPointSet) -> TriMesh:
    """Deform ``base`` by the kernel-weighted average of control-point offsets.

    Vertex i moves by sum_j wbar_ij * offset_j; faces are unchanged. Linear in
    the offsets for fixed anchors/bandwidth, so the VJP is a plain transpose
    (see :func:`apply_control_points_vjp`).
    """
    if base.n_vertices < 1:
        raise ValueError("base mesh has no vertices")
    w = control_weights(base.vertices, c.anchors, c.bandwidth)
    return base.with_vertices(base.vertices + w @ c.offsets)


def apply_control_points_vjp(
    base: TriMesh, c: ControlPointSet, d_vertices: np.ndarray
) -> np.ndarray:
    """Cotangent of the deformed vertices pulled back to the offsets: W^T d V."""
    w = control_weights(base.vertices, c.anchors, c.bandwidth)
    return w.T @ np.asarray(d_vertices, dtype=np.float64).reshape(-1, 3)


def default_control_points(base: TriMesh, margin: float = 0.15) -> ControlPointSet:
    """3x3x3 bounding-box lattice (center excluded, K=26), zero offsets.

    Bandwidth defaults to 0.5 * bbox diagonal / 3. ``margin`` expands the box
    by that fraction of the diagonal so outer anchors sit off the surface.
    """
    lo, hi = base.bounding_box()
    diag = float(np.linalg.norm(hi - lo))
    lo = lo - margin * diag
    hi = hi + margin * diag
    axes = [np.linspace(lo[k], hi[k], 3) for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    anchors = np.delete(grid, 13, axis=0)  # drop the center node
    sigma = 0.5 * diag / 3.0
    return ControlPointSet(anchors=anchors, offsets=np.zeros_like(anchors), bandwidth=sigma)


# ---------------------------------------------------------------------------
# Surface sampling and jitter


def surface_sample(mesh: TriMesh, n: int, seed: int) -> PointCloud:
    """Area-weighted surface samples with provenance fixed by ``seed``.

    Under fixed provenance the positions are a linear (hence differentiable)
    function of the mesh vertices; see :func:`sample_positions`.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has no area to sample")
    rng = np.random.default_rng(seed)
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    u, v = rng.random(n), rng.random(n)
    su = np.sqrt(u)
    bary = np.stack([1.0 - su, su * (1.0 - v), su * v], axis=1)
    points = sample_positions(mesh, face_idx, bary)
    return PointCloud(points=points, face_indices=face_idx, barycentric=bary)


def sample_positions(mesh: TriMesh, face_indices: np.ndarray, barycentric: np.ndarray) -> np.ndarray:
    """Positions of provenance samples on the current vertices."""
    tri = mesh.vertices[mesh.faces[face_indices]]
    return np.einsum("nk,nkd->nd", barycentric, tri)


def sample_positions_vjp(
    mesh: TriMesh, face_indices: np.ndarray, barycentric: np.ndarray, d_points: np.ndarray
) -> np.ndarray:
    """Scatter point cotangents back to vertex cotangents via barycentric weights."""
    d_vertices = np.zeros_like(mesh.vertices)
    corners = mesh.faces[face_indices]  # (n, 3)
    contrib = barycentric[:, :, None] * np.asarray(d_points)[:, None, :]  # (n, 3, 3)
    np.add.at(d_vertices, corners.ravel(), contrib.reshape(-1, 3))
    return d_vertices


def vertex_jitter(mesh: TriMesh, sigma: float, seed: int) -> TriMesh:
    """Independent zero-mean Gaussian jitter of std ``sigma`` on every coordinate."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return mesh
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=mesh.vertices.shape)
    return mesh.with_vertices(mesh.vertices + noise)


# ---------------------------------------------------------------------------
# Gradcheck cases


def _control_points_case(seed: int):
    from .diffcore import DiffOp

    rng = np.random.default_rng(seed)
    base = make_icosphere(1, 0.5)
    control = default_control_points(base)
    offsets0 = 0.05 * rng.normal(size=control.offsets.shape)
    weight = rng.normal(size=base.vertices.shape)

    def forward(inputs):
        c = ControlPointSet(control.anchors, inputs[0], control.bandwidth)
        moved = apply_control_points(base, c)
        return np.asarray((weight * moved.vertices).sum())

    def vjp(inputs, cotangent):
        c = ControlPointSet(control.anchors, inputs[0], control.bandwidth)
        return [float(cotangent) * apply_control_points_vjp(base, c, weight)]

    op = DiffOp(
        name="geometry.apply_control_points",
        forward=forward,
        vjp=vjp,
        diff_mask=(True,),
    )
    return op, [offsets0], {}


def _sample_positions_case(seed: int):
    from .diffcore import DiffOp

    rng = np.random.default_rng(seed)
    base = make_icosphere(1, 0.5)
    cloud = surface_sample(base, 60, seed=seed + 11)
    weight = rng.normal(size=(len(cloud), 3))

    def forward(inputs):
        mesh = base.with_vertices(inputs[0])
        pts = sample_positions(mesh, cloud.face_indices, cloud.barycentric)
        return np.asarray((weight * pts).sum())

    def vjp(inputs, cotangent):
        mesh = base.with_vertices(inputs[0])
        return [
            float(cotangent)
            * sample_positions_vjp(mesh, cloud.face_indices, cloud.barycentric, weight)
        ]

    op = DiffOp(
        name="geometry.sample_positions", forward=forward, vjp=vjp, diff_mask=(True,)
    )
    return op, [base.vertices.copy()], {}


def _register_cases():
    from .diffcore import register_gradcheck_case

    register_gradcheck_case("geometry.apply_control_points", _control_points_case)
    register_gradcheck_case("geometry.sample_positions", _sample_positions_case)


_register_cases()
