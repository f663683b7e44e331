"""Bundled demo car: a boxy two-volume vehicle with a 256x256 infrared texture.

The mesh is 12 quad panels (24 triangles). Each panel owns a 64x64 texel
island in a 4x4 texture grid, with a 1-texel guard ring so pasted patterns
never bleed across islands through bilinear sampling. Side panels share one
island (a sticker pasted on the "door" shows on both sides), as do the two
cabin walls and the two window faces. Texture row y grows with UV v; panels
map their upper edge to the smaller v so islands read upright.

All build_* functions are deterministic; the bundled data files are their
frozen output and a test keeps them in sync.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from ..geometry import TriMesh, load_obj, save_obj
from ..images import load_gray, save_gray
from ..scene import CameraParams, CarModel, TextureMap

__all__ = [
    "build_demo_mesh",
    "build_demo_texture",
    "demo_regions",
    "demo_calibration",
    "build_demo_car",
    "demo_car",
    "write_demo_assets",
    "load_model",
]

TEXTURE_SIZE = 256
_CELL = 64

# Panel geometry (meters). Body box topped by a flush-width cabin.
_BODY = dict(x0=-0.55, x1=0.55, y0=-0.25, y1=0.25, z0=0.05, z1=0.30)
_CABIN = dict(x0=-0.35, x1=0.15, z1=0.52)


def _cell_uv(col: int, row: int):
    """UV corners of a 64-cell island, 1-texel guard, upright orientation.

    Returns (u0, v0, u1, v1) with (u0, v0) the top-left texel corner.
    """
    s = TEXTURE_SIZE - 1
    x0, y0 = _CELL * col + 1, _CELL * row + 1
    x1, y1 = _CELL * col + _CELL - 1, _CELL * row + _CELL - 1
    return x0 / s, y0 / s, x1 / s, y1 / s


def _quad(corners, island, flip_u=False):
    """One quad panel: 4 vertices (top-left, top-right, bottom-right,
    bottom-left seen from outside) mapped onto an island."""
    u0, v0, u1, v1 = _cell_uv(*island)
    if flip_u:
        u0, u1 = u1, u0
    uvs = [(u0, v0), (u1, v0), (u1, v1), (u0, v1)]
    return np.asarray(corners, dtype=np.float64), np.asarray(uvs, dtype=np.float64)


def build_demo_mesh() -> TriMesh:
    b, c = _BODY, _CABIN
    panels = [
        # Left body side (y = y1), door island, seen from +y: +x to the left.
        _quad(
            [
                (b["x1"], b["y1"], b["z1"]),
                (b["x0"], b["y1"], b["z1"]),
                (b["x0"], b["y1"], b["z0"]),
                (b["x1"], b["y1"], b["z0"]),
            ],
            (0, 0),
        ),
        # Right body side (y = y0) shares the door island, mirrored.
        _quad(
            [
                (b["x0"], b["y0"], b["z1"]),
                (b["x1"], b["y0"], b["z1"]),
                (b["x1"], b["y0"], b["z0"]),
                (b["x0"], b["y0"], b["z0"]),
            ],
            (0, 0),
            flip_u=True,
        ),
        # Cabin roof, seen from above: +x (front) at top of the island.
        _quad(
            [
                (c["x1"], b["y1"], c["z1"]),
                (c["x1"], b["y0"], c["z1"]),
                (c["x0"], b["y0"], c["z1"]),
                (c["x0"], b["y1"], c["z1"]),
            ],
            (1, 0),
        ),
        # Front deck (hood), top surface ahead of the cabin.
        _quad(
            [
                (b["x1"], b["y1"], b["z1"]),
                (b["x1"], b["y0"], b["z1"]),
                (c["x1"], b["y0"], b["z1"]),
                (c["x1"], b["y1"], b["z1"]),
            ],
            (2, 0),
        ),
        # Rear deck, top surface behind the cabin.
        _quad(
            [
                (c["x0"], b["y1"], b["z1"]),
                (c["x0"], b["y0"], b["z1"]),
                (b["x0"], b["y0"], b["z1"]),
                (b["x0"], b["y1"], b["z1"]),
            ],
            (3, 0),
        ),
        # Front face.
        _quad(
            [
                (b["x1"], b["y0"], b["z1"]),
                (b["x1"], b["y1"], b["z1"]),
                (b["x1"], b["y1"], b["z0"]),
                (b["x1"], b["y0"], b["z0"]),
            ],
            (0, 1),
        ),
        # Rear face.
        _quad(
            [
                (b["x0"], b["y1"], b["z1"]),
                (b["x0"], b["y0"], b["z1"]),
                (b["x0"], b["y0"], b["z0"]),
                (b["x0"], b["y1"], b["z0"]),
            ],
            (1, 1),
        ),
        # Cabin left wall.
        _quad(
            [
                (c["x1"], b["y1"], c["z1"]),
                (c["x0"], b["y1"], c["z1"]),
                (c["x0"], b["y1"], b["z1"]),
                (c["x1"], b["y1"], b["z1"]),
            ],
            (2, 1),
        ),
        # Cabin right wall, shared island.
        _quad(
            [
                (c["x0"], b["y0"], c["z1"]),
                (c["x1"], b["y0"], c["z1"]),
                (c["x1"], b["y0"], b["z1"]),
                (c["x0"], b["y0"], b["z1"]),
            ],
            (2, 1),
            flip_u=True,
        ),
        # Windshield (front cabin face).
        _quad(
            [
                (c["x1"], b["y0"], c["z1"]),
                (c["x1"], b["y1"], c["z1"]),
                (c["x1"], b["y1"], b["z1"]),
                (c["x1"], b["y0"], b["z1"]),
            ],
            (3, 1),
        ),
        # Backlight (rear cabin face), shared window island.
        _quad(
            [
                (c["x0"], b["y1"], c["z1"]),
                (c["x0"], b["y0"], c["z1"]),
                (c["x0"], b["y0"], b["z1"]),
                (c["x0"], b["y1"], b["z1"]),
            ],
            (3, 1),
            flip_u=True,
        ),
        # Floor (never visible from elev >= 0, closes the hull downward).
        _quad(
            [
                (b["x0"], b["y1"], b["z0"]),
                (b["x0"], b["y0"], b["z0"]),
                (b["x1"], b["y0"], b["z0"]),
                (b["x1"], b["y1"], b["z0"]),
            ],
            (0, 2),
        ),
    ]
    vertices = []
    uvs = []
    faces = []
    uv_faces = []
    for corners, uv4 in panels:
        base = len(vertices)
        vertices.extend(corners)
        uvs.extend(uv4)
        faces.append((base, base + 1, base + 2))
        faces.append((base, base + 2, base + 3))
        uv_faces.append((base, base + 1, base + 2))
        uv_faces.append((base, base + 2, base + 3))
    return TriMesh(
        vertices=np.asarray(vertices),
        faces=np.asarray(faces, dtype=np.int64),
        uvs=np.asarray(uvs),
        uv_faces=np.asarray(uv_faces, dtype=np.int64),
    )


def _cell_slice(col: int, row: int):
    return slice(_CELL * row, _CELL * (row + 1)), slice(_CELL * col, _CELL * (col + 1))


def _speckle(rng, shape, sigma):
    noise = rng.normal(0.0, sigma, size=shape)
    kernel = np.array([0.25, 0.5, 0.25])
    for axis in (0, 1):
        noise = np.apply_along_axis(lambda m: np.convolve(m, kernel, mode="same"), axis, noise)
    return noise


def build_demo_texture() -> np.ndarray:
    """Procedural grayscale infrared texture; bright = warm, dark = cold."""
    rng = np.random.default_rng(7)
    tex = np.full((TEXTURE_SIZE, TEXTURE_SIZE), 0.50)

    def paint(cell, level, sigma=0.02):
        sl = _cell_slice(*cell)
        tex[sl] = level + _speckle(rng, (_CELL, _CELL), sigma)

    paint((0, 0), 0.62)  # body sides (door island)
    paint((1, 0), 0.55)  # roof
    paint((2, 0), 0.78)  # hood deck, engine-warm
    paint((3, 0), 0.72)  # rear deck
    paint((0, 1), 0.70)  # front face
    paint((1, 1), 0.66)  # rear face
    paint((2, 1), 0.62)  # cabin walls
    paint((3, 1), 0.25, sigma=0.01)  # glass, cold
    paint((0, 2), 0.50, sigma=0.0)  # floor

    # Structure inside islands: grille, plate, cabin window cutouts.
    sl = _cell_slice(0, 1)
    tex[sl][34:54, 14:50] = 0.38  # grille on the front face
    sl = _cell_slice(1, 1)
    tex[sl][38:50, 20:44] = 0.82  # warm plate area on the rear face
    sl = _cell_slice(2, 1)
    tex[sl][10:40, 8:56] = 0.30  # side window band on the cabin walls
    # Dark wheel wells at the bottom corners of the body sides.
    sl = _cell_slice(0, 0)
    yy, xx = np.mgrid[0:_CELL, 0:_CELL]
    for cx in (12, 52):
        well = (xx - cx) ** 2 + (yy - 62) ** 2 <= 9.5**2
        tex[sl][well] = 0.33
    return np.clip(tex, 0.0, 1.0)


def demo_regions() -> dict[str, tuple[int, int, int, int]]:
    """Paste regions: interiors of the door, roof, hood, and rear islands."""

    def inset(col, row):
        return (_CELL * col + 2, _CELL * row + 2, _CELL * col + 62, _CELL * row + 62)

    return {
        "door": inset(0, 0),
        "roof": inset(1, 0),
        "hood": inset(2, 0),
        "rear": inset(3, 0),
    }


def demo_calibration() -> CameraParams:
    return CameraParams(dist=3.0, elev=25.0, azim=40.0, fov=60.0, width=256, height=256)


def build_demo_car() -> CarModel:
    return CarModel(
        mesh=build_demo_mesh(),
        texture=TextureMap(gray=build_demo_texture()),
        regions=demo_regions(),
        calibration=demo_calibration(),
        background=0.35,
    )


def write_demo_assets(out_dir) -> dict[str, str]:
    """Write car.obj, texture.png, and model.json into a directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_obj(build_demo_mesh(), out / "car.obj")
    save_gray(out / "texture.png", build_demo_texture())
    cal = demo_calibration()
    config = {
        "mesh": "car.obj",
        "texture": "texture.png",
        "regions": {k: list(v) for k, v in demo_regions().items()},
        "background": 0.35,
        "calibration": {
            "dist": cal.dist,
            "elev": cal.elev,
            "azim": cal.azim,
            "fov": cal.fov,
            "width": cal.width,
            "height": cal.height,
        },
    }
    (out / "model.json").write_text(json.dumps(config, indent=2) + "\n")
    return {name: str(out / name) for name in ("car.obj", "texture.png", "model.json")}


def load_model(config_path) -> CarModel:
    """Load a car model from a JSON config; paths resolve next to the file."""
    path = Path(config_path)
    config = json.loads(path.read_text())
    base = path.parent
    mesh = load_obj(base / config["mesh"])
    texture = TextureMap(gray=load_gray(base / config["texture"]))
    regions = {name: tuple(rect) for name, rect in config.get("regions", {}).items()}
    cal = config.get("calibration", {})
    calibration = CameraParams(
        dist=float(cal.get("dist", 3.0)),
        elev=float(cal.get("elev", 25.0)),
        azim=float(cal.get("azim", 40.0)),
        fov=float(cal.get("fov", 60.0)),
        width=int(cal.get("width", 256)),
        height=int(cal.get("height", 256)),
    )
    return CarModel(
        mesh=mesh,
        texture=texture,
        regions=regions,
        calibration=calibration,
        background=float(config.get("background", 0.35)),
    )


def demo_model_path() -> Path:
    """Path of the bundled model.json."""
    return Path(resources.files("shadowforge.assets") / "data" / "model.json")


def demo_car() -> CarModel:
    """Load the bundled demo car asset."""
    return load_model(demo_model_path())
