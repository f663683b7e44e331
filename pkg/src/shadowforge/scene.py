"""Scene assembly: texture compositing, EOT perturbations, camera, renderer.

The texture is a grayscale map bound to the car mesh by UVs. Patterns are
alpha-composited into it at continuous texel centers, and the renderer is a
depth-buffered, perspective-correct rasterizer whose output is differentiable
with respect to texture texel values (geometry is fixed). Pixel centers sit at
integer coordinates; UV (u, v) maps to texel coordinates (u*(W-1), v*(H-1)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import DiffOp, register_gradcheck_case
from .geometry import MeshError, TriMesh
from .shadow import PatternRaster

__all__ = [
    "TextureMap",
    "PastePlacement",
    "CameraParams",
    "RenderedImage",
    "EOTConfig",
    "EOTSample",
    "CarModel",
    "NoObjectError",
    "bilinear_sample",
    "bilinear_scatter",
    "paste_patterns",
    "paste_patterns_ctx",
    "paste_patterns_vjp",
    "apply_pattern_noise",
    "eot_sample",
    "camera_eye",
    "camera_matrix",
    "render",
    "render_ctx",
    "render_vjp",
    "silhouette_bbox",
]

_TINY = 1e-12


class NoObjectError(RuntimeError):
    """Raised when a rendered view contains no car pixels."""


@dataclass
class TextureMap:
    """Grayscale UV texture with values in [0, 1]."""

    gray: np.ndarray

    def __post_init__(self):
        self.gray = np.asarray(self.gray, dtype=np.float64)
        if self.gray.ndim != 2 or self.gray.size == 0:
            raise ValueError(f"texture must be nonempty 2D, got shape {self.gray.shape}")
        if np.any(self.gray < 0) or np.any(self.gray > 1):
            raise ValueError("texture values must lie in [0,1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.gray.shape


@dataclass
class PastePlacement:
    """Continuous paste center constrained to a texel-rect region.

    region is (x0, y0, x1, y1), half-open in texels; the center must satisfy
    x0 <= cx <= x1 - 1 and likewise for y.
    """

    center: np.ndarray
    region: tuple[int, int, int, int]
    region_name: str = ""

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(2)
        x0, y0, x1, y1 = self.region
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"empty region rect {self.region}")
        cx, cy = self.center
        if not (x0 - 1e-9 <= cx <= x1 - 1 + 1e-9 and y0 - 1e-9 <= cy <= y1 - 1 + 1e-9):
            raise ValueError(
                f"center {self.center.tolist()} outside region {self.region}"
                + (f" ({self.region_name})" if self.region_name else "")
            )

    def clamped(self, center: np.ndarray) -> np.ndarray:
        """Project a center back into the region bounds."""
        x0, y0, x1, y1 = self.region
        return np.array(
            [np.clip(center[0], x0, x1 - 1), np.clip(center[1], y0, y1 - 1)]
        )


@dataclass(frozen=True)
class CameraParams:
    """Spherical camera about a look-at point, plus perspective intrinsics."""

    dist: float
    elev: float
    azim: float
    fov: float = 60.0
    width: int = 256
    height: int = 256

    def __post_init__(self):
        if not self.dist > 0:
            raise ValueError(f"dist must be positive, got {self.dist}")
        if not 0.0 <= self.elev <= 90.0:
            raise ValueError(f"elev must be in [0, 90], got {self.elev}")
        if not 0.0 <= self.azim < 360.0:
            raise ValueError(f"azim must be in [0, 360), got {self.azim}")
        if not 10.0 < self.fov < 120.0:
            raise ValueError(f"fov must be in (10, 120), got {self.fov}")
        if self.width < 8 or self.height < 8:
            raise ValueError(f"image size too small: {self.width}x{self.height}")


@dataclass
class RenderedImage:
    gray: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.gray = np.asarray(self.gray, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.gray.shape != self.mask.shape:
            raise ValueError("gray and mask shapes differ")


@dataclass(frozen=True)
class EOTConfig:
    """Bounds for the per-iteration random perturbations."""

    vertex_sigma: float = 0.0
    noise_density: float = 0.0
    noise_amplitude: float = 0.0
    gray_delta: float = 0.0
    pos_delta: float = 0.0
    backgrounds: tuple[float, ...] = (0.35,)

    def __post_init__(self):
        if min(self.vertex_sigma, self.noise_density, self.noise_amplitude,
               self.gray_delta, self.pos_delta) < 0:
            raise ValueError("EOT bounds must be nonnegative")
        if len(self.backgrounds) == 0:
            raise ValueError("background pool must be nonempty")


@dataclass
class EOTSample:
    """One draw of the EOT perturbations (deterministic per seed)."""

    vertex_sigma: float
    noise_density: float
    noise_amplitude: float
    gray_delta: float
    pos_delta: np.ndarray
    background_id: int
    background: float
    noise_seed: int


@dataclass
class CarModel:
    """Car mesh with its texture, paste regions, and calibration view."""

    mesh: TriMesh
    texture: TextureMap
    regions: dict[str, tuple[int, int, int, int]] = field(default_factory=dict)
    calibration: CameraParams = CameraParams(dist=3.0, elev=25.0, azim=40.0)
    background: float = 0.35


# ---------------------------------------------------------------------------
# Bilinear sampling


@dataclass
class BilinearCtx:
    y0: np.ndarray
    x0: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    shape: tuple[int, int]


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Bilinearly sample img at continuous (x=col, y=row), clamped at borders.

    Returns (values, d/dx, d/dy, ctx); the position derivatives are zeroed
    where clamping is active, and ctx drives bilinear_scatter for the value
    VJP.
    """
    height, width = img.shape
    x = np.clip(xs, 0.0, width - 1.0)
    y = np.clip(ys, 0.0, height - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(width - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(height - 2, 0))
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    a00 = img[y0, x0]
    a01 = img[y0, x1]
    a10 = img[y1, x0]
    a11 = img[y1, x1]
    top = (1.0 - fx) * a00 + fx * a01
    bot = (1.0 - fx) * a10 + fx * a11
    values = (1.0 - fy) * top + fy * bot
    gx = (1.0 - fy) * (a01 - a00) + fy * (a11 - a10)
    gy = bot - top
    gx = np.where((xs >= 0.0) & (xs <= width - 1.0), gx, 0.0)
    gy = np.where((ys >= 0.0) & (ys <= height - 1.0), gy, 0.0)
    return values, gx, gy, BilinearCtx(y0, x0, fx, fy, (height, width))


def bilinear_scatter(ctx: BilinearCtx, d_values: np.ndarray) -> np.ndarray:
    """Accumulate sample cotangents back onto the source grid."""
    height, width = ctx.shape
    out = np.zeros(height * width)
    x1 = np.minimum(ctx.x0 + 1, width - 1)
    y1 = np.minimum(ctx.y0 + 1, height - 1)
    flat00 = (ctx.y0 * width + ctx.x0).ravel()
    flat01 = (ctx.y0 * width + x1).ravel()
    flat10 = (y1 * width + ctx.x0).ravel()
    flat11 = (y1 * width + x1).ravel()
    fx = ctx.fx.ravel()
    fy = ctx.fy.ravel()
    dv = np.asarray(d_values, dtype=np.float64).ravel()
    np.add.at(out, flat00, dv * (1.0 - fx) * (1.0 - fy))
    np.add.at(out, flat01, dv * fx * (1.0 - fy))
    np.add.at(out, flat10, dv * (1.0 - fx) * fy)
    np.add.at(out, flat11, dv * fx * fy)
    return out.reshape(height, width)


# ---------------------------------------------------------------------------
# Paste operation


@dataclass
class _PastePatternCtx:
    window: tuple[slice, slice]
    bil: BilinearCtx
    resampled: np.ndarray
    gx: np.ndarray
    gy: np.ndarray
    before: np.ndarray
    alpha_shape: tuple[int, int]
    gray: float


@dataclass
class PasteCtx:
    patterns: list
    preclip: np.ndarray


def _paste_window(alpha_shape, offset, region, texture_shape):
    h, w = alpha_shape
    x0r, y0r, x1r, y1r = region
    ox, oy = offset
    # Bilinear support of the shifted raster is the open box (o-1, o+size).
    x_lo = int(math.floor(ox - 1.0)) + 1
    x_hi = int(math.ceil(ox + w)) - 1
    y_lo = int(math.floor(oy - 1.0)) + 1
    y_hi = int(math.ceil(oy + h)) - 1
    clipped = x_lo < x0r or y_lo < y0r or x_hi > x1r - 1 or y_hi > y1r - 1
    x_lo = max(x_lo, x0r, 0)
    y_lo = max(y_lo, y0r, 0)
    x_hi = min(x_hi, x1r - 1, texture_shape[1] - 1)
    y_hi = min(y_hi, y1r - 1, texture_shape[0] - 1)
    if x_lo > x_hi or y_lo > y_hi:
        return None, clipped
    return (slice(y_lo, y_hi + 1), slice(x_lo, x_hi + 1)), clipped


def paste_patterns_ctx(
    origin: TextureMap,
    patterns: list[PatternRaster],
    placements: list[PastePlacement],
    warnings: list | None = None,
) -> tuple[TextureMap, PasteCtx]:
    """Sequential alpha compositing of patterns into the texture, with VJP ctx.

    Each pattern's alpha is bilinearly resampled at the continuous offset
    (center - raster center), restricted to its placement region, then
    T <- (1 - a)*T + a*gray. The final map is clamped to [0, 1].
    """
    if len(patterns) != len(placements):
        raise ValueError(
            f"pattern/placement count mismatch: {len(patterns)} vs {len(placements)}"
        )
    tex = origin.gray.copy()
    ctxs = []
    for k, (pattern, placement) in enumerate(zip(patterns, placements)):
        h, w = pattern.alpha.shape
        raster_center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        offset = placement.center - raster_center
        window, clipped = _paste_window(
            (h, w), offset, placement.region, tex.shape
        )
        if clipped and warnings is not None:
            name = placement.region_name or f"pattern {k}"
            warnings.append(f"pattern {k} clipped to region bounds ({name})")
        if window is None:
            ctxs.append(None)
            continue
        ys, xs = np.mgrid[window[0], window[1]]
        padded = np.pad(pattern.alpha, 1)
        src_x = xs.astype(np.float64) - offset[0] + 1.0
        src_y = ys.astype(np.float64) - offset[1] + 1.0
        resampled, gx, gy, bil = bilinear_sample(padded, src_x, src_y)
        before = tex[window].copy()
        tex[window] = (1.0 - resampled) * before + resampled * pattern.gray
        ctxs.append(
            _PastePatternCtx(window, bil, resampled, gx, gy, before, (h, w), pattern.gray)
        )
    preclip = tex
    return TextureMap(gray=np.clip(tex, 0.0, 1.0)), PasteCtx(ctxs, preclip)


def paste_patterns(
    origin: TextureMap,
    patterns: list[PatternRaster],
    placements: list[PastePlacement],
    warnings: list | None = None,
) -> TextureMap:
    return paste_patterns_ctx(origin, patterns, placements, warnings)[0]


def paste_patterns_vjp(ctx: PasteCtx, d_texture: np.ndarray):
    """Cotangents for (origin texture, [(alpha, gray, center) per pattern])."""
    pass_mask = (ctx.preclip > 0.0) & (ctx.preclip < 1.0)
    d_tex = np.asarray(d_texture, dtype=np.float64) * pass_mask
    d_tex = d_tex.copy()
    per_pattern = [None] * len(ctx.patterns)
    for k in range(len(ctx.patterns) - 1, -1, -1):
        pctx = ctx.patterns[k]
        if pctx is None:
            per_pattern[k] = (None, 0.0, np.zeros(2))
            continue
        d_win = d_tex[pctx.window]
        d_resampled = d_win * (pctx.gray - pctx.before)
        d_gray = float((d_win * pctx.resampled).sum())
        d_padded = bilinear_scatter(pctx.bil, d_resampled)
        h, w = pctx.alpha_shape
        d_alpha = d_padded[1 : h + 1, 1 : w + 1]
        # src = texel - offset, offset = center - raster_center.
        d_center = np.array(
            [-float((d_resampled * pctx.gx).sum()), -float((d_resampled * pctx.gy).sum())]
        )
        per_pattern[k] = (d_alpha, d_gray, d_center)
        d_tex[pctx.window] = d_win * (1.0 - pctx.resampled)
    return d_tex, per_pattern


# ---------------------------------------------------------------------------
# EOT sampling


def apply_pattern_noise(
    alpha: np.ndarray, density: float, amplitude: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Salt-and-pepper noise on a coverage map, clipped to [0, 1].

    Returns the noisy map and the pass-through mask for the VJP (zero where
    clipping was active).
    """
    if density > 0.0 and amplitude > 0.0:
        rng = np.random.default_rng(seed)
        u = rng.random(alpha.shape)
        delta = np.where(u < density / 2.0, amplitude, 0.0)
        delta = np.where(u > 1.0 - density / 2.0, -amplitude, delta)
        raw = alpha + delta
    else:
        raw = alpha
    noisy = np.clip(raw, 0.0, 1.0)
    return noisy, (raw > 0.0) & (raw < 1.0)


def eot_sample(config: EOTConfig, seed: int) -> EOTSample:
    """Draw one set of EOT perturbations; deterministic per seed."""
    rng = np.random.default_rng(seed)
    gray_delta = float(rng.uniform(-config.gray_delta, config.gray_delta)) \
        if config.gray_delta > 0 else 0.0
    pos_delta = rng.uniform(-config.pos_delta, config.pos_delta, size=2) \
        if config.pos_delta > 0 else np.zeros(2)
    background_id = int(rng.integers(len(config.backgrounds)))
    noise_seed = int(rng.integers(2**63 - 1))
    return EOTSample(
        vertex_sigma=config.vertex_sigma,
        noise_density=config.noise_density,
        noise_amplitude=config.noise_amplitude,
        gray_delta=gray_delta,
        pos_delta=pos_delta,
        background_id=background_id,
        background=float(config.backgrounds[background_id]),
        noise_seed=noise_seed,
    )


# ---------------------------------------------------------------------------
# Camera


def camera_eye(cam: CameraParams, centroid) -> np.ndarray:
    """Eye position at spherical (dist, elev, azim) about the look-at point."""
    centroid = np.asarray(centroid, dtype=np.float64)
    e = math.radians(cam.elev)
    a = math.radians(cam.azim)
    direction = np.array(
        [math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)]
    )
    return centroid + cam.dist * direction


def _camera_basis(cam: CameraParams, centroid):
    centroid = np.asarray(centroid, dtype=np.float64)
    eye = camera_eye(cam, centroid)
    forward = centroid - eye
    forward = forward / np.linalg.norm(forward)
    # At elev 90 the view axis is -z and the world up degenerates; fall back
    # to +x as the up reference.
    up_ref = np.array([1.0, 0.0, 0.0]) if cam.elev >= 90.0 - 1e-12 else np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up_ref)
    right = right / np.linalg.norm(right)
    up = np.cross(right, forward)
    return eye, right, up, forward


def camera_matrix(cam: CameraParams, centroid=(0.0, 0.0, 0.0)) -> np.ndarray:
    """4x4 view-projection matrix (column vectors: clip = M @ [p, 1])."""
    eye, right, up, forward = _camera_basis(cam, centroid)
    view = np.eye(4)
    view[0, :3], view[1, :3], view[2, :3] = right, up, forward
    view[:3, 3] = -view[:3, :3] @ eye
    half_h = math.tan(math.radians(cam.fov) / 2.0)
    half_w = half_h * cam.width / cam.height
    proj = np.array(
        [
            [1.0 / half_w, 0.0, 0.0, 0.0],
            [0.0, 1.0 / half_h, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ]
    )
    return proj @ view


_NEAR = 0.05


def _clip_near(pos: np.ndarray, uv: np.ndarray):
    """Sutherland-Hodgman clip of one camera-space triangle against z >= near."""
    out_pos: list[np.ndarray] = []
    out_uv: list[np.ndarray] = []
    for i in range(3):
        a_p, b_p = pos[i], pos[(i + 1) % 3]
        a_uv, b_uv = uv[i], uv[(i + 1) % 3]
        a_in = a_p[2] >= _NEAR
        b_in = b_p[2] >= _NEAR
        if a_in:
            out_pos.append(a_p)
            out_uv.append(a_uv)
        if a_in != b_in:
            t = (_NEAR - a_p[2]) / (b_p[2] - a_p[2])
            out_pos.append(a_p + t * (b_p - a_p))
            out_uv.append(a_uv + t * (b_uv - a_uv))
    return out_pos, out_uv


@dataclass
class RenderCtx:
    bil: BilinearCtx | None
    rows: np.ndarray
    cols: np.ndarray
    image_shape: tuple[int, int]
    texture_shape: tuple[int, int]


def render_ctx(
    car: TriMesh, texture: TextureMap, cam: CameraParams, background=0.35
) -> tuple[RenderedImage, RenderCtx]:
    """Depth-buffered perspective render, returning a ctx for the texture VJP.

    Perspective-correct UV interpolation, bilinear texture sampling, constant
    or image background. Gradients flow to texture texels only; the geometry
    is fixed.
    """
    if car.uvs is None or car.uv_faces is None:
        raise MeshError("car mesh has no UV coordinates; render requires UVs")
    width, height = cam.width, cam.height
    eye, right, up, forward = _camera_basis(cam, car.centroid())
    cam_coords = (car.vertices - eye) @ np.stack([right, up, forward]).T
    half_h = math.tan(math.radians(cam.fov) / 2.0)
    half_w = half_h * width / height
    zbuf = np.full((height, width), np.inf)
    # Winner per pixel: perspective-correct texel coordinates to sample later.
    tex_x = np.zeros((height, width))
    tex_y = np.zeros((height, width))
    mask = np.zeros((height, width), dtype=bool)
    th, tw = texture.shape

    def raster_triangle(pos3: np.ndarray, uv3: np.ndarray):
        z = pos3[:, 2]
        px = (pos3[:, 0] / (z * half_w) + 1.0) * 0.5 * width - 0.5
        py = (1.0 - pos3[:, 1] / (z * half_h)) * 0.5 * height - 0.5
        c0 = max(0, int(math.floor(px.min())))
        c1 = min(width - 1, int(math.ceil(px.max())))
        r0 = max(0, int(math.floor(py.min())))
        r1 = min(height - 1, int(math.ceil(py.max())))
        if c0 > c1 or r0 > r1:
            return
        area2 = (px[1] - px[0]) * (py[2] - py[0]) - (py[1] - py[0]) * (px[2] - px[0])
        if abs(area2) < _TINY:
            return
        X, Y = np.meshgrid(
            np.arange(c0, c1 + 1, dtype=np.float64),
            np.arange(r0, r1 + 1, dtype=np.float64),
        )
        lam0 = ((px[1] - X) * (py[2] - Y) - (py[1] - Y) * (px[2] - X)) / area2
        lam1 = ((px[2] - X) * (py[0] - Y) - (py[2] - Y) * (px[0] - X)) / area2
        lam2 = 1.0 - lam0 - lam1
        inside = (lam0 >= 0.0) & (lam1 >= 0.0) & (lam2 >= 0.0)
        if not np.any(inside):
            return
        inv_z = lam0 / z[0] + lam1 / z[1] + lam2 / z[2]
        z_int = 1.0 / np.maximum(inv_z, _TINY)
        window = (slice(r0, r1 + 1), slice(c0, c1 + 1))
        win = inside & (z_int < zbuf[window])
        if not np.any(win):
            return
        u_over_z = lam0 * uv3[0, 0] / z[0] + lam1 * uv3[1, 0] / z[1] + lam2 * uv3[2, 0] / z[2]
        v_over_z = lam0 * uv3[0, 1] / z[0] + lam1 * uv3[1, 1] / z[1] + lam2 * uv3[2, 1] / z[2]
        u = u_over_z * z_int
        v = v_over_z * z_int
        zbuf[window] = np.where(win, z_int, zbuf[window])
        tex_x[window] = np.where(win, u * (tw - 1), tex_x[window])
        tex_y[window] = np.where(win, v * (th - 1), tex_y[window])
        mask[window] |= win

    for face_idx in range(car.n_faces):
        pos = cam_coords[car.faces[face_idx]]
        uv = car.uvs[car.uv_faces[face_idx]]
        if np.all(pos[:, 2] >= _NEAR):
            raster_triangle(pos, uv)
            continue
        poly_pos, poly_uv = _clip_near(pos, uv)
        for k in range(1, len(poly_pos) - 1):
            raster_triangle(
                np.stack([poly_pos[0], poly_pos[k], poly_pos[k + 1]]),
                np.stack([poly_uv[0], poly_uv[k], poly_uv[k + 1]]),
            )

    if np.isscalar(background) or isinstance(background, float):
        gray = np.full((height, width), float(background))
    else:
        bg = np.asarray(background, dtype=np.float64)
        bx = np.linspace(0.0, bg.shape[1] - 1.0, width)
        by = np.linspace(0.0, bg.shape[0] - 1.0, height)
        gray, _, _, _ = bilinear_sample(bg, *np.meshgrid(bx, by))
    rows, cols = np.nonzero(mask)
    if len(rows):
        values, _, _, bil = bilinear_sample(
            texture.gray, np.clip(tex_x[rows, cols], 0, tw - 1),
            np.clip(tex_y[rows, cols], 0, th - 1)
        )
        gray[rows, cols] = values
    else:
        bil = None
    img = RenderedImage(gray=np.clip(gray, 0.0, 1.0), mask=mask)
    return img, RenderCtx(bil, rows, cols, (height, width), texture.shape)


def render(
    car: TriMesh, texture: TextureMap, cam: CameraParams, background=0.35
) -> RenderedImage:
    return render_ctx(car, texture, cam, background)[0]


def render_vjp(ctx: RenderCtx, d_gray: np.ndarray) -> np.ndarray:
    """Scatter image cotangents back to texture texels through the bilinear taps."""
    if ctx.bil is None:
        return np.zeros(ctx.texture_shape)
    d = np.asarray(d_gray, dtype=np.float64)[ctx.rows, ctx.cols]
    return bilinear_scatter(ctx.bil, d)


def silhouette_bbox(img: RenderedImage) -> tuple[int, int, int, int]:
    """Tight inclusive pixel box (x1, y1, x2, y2) of the car mask."""
    rows = np.any(img.mask, axis=1)
    cols = np.any(img.mask, axis=0)
    if not rows.any():
        raise NoObjectError("no object: rendered mask is empty")
    r = np.flatnonzero(rows)
    c = np.flatnonzero(cols)
    return int(c[0]), int(r[0]), int(c[-1]), int(r[-1])


# ---------------------------------------------------------------------------
# Gradcheck cases


def _quad_mesh() -> TriMesh:
    # Unit square in the xz plane, facing +y, with full-texture UVs.
    vertices = np.array(
        [
            [-0.5, 0.0, -0.5],
            [0.5, 0.0, -0.5],
            [0.5, 0.0, 0.5],
            [-0.5, 0.0, 0.5],
        ]
    )
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    uvs = np.array([[0.0, 1.0], [1.0, 1.0], [1.0, 0.0], [0.0, 0.0]])
    uv_faces = np.array([[0, 1, 2], [0, 2, 3]])
    return TriMesh(vertices=vertices, faces=faces, uvs=uvs, uv_faces=uv_faces)


def _smooth_alpha(rng, size: int) -> np.ndarray:
    base = rng.uniform(0.1, 0.9, size=(size, size))
    kernel = np.array([0.25, 0.5, 0.25])
    for axis in (0, 1):
        base = np.apply_along_axis(lambda m: np.convolve(m, kernel, mode="same"), axis, base)
    return np.clip(base, 0.05, 0.95)


def _paste_case(seed: int):
    rng = np.random.default_rng(seed)
    origin = TextureMap(gray=rng.uniform(0.3, 0.7, size=(24, 24)))
    alpha = _smooth_alpha(rng, 8)
    region = (2, 2, 22, 22)

    def run(inputs):
        pattern = PatternRaster(alpha=np.clip(inputs[0], 0.0, 1.0), gray=float(inputs[1]))
        placement = PastePlacement(center=inputs[2].copy(), region=region)
        return paste_patterns_ctx(origin, [pattern], [placement])

    def forward(inputs):
        return run(inputs)[0].gray

    def vjp(inputs, cotangent):
        _, ctx = run(inputs)
        _, per_pattern = paste_patterns_vjp(ctx, cotangent)
        d_alpha, d_gray, d_center = per_pattern[0]
        return [d_alpha, np.asarray(d_gray), d_center]

    op = DiffOp("scene.paste", forward, vjp, (True, True, True))
    return op, [alpha, np.asarray(0.2), np.array([12.3, 11.6])], {}


def _render_case(seed: int):
    rng = np.random.default_rng(seed)
    mesh = _quad_mesh()
    cam = CameraParams(dist=2.0, elev=20.0, azim=75.0, fov=60.0, width=32, height=32)
    texture0 = rng.uniform(0.2, 0.8, size=(16, 16))

    def forward(inputs):
        img, _ = render_ctx(mesh, TextureMap(gray=np.clip(inputs[0], 0, 1)), cam, 0.35)
        return img.gray

    def vjp(inputs, cotangent):
        _, ctx = render_ctx(mesh, TextureMap(gray=np.clip(inputs[0], 0, 1)), cam, 0.35)
        return [render_vjp(ctx, cotangent)]

    op = DiffOp("scene.render_texture", forward, vjp, (True,))
    return op, [texture0], {}


def _render_paste_case(seed: int):
    rng = np.random.default_rng(seed)
    mesh = _quad_mesh()
    cam = CameraParams(dist=2.2, elev=15.0, azim=80.0, fov=60.0, width=64, height=64)
    origin = TextureMap(gray=rng.uniform(0.4, 0.6, size=(32, 32)))
    alpha = _smooth_alpha(rng, 10)
    region = (4, 4, 28, 28)

    def run(inputs):
        pattern = PatternRaster(alpha=alpha, gray=float(inputs[0]))
        placement = PastePlacement(center=inputs[1].copy(), region=region)
        pasted, pctx = paste_patterns_ctx(origin, [pattern], [placement])
        img, rctx = render_ctx(mesh, pasted, cam, 0.35)
        return img, pctx, rctx

    def forward(inputs):
        return run(inputs)[0].gray

    def vjp(inputs, cotangent):
        _, pctx, rctx = run(inputs)
        d_texture = render_vjp(rctx, cotangent)
        _, per_pattern = paste_patterns_vjp(pctx, d_texture)
        _, d_gray, d_center = per_pattern[0]
        return [np.asarray(d_gray), d_center]

    op = DiffOp("scene.render_paste_chain", forward, vjp, (True, True))
    return op, [np.asarray(0.2), np.array([16.3, 15.8])], {"tol": 1e-3}


register_gradcheck_case("scene.paste", _paste_case)
register_gradcheck_case("scene.render_texture", _render_case)
register_gradcheck_case("scene.render_paste_chain", _render_paste_case)
