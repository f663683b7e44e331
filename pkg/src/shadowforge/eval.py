"""Full-angle evaluation: ASR over a camera grid, bridge client, sticker export.

A texture is judged by rendering the car from every grid view and asking a
detector for boxes: a view counts as detected when some detection clears both
the confidence threshold and the IOU threshold against the silhouette box.
ASR is the fraction of counted views left undetected. Views where the car
mask is empty are excluded (the measurement needs a car in frame), as are
views where the detector itself failed; both are reported.

The bridge client speaks a fixed HTTP protocol (POST /detect with a base64
grayscale PNG) so external detector services can be measured black-box.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests

from .images import png_base64, save_gray
from .objective import Detection
from .scene import CameraParams, CarModel, NoObjectError, TextureMap, render, silhouette_bbox
from .shadow import PatternRaster

__all__ = [
    "BridgeProtocolError",
    "BridgeTransportError",
    "EmptyStickerError",
    "EvalGrid",
    "ViewRecord",
    "ASRReport",
    "default_grid",
    "reduced_grid",
    "iou",
    "compute_asr",
    "detect_remote",
    "BridgeDetector",
    "marching_squares",
    "sticker_polygons",
    "export_sticker",
    "export_report",
]

logger = logging.getLogger("shadowforge.eval")


class BridgeTransportError(RuntimeError):
    """The detector endpoint stayed unreachable through all retries."""


class BridgeProtocolError(RuntimeError):
    """The endpoint answered, but not with a schema-valid bridge response."""


class EmptyStickerError(ValueError):
    """No alpha region above the export threshold."""


# ---------------------------------------------------------------------------
# Grid and report types


@dataclass(frozen=True)
class EvalGrid:
    """Evaluation viewpoints: the cross product of three axis value lists."""

    azims: tuple[float, ...]
    elevs: tuple[float, ...]
    dists: tuple[float, ...]

    def __post_init__(self):
        for name, values in (("azims", self.azims), ("elevs", self.elevs), ("dists", self.dists)):
            if not values:
                raise ValueError(f"{name} must be nonempty")
            if len(set(values)) != len(values):
                raise ValueError(f"duplicate values in {name}")
        if any(not 0.0 <= a < 360.0 for a in self.azims):
            raise ValueError("azim values must be in [0, 360)")
        if any(not 0.0 <= e <= 90.0 for e in self.elevs):
            raise ValueError("elev values must be in [0, 90]")
        if any(not d > 0.0 for d in self.dists):
            raise ValueError("dist values must be positive")

    @property
    def n_views(self) -> int:
        return len(self.azims) * len(self.elevs) * len(self.dists)

    def cameras(self, fov: float, width: int, height: int) -> list[CameraParams]:
        """All grid cameras in fixed (azim, elev, dist) iteration order."""
        return [
            CameraParams(dist=d, elev=e, azim=a, fov=fov, width=width, height=height)
            for a in self.azims
            for e in self.elevs
            for d in self.dists
        ]


def default_grid() -> EvalGrid:
    """Full-angle grid: azim every 20 deg, elev every 6 deg, dist every 1 m."""
    return EvalGrid(
        azims=tuple(float(a) for a in range(0, 360, 20)),
        elevs=tuple(float(e) for e in range(0, 91, 6)),
        dists=tuple(float(d) for d in range(1, 9)),
    )


def reduced_grid() -> EvalGrid:
    """Small 6x6x3 sub-lattice of the default grid for quick comparative runs.

    Values are chosen from the default lattice so they cover the template
    detector's operating region (the calibration-side azimuths and their
    mirror lobe); elsewhere the clean detector never fires and an ASR delta
    would measure nothing.
    """
    return EvalGrid(
        azims=(20.0, 40.0, 60.0, 200.0, 220.0, 240.0),
        elevs=(6.0, 12.0, 18.0, 24.0, 30.0, 36.0),
        dists=(2.0, 3.0, 4.0),
    )


@dataclass
class ViewRecord:
    """Outcome of one grid view."""

    azim: float
    elev: float
    dist: float
    detected: bool | None  # None: excluded (empty mask) or errored
    best_score: float = 0.0
    best_iou: float = 0.0
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "azim": self.azim, "elev": self.elev, "dist": self.dist,
            "detected": self.detected, "best_score": self.best_score,
            "best_iou": self.best_iou, "error": self.error,
        }


def _marginal(records: list[ViewRecord], axis: str) -> dict[float, float | None]:
    values = sorted({getattr(r, axis) for r in records})
    out = {}
    for v in values:
        counted = [r for r in records if getattr(r, axis) == v and r.detected is not None]
        out[v] = (
            sum(1 for r in counted if not r.detected) / len(counted) if counted else None
        )
    return out


@dataclass
class ASRReport:
    """Attack success rate plus everything needed to recompute it."""

    records: list[ViewRecord]
    conf_thresh: float
    iou_thresh: float
    counted: int
    undetected: int
    excluded: int
    errored: int
    overall_asr: float
    marginal_azim: dict[float, float | None] = field(default_factory=dict)
    marginal_elev: dict[float, float | None] = field(default_factory=dict)
    marginal_dist: dict[float, float | None] = field(default_factory=dict)

    @classmethod
    def from_records(
        cls, records: list[ViewRecord], conf_thresh: float, iou_thresh: float
    ) -> "ASRReport":
        counted = [r for r in records if r.detected is not None]
        undetected = sum(1 for r in counted if not r.detected)
        excluded = sum(1 for r in records if r.detected is None and r.error is None)
        errored = sum(1 for r in records if r.error is not None)
        return cls(
            records=records,
            conf_thresh=conf_thresh,
            iou_thresh=iou_thresh,
            counted=len(counted),
            undetected=undetected,
            excluded=excluded,
            errored=errored,
            overall_asr=undetected / len(counted) if counted else 0.0,
            marginal_azim=_marginal(records, "azim"),
            marginal_elev=_marginal(records, "elev"),
            marginal_dist=_marginal(records, "dist"),
        )

    def to_dict(self) -> dict:
        def keyed(marginal):
            return {str(k): v for k, v in marginal.items()}

        return {
            "conf_thresh": self.conf_thresh,
            "iou_thresh": self.iou_thresh,
            "counted": self.counted,
            "undetected": self.undetected,
            "excluded": self.excluded,
            "errored": self.errored,
            "overall_asr": self.overall_asr,
            "marginal_azim": keyed(self.marginal_azim),
            "marginal_elev": keyed(self.marginal_elev),
            "marginal_dist": keyed(self.marginal_dist),
            "records": [r.to_dict() for r in self.records],
        }


# ---------------------------------------------------------------------------
# ASR computation


def iou(a, b) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0.0 else 0.0


def default_workers() -> int:
    env = os.environ.get("SHADOWFORGE_WORKERS", "")
    if env.strip():
        try:
            n = int(env)
        except ValueError as e:
            raise ValueError(f"SHADOWFORGE_WORKERS must be an integer, got {env!r}") from e
        if n < 1:
            raise ValueError("SHADOWFORGE_WORKERS must be >= 1")
        return n
    return 1


def compute_asr(
    model: CarModel,
    texture: TextureMap | None,
    detector,
    grid: EvalGrid,
    conf_thresh: float = 0.6,
    iou_thresh: float = 0.5,
    fov: float | None = None,
    width: int | None = None,
    height: int | None = None,
    workers: int | None = None,
) -> ASRReport:
    """Render every grid view and measure the undetected fraction.

    ``detector`` needs an ``evaluate(image) -> [Detection]`` capability.
    Image geometry defaults to the model's calibration camera. Views are
    evaluated concurrently but recorded in fixed grid order.
    """
    if not hasattr(detector, "evaluate"):
        raise TypeError(f"{type(detector).__name__} has no evaluate capability")
    texture = texture if texture is not None else model.texture
    cal = model.calibration
    cams = grid.cameras(
        fov if fov is not None else cal.fov,
        width if width is not None else cal.width,
        height if height is not None else cal.height,
    )
    workers = workers if workers is not None else default_workers()

    def eval_view(cam: CameraParams) -> ViewRecord:
        record = ViewRecord(azim=cam.azim, elev=cam.elev, dist=cam.dist, detected=None)
        img = render(model.mesh, texture, cam, model.background)
        try:
            x1, y1, x2, y2 = silhouette_bbox(img)
        except NoObjectError:
            return record  # excluded: car not in frame
        gt = (float(x1), float(y1), float(x2 + 1), float(y2 + 1))
        try:
            detections = detector.evaluate(img.gray)
        except Exception as e:  # detector failure: excluded, reported
            record.error = f"{type(e).__name__}: {e}"
            return record
        best_score = 0.0
        best_iou = 0.0
        detected = False
        for det in detections:
            overlap = iou(det.bbox, gt)
            best_iou = max(best_iou, overlap)
            if overlap >= iou_thresh:
                best_score = max(best_score, det.score)
                if det.score >= conf_thresh:
                    detected = True
        record.detected = detected
        record.best_score = best_score
        record.best_iou = best_iou
        return record

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(eval_view, cams))
    else:
        records = [eval_view(cam) for cam in cams]
    return ASRReport.from_records(records, conf_thresh, iou_thresh)


# ---------------------------------------------------------------------------
# Bridge client


def _require_number(obj: dict, key: str, payload: str):
    v = obj.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise BridgeProtocolError(f"bridge field {key!r} is not a finite number; payload: {payload}")
    return float(v)


def _parse_bridge_response(data, payload: str) -> list[Detection]:
    if not isinstance(data, dict) or not isinstance(data.get("detections"), list):
        raise BridgeProtocolError(f"bridge response lacks a detections list; payload: {payload}")
    if not isinstance(data.get("model"), str):
        raise BridgeProtocolError(f"bridge response lacks a model string; payload: {payload}")
    detections = []
    for obj in data["detections"]:
        if not isinstance(obj, dict):
            raise BridgeProtocolError(f"bridge detection is not an object; payload: {payload}")
        coords = {k: _require_number(obj, k, payload) for k in ("x1", "y1", "x2", "y2")}
        score = _require_number(obj, "score", payload)
        label = obj.get("label")
        if not isinstance(label, str):
            raise BridgeProtocolError(f"bridge detection lacks a label; payload: {payload}")
        if not 0.0 <= score <= 1.0:
            raise BridgeProtocolError(f"bridge score {score} outside [0, 1]; payload: {payload}")
        try:
            detections.append(
                Detection(
                    bbox=(coords["x1"], coords["y1"], coords["x2"], coords["y2"]),
                    score=score,
                    label=label,
                )
            )
        except ValueError as e:
            raise BridgeProtocolError(f"bridge box invalid ({e}); payload: {payload}") from e
    return detections


def detect_remote(
    endpoint: str,
    image: np.ndarray,
    conf_thresh: float,
    timeout: float = 10.0,
    attempts: int = 3,
    backoff: float = 0.5,
) -> list[Detection]:
    """POST the image to a bridge endpoint and parse the detections.

    Transport failures (connection errors, timeouts, 5xx) are retried
    ``attempts`` times with exponential backoff; schema violations are not.
    """
    url = endpoint.rstrip("/") + "/detect"
    body = {"image_png_base64": png_base64(image), "score_threshold": float(conf_thresh)}
    last: Exception | None = None
    for attempt in range(attempts):
        if attempt > 0:
            time.sleep(backoff * 2 ** (attempt - 1))
        try:
            resp = requests.post(url, json=body, timeout=timeout)
        except requests.RequestException as e:
            last = e
            continue
        if resp.status_code >= 500:
            last = BridgeTransportError(f"HTTP {resp.status_code} from {url}")
            continue
        payload = resp.text[:2000]
        if resp.status_code != 200:
            raise BridgeProtocolError(f"HTTP {resp.status_code} from {url}; payload: {payload}")
        try:
            data = resp.json()
        except ValueError as e:
            logger.error("bridge returned non-JSON payload: %s", payload)
            raise BridgeProtocolError(f"non-JSON bridge response; payload: {payload}") from e
        try:
            return _parse_bridge_response(data, payload)
        except BridgeProtocolError:
            logger.error("bridge schema violation; raw payload: %s", payload)
            raise
    raise BridgeTransportError(f"bridge {url} unreachable after {attempts} attempts: {last}")


@dataclass
class BridgeDetector:
    """Black-box detector adapter: evaluate() goes over the bridge protocol.

    Exposes no differentiable score, so white-box operations reject it.
    """

    endpoint: str
    score_threshold: float = 0.05
    timeout: float = 10.0

    def evaluate(self, image: np.ndarray) -> list[Detection]:
        return detect_remote(self.endpoint, image, self.score_threshold, timeout=self.timeout)

    def health(self) -> dict:
        resp = requests.get(self.endpoint.rstrip("/") + "/health", timeout=self.timeout)
        resp.raise_for_status()
        return resp.json()


# ---------------------------------------------------------------------------
# Marching squares and sticker export

# Directed segments per cell case, oriented with the inside region on the
# left. Corner bit order: top-left, top-right, bottom-right, bottom-left.
_SEGMENTS = {
    1: (("B", "L"),),
    2: (("R", "B"),),
    3: (("R", "L"),),
    4: (("T", "R"),),
    6: (("T", "B"),),
    7: (("T", "L"),),
    8: (("L", "T"),),
    9: (("B", "T"),),
    11: (("R", "T"),),
    12: (("L", "R"),),
    13: (("B", "R"),),
    14: (("L", "B"),),
}


def _crossing(f0: float, f1: float, level: float) -> float:
    # Linear interpolation along an edge whose endpoint values straddle level.
    # Clamped off the endpoints: a grid value exactly at level would place
    # the crossing on a shared cell vertex, colliding the chained segments
    # of the four cells that meet there.
    t = (level - f0) / (f1 - f0)
    return min(max(t, 1e-9), 1.0 - 1e-9)


def marching_squares(field_: np.ndarray, level: float) -> list[list[tuple[float, float]]]:
    """Closed contours of {field >= level}, pixel centers at integer coords.

    The field is zero-padded so regions touching the border still close.
    Saddle cells are disambiguated by the cell-center average. Returns
    polygons as (x, y) point lists; consecutive collinear points collapsed.
    """
    f = np.pad(np.asarray(field_, dtype=np.float64), 1)
    h, w = f.shape
    segments: dict[tuple[float, float], tuple[float, float]] = {}

    inside = f >= level
    for i in range(h - 1):
        for j in range(w - 1):
            a, b = f[i, j], f[i, j + 1]
            d, c = f[i + 1, j], f[i + 1, j + 1]
            case = (
                (8 if inside[i, j] else 0)
                + (4 if inside[i, j + 1] else 0)
                + (2 if inside[i + 1, j + 1] else 0)
                + (1 if inside[i + 1, j] else 0)
            )
            if case in (0, 15):
                continue
            if case == 5:
                pairs = (("T", "L"), ("B", "R")) if (a + b + c + d) / 4.0 >= level \
                    else (("T", "R"), ("B", "L"))
            elif case == 10:
                pairs = (("R", "T"), ("L", "B")) if (a + b + c + d) / 4.0 >= level \
                    else (("L", "T"), ("R", "B"))
            else:
                pairs = _SEGMENTS[case]
            # Pixel centers: padded (i, j) sits at (x, y) = (j - 1, i - 1).
            x0, y0 = j - 1.0, i - 1.0
            points = {}
            ts = {}
            if inside[i, j] != inside[i, j + 1]:
                ts["T"] = _crossing(a, b, level)
                points["T"] = (x0 + ts["T"], y0)
            if inside[i, j + 1] != inside[i + 1, j + 1]:
                ts["R"] = _crossing(b, c, level)
                points["R"] = (x0 + 1.0, y0 + ts["R"])
            if inside[i + 1, j] != inside[i + 1, j + 1]:
                ts["B"] = _crossing(d, c, level)
                points["B"] = (x0 + ts["B"], y0 + 1.0)
            if inside[i, j] != inside[i + 1, j]:
                ts["L"] = _crossing(a, d, level)
                points["L"] = (x0, y0 + ts["L"])
            # A single-corner cell whose two crossings sit exactly at edge
            # midpoints is a sharp right angle (binary field at level 0.5);
            # route the contour through the cell center instead of cutting
            # the corner with a 45-degree bevel.
            if case in (1, 2, 4, 7, 8, 11, 13, 14) \
                    and ts[pairs[0][0]] == 0.5 and ts[pairs[0][1]] == 0.5:
                start, end = pairs[0]
                corner = (x0 + 0.5, y0 + 0.5)
                segments[points[start]] = corner
                segments[corner] = points[end]
                continue
            for start, end in pairs:
                segments[points[start]] = points[end]

    polygons = []
    while segments:
        start = next(iter(segments))
        loop = [start]
        cur = segments.pop(start)
        while cur != start:
            loop.append(cur)
            cur = segments.pop(cur)
        polygons.append(_collapse_collinear(loop))
    return polygons


def _collapse_collinear(points: list[tuple[float, float]]) -> list[tuple[float, float]]:
    if len(points) < 3:
        return points
    out = []
    n = len(points)
    for k in range(n):
        px, py = points[(k - 1) % n]
        cx, cy = points[k]
        nx, ny = points[(k + 1) % n]
        cross = (cx - px) * (ny - cy) - (cy - py) * (nx - cx)
        if abs(cross) > 1e-12:
            out.append(points[k])
    return out if len(out) >= 3 else points


def sticker_polygons(alpha: np.ndarray, threshold: float) -> list[list[tuple[float, float]]]:
    """Contours of the printable region {alpha >= threshold}, in texel units."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    if not np.any(alpha >= threshold):
        raise EmptyStickerError(f"no alpha at or above threshold {threshold}")
    return marching_squares(alpha, threshold)


def _sticker_svg(polygons, alpha_shape, mm_per_texel: float) -> str:
    h, w = alpha_shape
    paths = []
    for poly in polygons:
        coords = " ".join(
            f"{x * mm_per_texel:.4f},{y * mm_per_texel:.4f}" for x, y in poly
        )
        paths.append(f'  <polygon points="{coords}" fill="black" stroke="none" />')
    width_mm = (w + 1) * mm_per_texel
    height_mm = (h + 1) * mm_per_texel
    min_mm = -1.0 * mm_per_texel
    return (
        '<svg xmlns="http://www.w3.org/2000/svg" '
        f'width="{width_mm:.4f}mm" height="{height_mm:.4f}mm" '
        f'viewBox="{min_mm:.4f} {min_mm:.4f} {width_mm:.4f} {height_mm:.4f}">\n'
        + "\n".join(paths)
        + "\n</svg>\n"
    )


def export_sticker(
    pattern: PatternRaster,
    threshold: float,
    mm_per_texel: float,
    svg_path,
    raster_path,
) -> tuple[str, str]:
    """Write the cut contour (SVG, millimeter units) and a thresholded raster."""
    if not mm_per_texel > 0:
        raise ValueError("mm_per_texel must be positive")
    polygons = sticker_polygons(pattern.alpha, threshold)
    svg = _sticker_svg(polygons, pattern.alpha.shape, mm_per_texel)
    Path(svg_path).write_text(svg)
    save_gray(raster_path, (pattern.alpha >= threshold).astype(np.float64))
    return str(svg_path), str(raster_path)


# ---------------------------------------------------------------------------
# Report export


def _heatmap(report: ASRReport, value_fn) -> np.ndarray:
    azims = sorted({r.azim for r in report.records})
    elevs = sorted({r.elev for r in report.records})
    grid = np.zeros((len(elevs), len(azims)))
    for yi, e in enumerate(elevs):
        for xi, a in enumerate(azims):
            cell = [
                r for r in report.records
                if r.azim == a and r.elev == e and r.detected is not None
            ]
            grid[yi, xi] = value_fn(cell) if cell else 0.0
    return grid


def export_report(report: ASRReport, out_dir) -> dict[str, str]:
    """Write report JSON, one CSV per marginal, and (azim, elev) heatmaps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    json_path = out / "asr_report.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    paths["report"] = str(json_path)

    for axis, marginal in (
        ("azim", report.marginal_azim),
        ("elev", report.marginal_elev),
        ("dist", report.marginal_dist),
    ):
        csv_path = out / f"asr_by_{axis}.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([axis, "asr"])
            for value, asr in marginal.items():
                writer.writerow([value, "" if asr is None else f"{asr:.6f}"])
        paths[f"csv_{axis}"] = str(csv_path)

    asr_map = _heatmap(report, lambda cell: np.mean([not r.detected for r in cell]))
    score_map = _heatmap(report, lambda cell: np.mean([r.best_score for r in cell]))
    for name, grid in (("asr_heatmap", asr_map), ("score_heatmap", score_map)):
        png_path = out / f"{name}.png"
        save_gray(png_path, grid)
        paths[name] = str(png_path)
    return paths
