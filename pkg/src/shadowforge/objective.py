"""Detector abstraction, the built-in template detector, and the detection loss.

The built-in detector matches a normalized 32x32 template (a clean-car crop at
a calibration view) against image windows by normalized cross-correlation and
maps the correlation through a calibrated sigmoid. It exposes both faces of
the detector interface: black-box `evaluate` (sliding windows + NMS) and
white-box `score` (differentiable with respect to image pixels).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import DiffOp, register_gradcheck_case
from .scene import CameraParams, CarModel, bilinear_sample, bilinear_scatter, render, silhouette_bbox

__all__ = [
    "Detection",
    "DetectorCapabilityError",
    "CalibrationError",
    "TemplateDetector",
    "build_template_detector",
    "toy_score",
    "toy_score_grad",
    "toy_evaluate",
    "detection_loss",
    "detection_loss_grad",
]

TEMPLATE_SIZE = 32
_TINY = 1e-12


class DetectorCapabilityError(RuntimeError):
    """Raised when a detector lacks the differentiable-score capability."""


class CalibrationError(RuntimeError):
    """Raised when the template detector cannot be calibrated."""


@dataclass(frozen=True)
class Detection:
    """One detector output box with score and label."""

    bbox: tuple[float, float, float, float]
    score: float
    label: str = "car"

    def __post_init__(self):
        x1, y1, x2, y2 = self.bbox
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate bbox {self.bbox}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0,1], got {self.score}")


def _box_iou(a, b) -> float:
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


_DEFAULT_OFFSETS = tuple((dx, dy) for dy in (-2.0, 0.0, 2.0) for dx in (-2.0, 0.0, 2.0))


@dataclass
class TemplateDetector:
    """Normalized-template correlation detector with a calibrated sigmoid.

    gain/bias solve sigmoid(a*1 + b) = 0.9 and sigmoid(a*0 + b) = 0.1, so an
    exact template match scores 0.9 and a zero-correlation (or flat) crop
    scores 0.1.
    """

    template: np.ndarray
    gain: float
    bias: float
    window_size: tuple[float, float]
    offsets: tuple = _DEFAULT_OFFSETS
    temperature: float = 150.0
    calibration_score: float = 0.0
    _t_hat: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.template = np.asarray(self.template, dtype=np.float64)
        if self.template.shape != (TEMPLATE_SIZE, TEMPLATE_SIZE):
            raise ValueError(f"template must be {TEMPLATE_SIZE}x{TEMPLATE_SIZE}")
        centered = self.template - self.template.mean()
        norm = np.linalg.norm(centered)
        if norm < _TINY:
            raise CalibrationError("template has zero variance")
        self._t_hat = centered / norm

    # Detector interface: black-box and white-box faces.
    def evaluate(self, image: np.ndarray) -> list[Detection]:
        return toy_evaluate(self, image)

    def score(self, image: np.ndarray, bbox) -> float:
        return toy_score(self, image, bbox)

    def score_grad(self, image: np.ndarray, bbox) -> tuple[float, np.ndarray]:
        return toy_score_grad(self, image, bbox)


def _window_boxes(bbox, offsets) -> np.ndarray:
    x1, y1, x2, y2 = (float(v) for v in bbox)
    boxes = np.array([[x1 + dx, y1 + dy, x2 + dx, y2 + dy] for dx, dy in offsets])
    return boxes


def _resample_crops(image: np.ndarray, boxes: np.ndarray):
    """Resample each continuous box to TEMPLATE_SIZE^2 samples (clamped)."""
    n = len(boxes)
    ks = (np.arange(TEMPLATE_SIZE) + 0.5) / TEMPLATE_SIZE
    xs = boxes[:, 0, None] + ks[None, :] * (boxes[:, 2] - boxes[:, 0])[:, None]
    ys = boxes[:, 1, None] + ks[None, :] * (boxes[:, 3] - boxes[:, 1])[:, None]
    X = np.broadcast_to(xs[:, None, :], (n, TEMPLATE_SIZE, TEMPLATE_SIZE))
    Y = np.broadcast_to(ys[:, :, None], (n, TEMPLATE_SIZE, TEMPLATE_SIZE))
    values, _, _, ctx = bilinear_sample(image, X, Y)
    return values, ctx


def _ncc_batch(crops: np.ndarray, t_hat: np.ndarray):
    """NCC of each crop against the unit-norm zero-mean template."""
    flat = crops.reshape(len(crops), -1)
    centered = flat - flat.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    safe = np.maximum(norms, _TINY)
    ncc = np.where(norms > _TINY, centered @ t_hat.ravel() / safe, 0.0)
    return ncc, centered, norms


def _softavg(ncc: np.ndarray, temperature: float):
    shifted = temperature * (ncc - ncc.max())
    w = np.exp(shifted)
    w = w / w.sum()
    m = float(w @ ncc)
    return m, w


def toy_score(det: TemplateDetector, image: np.ndarray, bbox, offsets=None) -> float:
    """Differentiable object confidence at a query box.

    Crops the box shifted by each window offset, correlates with the template,
    soft-max-averages the correlations, and maps through the calibrated
    sigmoid.
    """
    return _score_impl(det, image, bbox, offsets, want_grad=False)[0]


def toy_score_grad(
    det: TemplateDetector, image: np.ndarray, bbox, offsets=None
) -> tuple[float, np.ndarray]:
    """toy_score plus its gradient with respect to image pixels."""
    return _score_impl(det, image, bbox, offsets, want_grad=True)


def _score_impl(det, image, bbox, offsets, want_grad):
    image = np.asarray(image, dtype=np.float64)
    boxes = _window_boxes(bbox, offsets if offsets is not None else det.offsets)
    crops, ctx = _resample_crops(image, boxes)
    ncc, centered, norms = _ncc_batch(crops, det._t_hat)
    if len(ncc) == 1:
        m, w = float(ncc[0]), np.ones(1)
    else:
        m, w = _softavg(ncc, det.temperature)
    score = 1.0 / (1.0 + math.exp(-(det.gain * m + det.bias)))
    if not want_grad:
        return score, None
    ds_dm = score * (1.0 - score) * det.gain
    if len(ncc) == 1:
        dm_dncc = np.ones(1)
    else:
        dm_dncc = w * (1.0 + det.temperature * (ncc - m))
    # d ncc/d crop = (t_hat - ncc * x_hat)/|x_centered|; flat crops get zero.
    t_flat = det._t_hat.ravel()
    safe = np.maximum(norms, _TINY)[:, None]
    x_hat = centered / safe
    d_crops = (t_flat[None, :] - ncc[:, None] * x_hat) / safe
    d_crops = np.where(norms[:, None] > _TINY, d_crops, 0.0)
    d_crops = (ds_dm * dm_dncc)[:, None] * d_crops
    d_image = bilinear_scatter(ctx, d_crops.reshape(crops.shape))
    return score, d_image


def _score_single(det: TemplateDetector, image: np.ndarray, box) -> float:
    return toy_score(det, image, box, offsets=((0.0, 0.0),))


def toy_evaluate(det: TemplateDetector, image: np.ndarray) -> list[Detection]:
    """Black-box face: sliding windows at 3 scales, stride window/4, NMS 0.5.

    Each window is scored with the single-window formula, so the center-window
    score matches toy_score with a single-offset grid exactly. The top coarse
    windows are locally refined before suppression to sharpen localization.
    """
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape
    w0, h0 = det.window_size
    candidates: list[tuple[float, tuple[float, float, float, float]]] = []
    for scale in (0.7, 1.0, 1.4):
        w = min(w0 * scale, float(width))
        h = min(h0 * scale, float(height))
        xs = _strided_positions(width, w)
        ys = _strided_positions(height, h)
        for y in ys:
            for x in xs:
                box = (x, y, x + w, y + h)
                candidates.append((_score_single(det, image, box), box))
    # Refine the best coarse windows: the stride-w/4 grid can sit up to w/8
    # off the object, so hill-climb with step halving down to quarter-pixel
    # alignment before suppression. Seeds are the top spatially distinct
    # coarse peaks so multiple objects each get refined.
    coarse = [Detection(bbox=b, score=min(max(s, 0.0), 1.0)) for s, b in candidates]
    seeds = [(d.score, d.bbox) for d in _nms(coarse, 0.5)[:5]]
    refined: list[tuple[float, tuple[float, float, float, float]]] = []
    for score, box in seeds:
        w = box[2] - box[0]
        h = box[3] - box[1]
        cx, cy = box[0], box[1]
        best = score
        step = max(w, h) / 8.0
        evals = 0
        while step >= 0.25 and evals < 80:
            bx, by = cx, cy
            for dy in (-step, 0.0, step):
                for dx in (-step, 0.0, step):
                    if dx == 0.0 and dy == 0.0:
                        continue
                    px = min(max(cx + dx, 0.0), width - w)
                    py = min(max(cy + dy, 0.0), height - h)
                    cand = (px, py, px + w, py + h)
                    s = _score_single(det, image, cand)
                    evals += 1
                    refined.append((s, cand))
                    if s > best:
                        best, bx, by = s, px, py
            if (bx, by) == (cx, cy):
                step /= 2.0
            cx, cy = bx, by
    detections = [
        Detection(bbox=box, score=min(max(s, 0.0), 1.0))
        for s, box in candidates + refined
    ]
    return _nms(detections, 0.5)


def _strided_positions(extent: int, window: float) -> list[float]:
    stride = window / 4.0
    last = extent - window
    positions = list(np.arange(0.0, max(last, 0.0) + 1e-9, stride))
    if positions and abs(positions[-1] - last) > 1e-9 and last > 0:
        positions.append(last)
    return positions or [0.0]


def _nms(detections: list[Detection], iou_thresh: float) -> list[Detection]:
    kept: list[Detection] = []
    for det in sorted(detections, key=lambda d: (-d.score, d.bbox)):
        if all(_box_iou(det.bbox, k.bbox) < iou_thresh for k in kept):
            kept.append(det)
    return kept


def build_template_detector(
    model: CarModel, cam: CameraParams | None = None
) -> TemplateDetector:
    """Render the clean car at the calibration view and cut the template.

    The template is the silhouette-box crop resampled to 32x32; gain and bias
    come from the two-point calibration sigmoid(a+b)=0.9, sigmoid(b)=0.1.
    """
    cam = cam or model.calibration
    img = render(model.mesh, model.texture, cam, model.background)
    x1, y1, x2, y2 = silhouette_bbox(img)
    box = (float(x1), float(y1), float(x2 + 1), float(y2 + 1))
    crops, _ = _resample_crops(img.gray, np.array([box]))
    gain = 2.0 * math.log(9.0)
    bias = -math.log(9.0)
    det = TemplateDetector(
        template=crops[0],
        gain=gain,
        bias=bias,
        window_size=(box[2] - box[0], box[3] - box[1]),
    )
    det.calibration_score = toy_score(det, img.gray, box)
    if det.calibration_score < 0.85:
        raise CalibrationError(
            f"calibration score {det.calibration_score:.4f} below 0.85"
        )
    return det


def detection_loss(detector, image: np.ndarray, gt_bbox) -> float:
    """Object confidence at the ground-truth box; the term the attack minimizes."""
    if not hasattr(detector, "score"):
        raise DetectorCapabilityError(
            f"{type(detector).__name__} has no differentiable score capability"
        )
    return float(detector.score(image, gt_bbox))


def detection_loss_grad(detector, image: np.ndarray, gt_bbox) -> tuple[float, np.ndarray]:
    if not hasattr(detector, "score_grad"):
        raise DetectorCapabilityError(
            f"{type(detector).__name__} has no differentiable score capability"
        )
    value, d_image = detector.score_grad(image, gt_bbox)
    return float(value), d_image


# ---------------------------------------------------------------------------
# Gradcheck case


def _synthetic_detector(rng) -> TemplateDetector:
    base = rng.uniform(0.2, 0.8, size=(TEMPLATE_SIZE, TEMPLATE_SIZE))
    kernel = np.array([0.25, 0.5, 0.25])
    for axis in (0, 1):
        base = np.apply_along_axis(lambda m: np.convolve(m, kernel, mode="same"), axis, base)
    return TemplateDetector(
        template=base,
        gain=2.0 * math.log(9.0),
        bias=-math.log(9.0),
        window_size=(40.0, 30.0),
    )


def _toy_score_case(seed: int):
    rng = np.random.default_rng(seed)
    det = _synthetic_detector(rng)
    image0 = rng.uniform(0.1, 0.9, size=(64, 64))
    bbox = (12.3, 15.1, 52.3, 45.1)

    def forward(inputs):
        return np.asarray(toy_score(det, inputs[0], bbox))

    def vjp(inputs, cotangent):
        _, d_image = toy_score_grad(det, inputs[0], bbox)
        return [float(cotangent) * d_image]

    op = DiffOp("objective.toy_score", forward, vjp, (True,))
    return op, [image0], {"tol": 1e-3}


register_gradcheck_case("objective.toy_score", _toy_score_case)
