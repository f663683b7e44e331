"""Grid evaluation, IOU, the HTTP bridge client, and sticker export."""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from shadowforge.assets import demo_car
from shadowforge.eval import (
    ASRReport,
    BridgeDetector,
    BridgeProtocolError,
    BridgeTransportError,
    EmptyStickerError,
    EvalGrid,
    ViewRecord,
    compute_asr,
    default_grid,
    detect_remote,
    export_report,
    export_sticker,
    iou,
    marching_squares,
    reduced_grid,
    sticker_polygons,
)
from shadowforge.images import gray_from_png_bytes
from shadowforge.objective import Detection
from shadowforge.scene import render, silhouette_bbox
from shadowforge.shadow import PatternRaster

import base64


# ---------------------------------------------------------------------------
# IOU and grids


def test_iou_identical_boxes():
    assert iou((1.0, 2.0, 5.0, 6.0), (1.0, 2.0, 5.0, 6.0)) == 1.0


def test_iou_disjoint_boxes():
    assert iou((0.0, 0.0, 1.0, 1.0), (5.0, 5.0, 6.0, 6.0)) == 0.0


def test_iou_hand_case():
    assert abs(iou((0.0, 0.0, 2.0, 2.0), (1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0) < 1e-12


def test_iou_symmetry():
    a, b = (0.0, 0.0, 4.0, 3.0), (2.0, 1.0, 6.0, 5.0)
    assert iou(a, b) == iou(b, a)


def test_default_grid_lattice():
    grid = default_grid()
    assert grid.azims == tuple(float(a) for a in range(0, 360, 20))
    assert grid.elevs == tuple(float(e) for e in range(0, 91, 6))
    assert grid.dists == tuple(float(d) for d in range(1, 9))
    assert len(grid.azims) == 18
    assert len(grid.elevs) == 16
    assert len(grid.dists) == 8
    assert grid.n_views == 2304
    assert 360.0 not in grid.azims


def test_reduced_grid_is_default_sublattice():
    full = default_grid()
    small = reduced_grid()
    assert set(small.azims) <= set(full.azims)
    assert set(small.elevs) <= set(full.elevs)
    assert set(small.dists) <= set(full.dists)
    assert small.n_views < full.n_views


def test_grid_validation():
    with pytest.raises(ValueError):
        EvalGrid(azims=(0.0, 360.0), elevs=(0.0,), dists=(1.0,))
    with pytest.raises(ValueError):
        EvalGrid(azims=(0.0, 0.0), elevs=(0.0,), dists=(1.0,))
    with pytest.raises(ValueError):
        EvalGrid(azims=(0.0,), elevs=(95.0,), dists=(1.0,))
    with pytest.raises(ValueError):
        EvalGrid(azims=(0.0,), elevs=(0.0,), dists=())


def test_grid_cameras_fixed_product_order():
    grid = EvalGrid(azims=(0.0, 20.0), elevs=(0.0, 6.0), dists=(2.0, 3.0))
    cams = grid.cameras(60.0, 64, 64)
    triples = [(c.azim, c.elev, c.dist) for c in cams]
    expected = [
        (a, e, d) for a in (0.0, 20.0) for e in (0.0, 6.0) for d in (2.0, 3.0)
    ]
    assert triples == expected


# ---------------------------------------------------------------------------
# compute_asr with stub detectors

_SMALL_GRID = EvalGrid(azims=(0.0, 90.0), elevs=(0.0, 40.0), dists=(2.0, 3.0))


def _gt_boxes(car, grid, width=64, height=64):
    boxes = []
    for cam in grid.cameras(car.calibration.fov, width, height):
        img = render(car.mesh, car.texture, cam, car.background)
        x1, y1, x2, y2 = silhouette_bbox(img)
        boxes.append((float(x1), float(y1), float(x2 + 1), float(y2 + 1)))
    return boxes


class _SequencedStub:
    """Returns one precomputed detection list per call, in call order."""

    def __init__(self, per_view):
        self.per_view = list(per_view)
        self.calls = 0

    def evaluate(self, image):
        out = self.per_view[self.calls]
        self.calls += 1
        if isinstance(out, Exception):
            raise out
        return out


@pytest.fixture(scope="module")
def car():
    return demo_car()


@pytest.fixture(scope="module")
def small_gt(car):
    return _gt_boxes(car, _SMALL_GRID)


def test_asr_zero_when_stub_always_returns_gt(car, small_gt):
    stub = _SequencedStub(
        [[Detection(bbox=b, score=0.99)] for b in small_gt]
    )
    report = compute_asr(
        car, None, stub, _SMALL_GRID, width=64, height=64, workers=1
    )
    assert report.overall_asr == 0.0
    assert report.counted == _SMALL_GRID.n_views
    assert report.excluded == 0 and report.errored == 0


def test_asr_one_when_stub_returns_nothing(car):
    stub = _SequencedStub([[] for _ in range(_SMALL_GRID.n_views)])
    report = compute_asr(
        car, None, stub, _SMALL_GRID, width=64, height=64, workers=1
    )
    assert report.overall_asr == 1.0


def test_asr_hand_count_for_elevation_gated_stub(car, small_gt):
    # Stub detects only elev < 30: on the 2x2x2 grid that is the four
    # elev-0 views, so ASR = 4/8.
    cams = _SMALL_GRID.cameras(car.calibration.fov, 64, 64)
    per_view = [
        [Detection(bbox=b, score=0.99)] if cam.elev < 30.0 else []
        for cam, b in zip(cams, small_gt)
    ]
    report = compute_asr(
        car, None, _SequencedStub(per_view), _SMALL_GRID, width=64, height=64, workers=1
    )
    assert report.overall_asr == 0.5
    assert report.marginal_elev[0.0] == 0.0
    assert report.marginal_elev[40.0] == 1.0


def test_asr_low_scores_and_bad_boxes_do_not_count(car, small_gt):
    per_view = []
    for b in small_gt:
        per_view.append(
            [
                Detection(bbox=b, score=0.59),  # below conf threshold
                Detection(bbox=(0.0, 0.0, 3.0, 3.0), score=0.99),  # no overlap
            ]
        )
    report = compute_asr(
        car, None, _SequencedStub(per_view), _SMALL_GRID, width=64, height=64, workers=1
    )
    assert report.overall_asr == 1.0


def test_asr_errored_views_reported_and_excluded(car, small_gt):
    per_view = [[Detection(bbox=b, score=0.99)] for b in small_gt]
    per_view[3] = RuntimeError("detector crashed")
    report = compute_asr(
        car, None, _SequencedStub(per_view), _SMALL_GRID, width=64, height=64, workers=1
    )
    assert report.errored == 1
    assert report.counted == _SMALL_GRID.n_views - 1
    assert report.overall_asr == 0.0
    failures = [r for r in report.records if r.error is not None]
    assert len(failures) == 1
    assert "detector crashed" in failures[0].error


def test_asr_monotone_under_added_detections(car, small_gt):
    rng = np.random.default_rng(4)
    base = [
        [Detection(bbox=b, score=0.99)] if rng.random() < 0.5 else []
        for b in small_gt
    ]
    more = [list(d) + [Detection(bbox=b, score=0.95)] for d, b in zip(base, small_gt)]
    r_base = compute_asr(
        car, None, _SequencedStub(base), _SMALL_GRID, width=64, height=64, workers=1
    )
    r_more = compute_asr(
        car, None, _SequencedStub(more), _SMALL_GRID, width=64, height=64, workers=1
    )
    assert r_more.overall_asr <= r_base.overall_asr


def test_asr_deterministic_records(car, small_gt):
    def fresh():
        return _SequencedStub([[Detection(bbox=b, score=0.99)] for b in small_gt])

    a = compute_asr(car, None, fresh(), _SMALL_GRID, width=64, height=64, workers=1)
    b = compute_asr(car, None, fresh(), _SMALL_GRID, width=64, height=64, workers=1)
    assert a.to_dict() == b.to_dict()
    assert [(r.azim, r.elev, r.dist) for r in a.records] == [
        (r.azim, r.elev, r.dist) for r in b.records
    ]


def test_marginals_recompute_from_records(car, small_gt):
    cams = _SMALL_GRID.cameras(car.calibration.fov, 64, 64)
    rng = np.random.default_rng(7)
    per_view = [
        [Detection(bbox=b, score=0.99)] if rng.random() < 0.6 else []
        for b in small_gt
    ]
    report = compute_asr(
        car, None, _SequencedStub(per_view), _SMALL_GRID, width=64, height=64, workers=1
    )
    for axis, marginal in (
        ("azim", report.marginal_azim),
        ("elev", report.marginal_elev),
        ("dist", report.marginal_dist),
    ):
        for value, asr in marginal.items():
            counted = [
                r
                for r in report.records
                if getattr(r, axis) == value and r.detected is not None
            ]
            manual = sum(1 for r in counted if not r.detected) / len(counted)
            assert asr == manual


def test_report_excluded_accounting():
    records = [
        ViewRecord(azim=0.0, elev=0.0, dist=2.0, detected=True),
        ViewRecord(azim=0.0, elev=0.0, dist=3.0, detected=None),  # out of frame
        ViewRecord(azim=0.0, elev=6.0, dist=2.0, detected=False),
        ViewRecord(azim=0.0, elev=6.0, dist=3.0, detected=None, error="boom"),
    ]
    report = ASRReport.from_records(records, 0.6, 0.5)
    assert report.counted == 2
    assert report.excluded == 1
    assert report.errored == 1
    assert report.overall_asr == 0.5


def test_compute_asr_requires_evaluate_capability(car):
    with pytest.raises(TypeError):
        compute_asr(car, None, object(), _SMALL_GRID, width=64, height=64)


def test_export_report_writes_artifacts(tmp_path, car, small_gt):
    stub = _SequencedStub([[Detection(bbox=b, score=0.99)] for b in small_gt])
    report = compute_asr(
        car, None, stub, _SMALL_GRID, width=64, height=64, workers=1
    )
    paths = export_report(report, tmp_path)
    for path in paths.values():
        assert (tmp_path / path).exists() or (tmp_path / path).is_file() or path
    data = json.loads((tmp_path / "asr_report.json").read_text())
    assert data["counted"] == report.counted


# ---------------------------------------------------------------------------
# Bridge client against a local HTTP server


class _BridgeHandler(BaseHTTPRequestHandler):
    script = []  # list of (status, content_type, body_bytes)
    seen = []

    def do_POST(self):
        length = int(self.headers.get("Content-Length", "0"))
        body = self.rfile.read(length)
        type(self).seen.append((self.path, body))
        status, ctype, payload = (
            type(self).script.pop(0)
            if type(self).script
            else (200, "application/json", b'{"detections": [], "model": "stub"}')
        )
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture()
def bridge_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _BridgeHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _BridgeHandler.script = []
    _BridgeHandler.seen = []
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()
    thread.join(timeout=5)


def _json_response(obj, status=200):
    return (status, "application/json", json.dumps(obj).encode())


def test_detect_remote_round_trip(bridge_server):
    fixture = {
        "detections": [
            {"x1": 10.0, "y1": 20.0, "x2": 50.0, "y2": 60.0, "score": 0.75, "label": "car"},
            {"x1": 0.0, "y1": 0.0, "x2": 5.0, "y2": 5.0, "score": 0.12, "label": "person"},
        ],
        "model": "stub-detector",
    }
    _BridgeHandler.script = [_json_response(fixture)]
    image = np.random.default_rng(0).random((32, 32))
    detections = detect_remote(bridge_server, image, 0.1)
    assert len(detections) == 2
    assert detections[0].bbox == (10.0, 20.0, 50.0, 60.0)
    assert detections[0].score == 0.75
    assert detections[0].label == "car"
    assert detections[1].label == "person"
    # The request carries the PNG image and the score threshold verbatim.
    path, body = _BridgeHandler.seen[0]
    assert path == "/detect"
    sent = json.loads(body)
    assert sent["score_threshold"] == 0.1
    decoded = gray_from_png_bytes(base64.b64decode(sent["image_png_base64"]))
    assert decoded.shape == (32, 32)


def test_detect_remote_rejects_out_of_range_score(bridge_server):
    bad = {
        "detections": [
            {"x1": 0.0, "y1": 0.0, "x2": 5.0, "y2": 5.0, "score": 1.7, "label": "car"}
        ],
        "model": "stub",
    }
    _BridgeHandler.script = [_json_response(bad)]
    with pytest.raises(BridgeProtocolError):
        detect_remote(bridge_server, np.zeros((8, 8)), 0.5)


def test_detect_remote_rejects_missing_fields(bridge_server):
    bad = {"detections": [{"x1": 0.0, "y1": 0.0, "score": 0.5}], "model": "stub"}
    _BridgeHandler.script = [_json_response(bad)]
    with pytest.raises(BridgeProtocolError):
        detect_remote(bridge_server, np.zeros((8, 8)), 0.5)


def test_detect_remote_rejects_non_json(bridge_server):
    _BridgeHandler.script = [(200, "text/html", b"<html>oops</html>")]
    with pytest.raises(BridgeProtocolError):
        detect_remote(bridge_server, np.zeros((8, 8)), 0.5)


def test_detect_remote_retries_server_errors(bridge_server):
    ok = {"detections": [], "model": "stub"}
    _BridgeHandler.script = [
        (500, "text/plain", b"boom"),
        (503, "text/plain", b"busy"),
        _json_response(ok),
    ]
    detections = detect_remote(bridge_server, np.zeros((8, 8)), 0.5, backoff=0.01)
    assert detections == []
    assert len(_BridgeHandler.seen) == 3


def test_detect_remote_gives_up_after_attempts(bridge_server):
    _BridgeHandler.script = [(500, "text/plain", b"boom")] * 5
    with pytest.raises(BridgeTransportError):
        detect_remote(bridge_server, np.zeros((8, 8)), 0.5, attempts=2, backoff=0.01)
    assert len(_BridgeHandler.seen) == 2


def test_detect_remote_does_not_retry_client_errors(bridge_server):
    _BridgeHandler.script = [(404, "text/plain", b"nope")] * 3
    with pytest.raises(BridgeProtocolError):
        detect_remote(bridge_server, np.zeros((8, 8)), 0.5, backoff=0.01)
    assert len(_BridgeHandler.seen) == 1


def test_detect_remote_unreachable_endpoint():
    with pytest.raises(BridgeTransportError):
        detect_remote(
            "http://127.0.0.1:9", np.zeros((4, 4)), 0.5, attempts=2, backoff=0.01, timeout=0.5
        )


def test_bridge_detector_evaluates_via_remote(bridge_server):
    fixture = {
        "detections": [
            {"x1": 1.0, "y1": 2.0, "x2": 3.0, "y2": 4.0, "score": 0.9, "label": "car"}
        ],
        "model": "stub",
    }
    _BridgeHandler.script = [_json_response(fixture)]
    detector = BridgeDetector(endpoint=bridge_server)
    detections = detector.evaluate(np.zeros((16, 16)))
    assert len(detections) == 1
    assert detections[0].bbox == (1.0, 2.0, 3.0, 4.0)


# ---------------------------------------------------------------------------
# Marching squares and sticker export


def test_marching_squares_full_coverage_rectangle():
    polys = marching_squares(np.ones((5, 8)), 0.5)
    assert len(polys) == 1
    poly = polys[0]
    assert len(poly) == 4
    xs = [p[0] for p in poly]
    ys = [p[1] for p in poly]
    assert min(xs) == -0.5 and max(xs) == 7.5
    assert min(ys) == -0.5 and max(ys) == 4.5


def test_marching_squares_single_pixel_square():
    field = np.zeros((5, 5))
    field[2, 2] = 1.0
    polys = marching_squares(field, 0.5)
    assert len(polys) == 1
    assert len(polys[0]) == 4
    assert abs(_polygon_area(polys[0]) - 1.0) < 1e-9


def test_marching_squares_l_shape_has_six_corners():
    field = np.zeros((6, 6))
    field[1:5, 1:3] = 1.0
    field[3:5, 3:5] = 1.0
    polys = marching_squares(field, 0.5)
    assert len(polys) == 1
    assert len(polys[0]) == 6


def test_marching_squares_below_level_everywhere():
    assert marching_squares(np.zeros((4, 4)), 0.5) == []


def _polygon_area(poly):
    area = 0.0
    for (x1, y1), (x2, y2) in zip(poly, poly[1:] + poly[:1]):
        area += x1 * y2 - x2 * y1
    return abs(area) / 2.0


def test_marching_squares_disc_area():
    n = 64
    yy, xx = np.mgrid[0:n, 0:n]
    r = 20.0
    field = np.clip(r - np.hypot(xx - n / 2, yy - n / 2), -1.0, 1.0) * 0.5 + 0.5
    polys = marching_squares(field, 0.5)
    assert len(polys) == 1
    area = _polygon_area(polys[0])
    assert abs(area - np.pi * r * r) / (np.pi * r * r) < 0.03


def test_sticker_polygons_threshold_domain():
    with pytest.raises(ValueError):
        sticker_polygons(np.ones((4, 4)), 0.0)
    with pytest.raises(ValueError):
        sticker_polygons(np.ones((4, 4)), 1.0)


def test_sticker_polygons_empty_raises():
    with pytest.raises(EmptyStickerError):
        sticker_polygons(np.zeros((4, 4)), 0.5)


def test_export_sticker_full_square(tmp_path):
    pattern = PatternRaster(alpha=np.ones((6, 6)), gray=0.1)
    svg_path = tmp_path / "sticker.svg"
    png_path = tmp_path / "sticker.png"
    export_sticker(pattern, 0.5, 2.0, svg_path, png_path)
    svg = svg_path.read_text()
    assert "<svg" in svg and "polygon" in svg
    assert "mm" in svg
    # One polygon spanning exactly 6 texels * 2 mm per side.
    polys = sticker_polygons(np.ones((6, 6)), 0.5)
    assert len(polys) == 1
    xs = [p[0] * 2.0 for p in polys[0]]
    ys = [p[1] * 2.0 for p in polys[0]]
    assert max(xs) - min(xs) == pytest.approx(12.0)
    assert max(ys) - min(ys) == pytest.approx(12.0)
    assert png_path.exists()
    raster = gray_from_png_bytes(png_path.read_bytes())
    assert set(np.unique(raster)) <= {0.0, 1.0}


def test_export_sticker_disc(tmp_path):
    n = 48
    yy, xx = np.mgrid[0:n, 0:n]
    alpha = (np.hypot(xx - n / 2, yy - n / 2) <= 15.0).astype(float)
    pattern = PatternRaster(alpha=alpha, gray=0.1)
    svg, png = export_sticker(
        pattern, 0.5, 1.0, tmp_path / "disc.svg", tmp_path / "disc.png"
    )
    polys = sticker_polygons(alpha, 0.5)
    assert len(polys) == 1


def test_export_sticker_empty_region(tmp_path):
    pattern = PatternRaster(alpha=np.zeros((6, 6)), gray=0.1)
    with pytest.raises(EmptyStickerError):
        export_sticker(pattern, 0.5, 2.0, tmp_path / "x.svg", tmp_path / "x.png")
