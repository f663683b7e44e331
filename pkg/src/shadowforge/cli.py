"""Command-line entry point: optimize, eval, render, gradcheck, export-sticker.

Every command writes its primary outputs plus a manifest that echoes the
configuration and hashes the input assets, so a run can be reproduced and
verified byte for byte.

Exit codes: 0 success, 1 internal failure, 2 asset error, 3 network error,
4 domain/validation error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
import traceback
from pathlib import Path

import requests

from . import __version__
from .attack import (
    CheckpointError,
    adversarial_texture,
    config_from_dict,
    config_to_dict,
    load_checkpoint,
    run,
    save_checkpoint,
)
from .diffcore import build_gradcheck_case, finite_diff_check, gradcheck_case_names
from .eval import (
    BridgeDetector,
    BridgeProtocolError,
    BridgeTransportError,
    EmptyStickerError,
    EvalGrid,
    compute_asr,
    default_grid,
    default_workers,
    export_report,
    export_sticker,
    reduced_grid,
)
from .assets import demo_model_path, load_model
from .geometry import MeshError
from .images import load_gray, save_gray
from .objective import CalibrationError, build_template_detector
from .scene import CameraParams, NoObjectError, TextureMap, render
from .shadow import PatternRaster

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_ASSET = 2
EXIT_NETWORK = 3
EXIT_DOMAIN = 4


class UsageError(ValueError):
    """Bad command-line arguments (reported as a domain error)."""


class AssetError(RuntimeError):
    """An input file exists but is unusable (wrong size, wrong format)."""


class _Parser(argparse.ArgumentParser):
    # argparse would sys.exit(2); 2 is reserved for asset errors here.
    def error(self, message):
        raise UsageError(message)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out_dir, command: str, config_echo: dict, inputs: dict,
                    outputs: dict, started: float, warnings: list[str]) -> str:
    manifest = {
        "tool": "shadowforge",
        "version": __version__,
        "command": command,
        "config": config_echo,
        "asset_hashes": {name: _sha256(p) for name, p in inputs.items()},
        "outputs": {name: str(p) for name, p in outputs.items()},
        "warnings": warnings,
        "elapsed_seconds": time.perf_counter() - started,
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return str(path)


def _load_model_arg(args):
    model_path = Path(args.model) if args.model else demo_model_path()
    if not model_path.exists():
        raise FileNotFoundError(f"asset not found: {model_path}")
    return load_model(model_path), model_path


def _load_texture_arg(args, model):
    if not args.texture:
        return model.texture, None
    path = Path(args.texture)
    if not path.exists():
        raise FileNotFoundError(f"asset not found: {path}")
    gray = load_gray(path)
    if gray.shape != model.texture.shape:
        raise AssetError(
            f"texture size {gray.shape} does not match the model's UV layout "
            f"{model.texture.shape}"
        )
    return TextureMap(gray=gray), path


def cmd_optimize(args) -> int:
    started = time.perf_counter()
    config_path = Path(args.config)
    if not config_path.exists():
        raise FileNotFoundError(f"asset not found: {config_path}")
    try:
        config = config_from_dict(json.loads(config_path.read_text()))
    except json.JSONDecodeError as e:
        raise UsageError(f"config {config_path} is not valid JSON: {e}") from e
    if args.seed is not None:
        config = config_from_dict({**config_to_dict(config), "seed": args.seed})
    model, model_path = _load_model_arg(args)
    detector = build_template_detector(model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out / "checkpoint.json"
    state = load_checkpoint(args.resume) if args.resume else None

    def log(message):
        print(message)

    state, texture, run_manifest = run(
        config, model, detector, state=state, checkpoint_path=checkpoint_path, log=log
    )
    save_checkpoint(state, checkpoint_path)
    texture_path = out / "texture_adv.png"
    save_gray(texture_path, texture.gray)
    _, rasters = adversarial_texture(state, config, model)
    outputs = {"texture_adv": texture_path, "checkpoint": checkpoint_path}
    for i, raster in enumerate(rasters):
        raster_path = out / f"pattern_{i}_alpha.png"
        save_gray(raster_path, raster.alpha)
        outputs[f"pattern_{i}_alpha"] = raster_path
    (out / "run.json").write_text(json.dumps(run_manifest, indent=2) + "\n")
    outputs["run"] = out / "run.json"
    inputs = {"model": model_path, "config": config_path}
    manifest_path = _write_manifest(
        out, "optimize", config_to_dict(config), inputs, outputs,
        started, run_manifest["warnings"],
    )
    final = run_manifest["final_pool_mean"]
    print(f"optimized {config.num_patterns} patterns over {state.iteration} iterations")
    if final is not None:
        print(f"final mean detection score over the view pool: {final:.4f}")
    print(f"manifest: {manifest_path}")
    return EXIT_OK


def _parse_grid(value: str) -> EvalGrid:
    if value == "default":
        return default_grid()
    if value == "reduced":
        return reduced_grid()
    path = Path(value)
    if not path.exists():
        raise FileNotFoundError(f"asset not found: {path}")
    data = json.loads(path.read_text())
    try:
        return EvalGrid(
            azims=tuple(data["azims"]), elevs=tuple(data["elevs"]), dists=tuple(data["dists"])
        )
    except (KeyError, TypeError) as e:
        raise UsageError(f"grid file {path} needs azims/elevs/dists lists: {e}") from e


def _build_detector(spec: str, model):
    if spec == "builtin":
        return build_template_detector(model)
    if spec.startswith("bridge:"):
        endpoint = spec[len("bridge:"):]
        detector = BridgeDetector(endpoint)
        detector.health()  # fail fast with a network error when unreachable
        return detector
    raise UsageError(f"unknown detector {spec!r}; expected builtin or bridge:URL")


def cmd_eval(args) -> int:
    started = time.perf_counter()
    model, model_path = _load_model_arg(args)
    texture, texture_path = _load_texture_arg(args, model)
    grid = _parse_grid(args.grid)
    detector = _build_detector(args.detector, model)
    workers = args.workers if args.workers else default_workers()
    report = compute_asr(
        model, texture, detector, grid,
        conf_thresh=args.conf, iou_thresh=args.iou, workers=workers,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = export_report(report, out)
    inputs = {"model": model_path}
    if texture_path is not None:
        inputs["texture"] = texture_path
    config_echo = {
        "detector": args.detector, "grid": args.grid,
        "conf_thresh": args.conf, "iou_thresh": args.iou, "workers": workers,
        "n_views": grid.n_views,
    }
    _write_manifest(out, "eval", config_echo, inputs, paths, started, [])
    print(
        f"ASR {report.overall_asr:.4f} over {report.counted} views "
        f"({report.excluded} excluded, {report.errored} errored)"
    )
    return EXIT_OK


def cmd_render(args) -> int:
    model, _model_path = _load_model_arg(args)
    texture, _texture_path = _load_texture_arg(args, model)
    cam = CameraParams(
        dist=args.dist, elev=args.elev, azim=args.azim,
        fov=args.fov, width=args.width, height=args.height,
    )
    img = render(model.mesh, texture, cam, model.background)
    save_gray(args.out, img.gray)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = gradcheck_case_names()
    if args.module != "all":
        selected = [
            n for n in names if n == args.module or n.startswith(args.module + ".")
        ]
        if not selected:
            raise UsageError(f"unknown gradcheck module {args.module!r}; known: {names}")
        names = selected
    failures = 0
    for name in names:
        for seed in range(args.seeds):
            op, inputs, kwargs = build_gradcheck_case(name, seed)
            report = finite_diff_check(op, inputs, seed=seed, **kwargs)
            print(f"seed {seed} {report}")
            if not report.passed:
                failures += 1
    if failures:
        print(f"{failures} gradient check(s) failed")
        return EXIT_INTERNAL
    print(f"all gradient checks passed ({len(names)} cases x {args.seeds} seeds)")
    return EXIT_OK


def cmd_export_sticker(args) -> int:
    started = time.perf_counter()
    pattern_path = Path(args.pattern)
    if not pattern_path.exists():
        raise FileNotFoundError(f"asset not found: {pattern_path}")
    alpha = load_gray(pattern_path)
    pattern = PatternRaster(alpha=alpha, gray=0.15)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    svg_path, raster_path = export_sticker(
        pattern, args.threshold, args.mm_per_texel,
        out / "sticker.svg", out / "sticker.png",
    )
    outputs = {"svg": svg_path, "raster": raster_path}
    config_echo = {"threshold": args.threshold, "mm_per_texel": args.mm_per_texel}
    _write_manifest(
        out, "export-sticker", config_echo, {"pattern": pattern_path}, outputs, started, []
    )
    print(f"wrote {svg_path} and {raster_path}")
    return EXIT_OK


def _build_parser() -> _Parser:
    parser = _Parser(prog="shadowforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="run the sticker pattern optimization")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--model", help="car model JSON (default: bundled demo car)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--resume", help="checkpoint JSON to resume from")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("eval", help="measure ASR over a camera grid")
    p.add_argument("--texture", help="texture image (default: the model's clean texture)")
    p.add_argument("--detector", default="builtin", help="builtin or bridge:URL")
    p.add_argument("--grid", default="default", help="default, reduced, or a grid JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--model", help="car model JSON (default: bundled demo car)")
    p.add_argument("--conf", type=float, default=0.6, help="detection confidence threshold")
    p.add_argument("--iou", type=float, default=0.5, help="IOU threshold vs ground truth")
    p.add_argument("--workers", type=int, help="parallel view workers "
                   "(default: SHADOWFORGE_WORKERS or 1)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render one view to an image")
    p.add_argument("--azim", type=float, required=True)
    p.add_argument("--elev", type=float, required=True)
    p.add_argument("--dist", type=float, required=True)
    p.add_argument("--fov", type=float, default=60.0)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--texture", help="texture image (default: the model's clean texture)")
    p.add_argument("--model", help="car model JSON (default: bundled demo car)")
    p.add_argument("--out", required=True, help="output image path (.png or .pgm)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--module", default="all", help="all, a module prefix, or a case name")
    p.add_argument("--seeds", type=int, default=3, help="seeds per case")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-sticker", help="export a pattern as a cut contour")
    p.add_argument("--pattern", required=True, help="pattern alpha image")
    p.add_argument("--mm-per-texel", dest="mm_per_texel", type=float, required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export_sticker)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_DOMAIN
    except (FileNotFoundError, IsADirectoryError, PermissionError, AssetError,
            CheckpointError, MeshError) as e:
        print(f"asset error: {e}", file=sys.stderr)
        return EXIT_ASSET
    except (BridgeTransportError, BridgeProtocolError, requests.RequestException) as e:
        print(f"network error: {e}", file=sys.stderr)
        return EXIT_NETWORK
    except (EmptyStickerError, NoObjectError, CalibrationError, ValueError) as e:
        print(f"domain error: {e}", file=sys.stderr)
        return EXIT_DOMAIN
    except Exception as e:  # AttackError and anything unforeseen
        print(f"internal error: {e}", file=sys.stderr)
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
