"""Gradient attack loop: optimize control offsets, paste centers, and angles.

Each of the N sticker patterns owns a deformable mesh (control-point offsets
over a base icosphere, or raw vertex offsets when use_control_points is off),
a continuous paste center inside one texture region, and a rotation angle.
One iteration samples a batch of camera views plus EOT perturbations, runs
mesh -> silhouette -> paste -> render -> detector score, and backpropagates
through the hand-chained VJPs. Geometry smoothness terms regularize the mesh
shape; their gradients reach only the offsets.

Everything is a pure function of (config, assets, master seed): per-iteration
randomness comes from seeds derived by hashing, so runs are reproducible
bitwise and a checkpoint resume matches the uninterrupted run.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import AdamState, DiffOp, adam_step, register_gradcheck_case
from .geometry import (
    ControlPointSet,
    TriMesh,
    apply_control_points,
    apply_control_points_vjp,
    default_control_points,
    make_icosphere,
    sample_positions,
    sample_positions_vjp,
    surface_sample,
    vertex_jitter,
)
from .losses import (
    LossWeights,
    chamfer_grad,
    combine,
    edge_length_mean_grad,
    laplacian_smoothing_grad,
    normal_consistency_grad,
)
from .objective import detection_loss, detection_loss_grad
from .scene import (
    CameraParams,
    CarModel,
    EOTConfig,
    PastePlacement,
    TextureMap,
    apply_pattern_noise,
    eot_sample,
    paste_patterns,
    paste_patterns_ctx,
    paste_patterns_vjp,
    render,
    render_ctx,
    render_vjp,
    silhouette_bbox,
)
from .shadow import PatternRaster, ShadowParams, shadow_project, shadow_project_grad

__all__ = [
    "AttackError",
    "CheckpointError",
    "AttackConfig",
    "AttackState",
    "PatternVars",
    "derive_seed",
    "demo_attack_config",
    "config_to_dict",
    "config_from_dict",
    "init_state",
    "forward",
    "step",
    "run",
    "adversarial_texture",
    "pattern_meshes",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT = "shadowforge-checkpoint"
CHECKPOINT_VERSION = 1


class AttackError(RuntimeError):
    """Optimization aborted (non-finite loss or a failed component)."""


class CheckpointError(RuntimeError):
    """Checkpoint file unreadable or from an incompatible version."""


@dataclass(frozen=True)
class AttackConfig:
    """Everything that determines a run, camera sampling through seeds."""

    num_patterns: int = 2
    iterations: int = 500
    batch_views: int = 2
    dist_range: tuple[float, float] = (2.5, 4.0)
    elev_range: tuple[float, float] = (10.0, 40.0)
    azim_range: tuple[float, float] = (0.0, 360.0)
    view_pool_size: int | None = None
    view_width: int = 256
    view_height: int = 256
    fov: float = 60.0
    eot: EOTConfig = field(default_factory=EOTConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lr_offsets: float = 0.02
    lr_center: float = 0.5
    lr_phi: float = 0.01
    tau: float = 1.0
    tau_milestones: tuple[int, ...] = ()
    pattern_resolution: int = 128
    pattern_scale: float = 90.0
    pattern_gray: float = 0.15
    sticker_radius: float = 1.0
    offset_clamp: float = 0.4
    chamfer_samples: int = 500
    pattern_regions: tuple[str, ...] | None = None
    seed: int = 0
    use_control_points: bool = True
    use_smoothness_losses: bool = True

    def __post_init__(self):
        if self.num_patterns < 1:
            raise ValueError("num_patterns must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_views < 1:
            raise ValueError("batch_views must be >= 1")
        for name, (lo, hi) in (
            ("dist_range", self.dist_range),
            ("elev_range", self.elev_range),
            ("azim_range", self.azim_range),
        ):
            if not lo <= hi:
                raise ValueError(f"{name} must be (lo, hi) with lo <= hi")
        if not (self.dist_range[0] > 0 and 0 <= self.elev_range[0]
                and self.elev_range[1] <= 90 and 0 <= self.azim_range[0]
                and self.azim_range[1] <= 360):
            raise ValueError("camera ranges must satisfy the camera invariants")
        if self.view_pool_size is not None and self.view_pool_size < 1:
            raise ValueError("view_pool_size must be >= 1 when set")
        if min(self.lr_offsets, self.lr_center, self.lr_phi) <= 0:
            raise ValueError("learning rates must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0 < self.pattern_gray < 1:
            raise ValueError("pattern_gray must be in (0, 1)")
        if not self.sticker_radius > 0:
            raise ValueError("sticker_radius must be positive")
        if not self.offset_clamp > 0:
            raise ValueError("offset_clamp must be positive")
        if self.chamfer_samples < 1:
            raise ValueError("chamfer_samples must be >= 1")


@dataclass
class PatternVars:
    """Optimization variables and optimizer state for one pattern."""

    region_name: str
    offsets: np.ndarray
    center: np.ndarray
    phi: float
    adam_offsets: AdamState
    adam_center: AdamState
    adam_phi: AdamState


@dataclass
class AttackState:
    patterns: list[PatternVars]
    iteration: int = 0
    loss_history: list[float] = field(default_factory=list)
    events: list[str] = field(default_factory=list)


def derive_seed(master: int, *labels) -> int:
    """Independent child seed: hash of the master seed and a label path."""
    key = ":".join([str(int(master)), *map(str, labels)])
    digest = hashlib.sha256(key.encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big") % (2**63 - 1)


# ---------------------------------------------------------------------------
# Derived run fixtures (deterministic functions of the config)


@dataclass
class _RunSetup:
    """Objects recomputed from config on every run/resume, never serialized."""

    base: TriMesh
    anchors: np.ndarray
    bandwidth: float
    sample_faces: np.ndarray
    sample_bary: np.ndarray
    reference_points: np.ndarray
    view_pool: list[CameraParams]
    offset_max: float


def _sample_camera(config: AttackConfig, rng) -> CameraParams:
    dist = float(rng.uniform(*config.dist_range))
    elev = float(rng.uniform(*config.elev_range))
    azim = float(rng.uniform(*config.azim_range)) % 360.0
    return CameraParams(
        dist=dist, elev=elev, azim=azim, fov=config.fov,
        width=config.view_width, height=config.view_height,
    )


def _setup(config: AttackConfig) -> _RunSetup:
    base = make_icosphere(2, 0.3 * config.sticker_radius)
    control = default_control_points(base)
    cloud = surface_sample(base, config.chamfer_samples, derive_seed(config.seed, "chamfer"))
    reference = surface_sample(base, config.chamfer_samples, derive_seed(config.seed, "sphere"))
    pool = []
    if config.view_pool_size is not None:
        rng = np.random.default_rng(derive_seed(config.seed, "pool"))
        pool = [_sample_camera(config, rng) for _ in range(config.view_pool_size)]
    return _RunSetup(
        base=base,
        anchors=control.anchors,
        bandwidth=control.bandwidth,
        sample_faces=cloud.face_indices,
        sample_bary=cloud.barycentric,
        reference_points=reference.points,
        view_pool=pool,
        offset_max=config.offset_clamp * config.sticker_radius,
    )


def _region_names(config: AttackConfig, model: CarModel) -> list[str]:
    names = config.pattern_regions or tuple(sorted(model.regions))
    if not names:
        raise AttackError("car model declares no paste regions")
    for name in names:
        if name not in model.regions:
            raise AttackError(f"unknown paste region {name!r}; model has {sorted(model.regions)}")
    return [names[i % len(names)] for i in range(config.num_patterns)]


def _region_center(region) -> np.ndarray:
    x0, y0, x1, y1 = region
    return np.array([(x0 + x1 - 1) / 2.0, (y0 + y1 - 1) / 2.0])


def _clamp_center(center: np.ndarray, region) -> np.ndarray:
    x0, y0, x1, y1 = region
    return np.array([
        float(np.clip(center[0], x0, x1 - 1)),
        float(np.clip(center[1], y0, y1 - 1)),
    ])


def init_state(config: AttackConfig, model: CarModel, setup: _RunSetup | None = None) -> AttackState:
    """Fresh variables: zero offsets, region-center placement, zero angle."""
    setup = setup or _setup(config)
    n_var = len(setup.anchors) if config.use_control_points else setup.base.n_vertices
    patterns = []
    for name in _region_names(config, model):
        region = model.regions[name]
        patterns.append(PatternVars(
            region_name=name,
            offsets=np.zeros((n_var, 3)),
            center=_region_center(region),
            phi=0.0,
            adam_offsets=AdamState.zeros(n_var * 3),
            adam_center=AdamState.zeros(2),
            adam_phi=AdamState.zeros(1),
        ))
    return AttackState(patterns=patterns)


def pattern_meshes(state: AttackState, config: AttackConfig, setup: _RunSetup | None = None) -> list[TriMesh]:
    """Current adversarial mesh per pattern (unjittered)."""
    setup = setup or _setup(config)
    meshes = []
    for p in state.patterns:
        if config.use_control_points:
            c = ControlPointSet(setup.anchors, p.offsets, setup.bandwidth)
            meshes.append(apply_control_points(setup.base, c))
        else:
            meshes.append(setup.base.with_vertices(setup.base.vertices + p.offsets))
    return meshes


def _pull_to_offsets(config: AttackConfig, setup: _RunSetup, p: PatternVars, d_vertices: np.ndarray) -> np.ndarray:
    if config.use_control_points:
        c = ControlPointSet(setup.anchors, p.offsets, setup.bandwidth)
        return apply_control_points_vjp(setup.base, c, d_vertices)
    return np.asarray(d_vertices, dtype=np.float64)


def _tau_at(config: AttackConfig, iteration: int) -> float:
    halvings = sum(1 for m in config.tau_milestones if iteration >= m)
    return config.tau * 0.5**halvings


def _gt_box(img) -> tuple[float, float, float, float]:
    x1, y1, x2, y2 = silhouette_bbox(img)
    return float(x1), float(y1), float(x2 + 1), float(y2 + 1)


def _forward_impl(
    state: AttackState,
    config: AttackConfig,
    model: CarModel,
    detector,
    views: list[CameraParams],
    eot_seeds: list[int],
    setup: _RunSetup,
    want_grad: bool,
    warnings: list | None = None,
):
    """One pass over a view batch; optionally also the full gradient set.

    Returns (total loss, diagnostics, grads) where grads is a per-pattern
    list of dicts {offsets, center, phi} or None when want_grad is false.
    """
    if not views:
        raise AttackError("view batch is empty")
    if len(views) != len(eot_seeds):
        raise AttackError("one EOT seed per view required")
    tau = _tau_at(config, state.iteration)
    meshes = pattern_meshes(state, config, setup)
    n = len(state.patterns)
    grads = None
    if want_grad:
        grads = [
            {"offsets": np.zeros_like(p.offsets), "center": np.zeros(2), "phi": 0.0}
            for p in state.patterns
        ]

    det_scores = []
    view_records = []
    inv_b = 1.0 / len(views)
    for cam, eseed in zip(views, eot_seeds):
        sample = eot_sample(config.eot, eseed)
        rasters: list[PatternRaster] = []
        placements: list[PastePlacement] = []
        jittered: list[TriMesh] = []
        shadow_params: list[ShadowParams] = []
        base_alphas: list[np.ndarray] = []
        noise_masks: list[np.ndarray] = []
        center_masks: list[np.ndarray] = []
        for i, p in enumerate(state.patterns):
            jm = vertex_jitter(
                meshes[i], sample.vertex_sigma, derive_seed(sample.noise_seed, "vjit", i)
            )
            params = ShadowParams(
                phi=p.phi,
                gray=float(np.clip(config.pattern_gray + sample.gray_delta, 0.0, 1.0)),
                resolution=config.pattern_resolution,
                scale=config.pattern_scale,
                softness=tau,
            )
            raster = shadow_project(jm, params, warnings)
            noisy, noise_mask = apply_pattern_noise(
                raster.alpha,
                sample.noise_density,
                sample.noise_amplitude,
                derive_seed(sample.noise_seed, "pnoise", i),
            )
            region = model.regions[p.region_name]
            raw_center = p.center + sample.pos_delta
            used_center = _clamp_center(raw_center, region)
            center_masks.append((used_center == raw_center).astype(np.float64))
            placements.append(PastePlacement(used_center, region, p.region_name))
            rasters.append(PatternRaster(alpha=noisy, gray=params.gray))
            jittered.append(jm)
            shadow_params.append(params)
            base_alphas.append(raster.alpha)
            noise_masks.append(noise_mask)

        tex, paste_ctx = paste_patterns_ctx(model.texture, rasters, placements, warnings)
        img, render_context = render_ctx(model.mesh, tex, cam, sample.background)
        gt = _gt_box(img)
        if want_grad:
            l_det, d_image = detection_loss_grad(detector, img.gray, gt)
        else:
            l_det = detection_loss(detector, img.gray, gt)
        det_scores.append(l_det)
        view_records.append({
            "cam": (cam.dist, cam.elev, cam.azim),
            "l_det": float(l_det),
            "background": sample.background,
        })
        if not want_grad:
            continue

        d_texture = render_vjp(render_context, d_image * inv_b)
        _, per_pattern = paste_patterns_vjp(paste_ctx, d_texture)
        for i in range(n):
            d_alpha, _d_gray, d_center = per_pattern[i]
            grads[i]["center"] += d_center * center_masks[i]
            if d_alpha is None:
                continue
            d_alpha = d_alpha * noise_masks[i]
            d_vertices, d_phi = shadow_project_grad(
                jittered[i], shadow_params[i], d_alpha, alpha=base_alphas[i]
            )
            grads[i]["offsets"] += _pull_to_offsets(config, setup, state.patterns[i], d_vertices)
            grads[i]["phi"] += d_phi

    l_det_mean = float(np.mean(det_scores))

    smooth = {"l_norm": 0.0, "l_edge": 0.0, "l_chamfer": 0.0, "l_laplace": 0.0}
    weights = config.weights if config.use_smoothness_losses else LossWeights(0.0, 0.0, 0.0, 0.0)
    if config.use_smoothness_losses:
        inv_n = 1.0 / n
        for i, mesh in enumerate(meshes):
            l_norm, g_norm = normal_consistency_grad(mesh)
            l_edge, g_edge = edge_length_mean_grad(mesh)
            points = sample_positions(mesh, setup.sample_faces, setup.sample_bary)
            l_cham, g_points, _ = chamfer_grad(points, setup.reference_points)
            g_cham = sample_positions_vjp(mesh, setup.sample_faces, setup.sample_bary, g_points)
            l_lap, g_lap = laplacian_smoothing_grad(mesh)
            smooth["l_norm"] += l_norm * inv_n
            smooth["l_edge"] += l_edge * inv_n
            smooth["l_chamfer"] += l_cham * inv_n
            smooth["l_laplace"] += l_lap * inv_n
            if want_grad:
                d_vertices = inv_n * (
                    weights.w1 * g_norm
                    + weights.w2 * g_edge
                    + weights.w3 * g_cham
                    + weights.w4 * g_lap
                )
                grads[i]["offsets"] += _pull_to_offsets(
                    config, setup, state.patterns[i], d_vertices
                )

    total = combine(
        l_det_mean, smooth["l_norm"], smooth["l_edge"],
        smooth["l_chamfer"], smooth["l_laplace"], weights,
    )
    diagnostics = {
        "total": total,
        "l_det_mean": l_det_mean,
        "tau": tau,
        "views": view_records,
        **smooth,
    }
    if not math.isfinite(total):
        raise AttackError(f"non-finite loss; diagnostics: {diagnostics}")
    return total, diagnostics, grads


def forward(
    state: AttackState,
    config: AttackConfig,
    model: CarModel,
    detector,
    views: list[CameraParams],
    eot_seeds: list[int],
    warnings: list | None = None,
):
    """Loss over a view batch without gradients: (total, diagnostics)."""
    setup = _setup(config)
    total, diagnostics, _ = _forward_impl(
        state, config, model, detector, views, eot_seeds, setup, False, warnings
    )
    return total, diagnostics


def _clamp_offsets(offsets: np.ndarray, max_norm: float) -> np.ndarray:
    norms = np.linalg.norm(offsets, axis=1)
    over = norms > max_norm
    if np.any(over):
        offsets = offsets.copy()
        offsets[over] *= (max_norm / norms[over])[:, None]
    return offsets


def step(
    state: AttackState,
    config: AttackConfig,
    model: CarModel,
    detector,
    views: list[CameraParams],
    eot_seeds: list[int],
    setup: _RunSetup | None = None,
    warnings: list | None = None,
) -> AttackState:
    """One forward/backward pass plus the Adam update and projections.

    Mutates and returns ``state``. A non-finite gradient skips the update
    (event logged); the iteration counter advances either way.
    """
    setup = setup or _setup(config)
    total, _diag, grads = _forward_impl(
        state, config, model, detector, views, eot_seeds, setup, True, warnings
    )
    finite = all(
        np.all(np.isfinite(g["offsets"]))
        and np.all(np.isfinite(g["center"]))
        and math.isfinite(g["phi"])
        for g in grads
    )
    if not finite:
        state.events.append(f"iteration {state.iteration}: non-finite gradient, step skipped")
    else:
        for p, g in zip(state.patterns, grads):
            flat, p.adam_offsets = adam_step(
                p.offsets.ravel(), g["offsets"].ravel(), p.adam_offsets, config.lr_offsets
            )
            p.offsets = _clamp_offsets(flat.reshape(p.offsets.shape), setup.offset_max)
            center, p.adam_center = adam_step(
                p.center, g["center"], p.adam_center, config.lr_center
            )
            p.center = _clamp_center(center, model.regions[p.region_name])
            phi, p.adam_phi = adam_step(
                np.array([p.phi]), np.array([g["phi"]]), p.adam_phi, config.lr_phi
            )
            p.phi = float(phi[0]) % (2.0 * math.pi)
            region = model.regions[p.region_name]
            assert region[0] <= p.center[0] <= region[2] - 1
            assert region[1] <= p.center[1] <= region[3] - 1
    state.loss_history.append(total)
    state.iteration += 1
    return state


def _iteration_batch(config: AttackConfig, setup: _RunSetup, iteration: int):
    """Deterministic views and EOT seeds for one iteration."""
    rng = np.random.default_rng(derive_seed(config.seed, "iter", iteration))
    if setup.view_pool:
        idx = rng.integers(len(setup.view_pool), size=config.batch_views)
        views = [setup.view_pool[int(k)] for k in idx]
    else:
        views = [_sample_camera(config, rng) for _ in range(config.batch_views)]
    seeds = [derive_seed(config.seed, "eot", iteration, b) for b in range(config.batch_views)]
    return views, seeds


def adversarial_texture(
    state: AttackState, config: AttackConfig, model: CarModel, warnings: list | None = None
) -> tuple[TextureMap, list[PatternRaster]]:
    """Paste the current patterns (no EOT noise) onto the origin texture."""
    setup = _setup(config)
    meshes = pattern_meshes(state, config, setup)
    tau = _tau_at(config, state.iteration)
    rasters, placements = [], []
    for p, mesh in zip(state.patterns, meshes):
        params = ShadowParams(
            phi=p.phi, gray=config.pattern_gray,
            resolution=config.pattern_resolution,
            scale=config.pattern_scale, softness=tau,
        )
        rasters.append(shadow_project(mesh, params, warnings))
        placements.append(
            PastePlacement(p.center.copy(), model.regions[p.region_name], p.region_name)
        )
    texture = paste_patterns(model.texture, rasters, placements, warnings)
    return texture, rasters


def _dedupe_warnings(warnings: list) -> list:
    """Collapse repeats (EOT jitter clips the same pattern every iteration)."""
    counts: dict[str, int] = {}
    for w in warnings:
        counts[w] = counts.get(w, 0) + 1
    return [w if k == 1 else f"{w} (x{k})" for w, k in counts.items()]


def run(
    config: AttackConfig,
    model: CarModel,
    detector,
    state: AttackState | None = None,
    checkpoint_path=None,
    log=None,
):
    """Full optimization: returns (state, adversarial texture, manifest).

    ``state`` resumes a checkpointed run from its iteration counter. On any
    component failure the last good state is checkpointed (when a path is
    given) before the error propagates.
    """
    t_start = time.perf_counter()
    setup = _setup(config)
    if state is None:
        state = init_state(config, model, setup)
    warnings: list[str] = []
    last_good = copy.deepcopy(state)
    try:
        while state.iteration < config.iterations:
            views, seeds = _iteration_batch(config, setup, state.iteration)
            state = step(state, config, model, detector, views, seeds, setup, warnings)
            last_good = copy.deepcopy(state)
            if log is not None and (state.iteration % 50 == 0 or state.iteration == config.iterations):
                log(f"iteration {state.iteration}/{config.iterations}: "
                    f"loss {state.loss_history[-1]:.4f}")
    except Exception:
        if checkpoint_path is not None:
            save_checkpoint(last_good, checkpoint_path)
        raise

    texture, _ = adversarial_texture(state, config, model, warnings)
    pool_scores = []
    clean_scores = []
    for cam in setup.view_pool:
        img = render(model.mesh, texture, cam, model.background)
        pool_scores.append(float(detection_loss(detector, img.gray, _gt_box(img))))
        clean = render(model.mesh, model.texture, cam, model.background)
        clean_scores.append(float(detection_loss(detector, clean.gray, _gt_box(clean))))
    manifest = {
        "config": config_to_dict(config),
        "iterations_run": state.iteration,
        "loss_history": [float(v) for v in state.loss_history],
        "events": list(state.events),
        "warnings": _dedupe_warnings(warnings),
        "tau_final": _tau_at(config, state.iteration),
        "pattern_regions": [p.region_name for p in state.patterns],
        "final_pool_scores": pool_scores,
        "final_pool_mean": float(np.mean(pool_scores)) if pool_scores else None,
        "clean_pool_scores": clean_scores,
        "clean_pool_mean": float(np.mean(clean_scores)) if clean_scores else None,
        "runtime_seconds": time.perf_counter() - t_start,
    }
    return state, texture, manifest


# ---------------------------------------------------------------------------
# Config serialization (JSON run configs and manifest echo)


def config_to_dict(config: AttackConfig) -> dict:
    d = asdict(config)
    d["eot"] = asdict(config.eot)
    d["weights"] = asdict(config.weights)
    return d


def config_from_dict(data: dict) -> AttackConfig:
    data = dict(data)
    kwargs = {}
    if "eot" in data:
        eot = dict(data.pop("eot"))
        if "backgrounds" in eot:
            eot["backgrounds"] = tuple(eot["backgrounds"])
        kwargs["eot"] = EOTConfig(**eot)
    if "weights" in data:
        kwargs["weights"] = LossWeights(**data.pop("weights"))
    for key in ("dist_range", "elev_range", "azim_range", "tau_milestones"):
        if key in data:
            data[key] = tuple(data[key])
    if data.get("pattern_regions") is not None:
        data["pattern_regions"] = tuple(data["pattern_regions"])
    known = set(AttackConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return AttackConfig(**data, **kwargs)


def demo_attack_config(seed: int = 0) -> AttackConfig:
    """The bundled end-to-end demo: 2 patterns, 500 iterations, 16-view pool."""
    return AttackConfig(
        num_patterns=2,
        iterations=500,
        batch_views=2,
        dist_range=(2.7, 3.5),
        elev_range=(18.0, 32.0),
        azim_range=(15.0, 65.0),
        view_pool_size=16,
        view_width=256,
        view_height=256,
        eot=EOTConfig(
            vertex_sigma=0.002,
            noise_density=0.02,
            noise_amplitude=0.3,
            gray_delta=0.03,
            pos_delta=1.0,
            backgrounds=(0.30, 0.35, 0.40),
        ),
        tau=1.0,
        tau_milestones=(300, 450),
        pattern_resolution=56,
        pattern_scale=140.0,
        pattern_gray=0.05,
        sticker_radius=0.5,
        pattern_regions=("door", "hood"),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Checkpoints


def _adam_to_dict(s: AdamState) -> dict:
    return {"m": s.m.tolist(), "v": s.v.tolist(), "t": s.t}


def _adam_from_dict(d: dict) -> AdamState:
    return AdamState(m=np.asarray(d["m"], dtype=np.float64),
                     v=np.asarray(d["v"], dtype=np.float64), t=int(d["t"]))


def save_checkpoint(state: AttackState, path) -> None:
    """JSON checkpoint; floats round-trip exactly (shortest-decimal repr)."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "iteration": state.iteration,
        "loss_history": [float(v) for v in state.loss_history],
        "events": list(state.events),
        "patterns": [
            {
                "region": p.region_name,
                "offsets": p.offsets.tolist(),
                "center": p.center.tolist(),
                "phi": p.phi,
                "adam_offsets": _adam_to_dict(p.adam_offsets),
                "adam_center": _adam_to_dict(p.adam_center),
                "adam_phi": _adam_to_dict(p.adam_phi),
            }
            for p in state.patterns
        ],
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_checkpoint(path) -> AttackState:
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {doc.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    try:
        patterns = [
            PatternVars(
                region_name=p["region"],
                offsets=np.asarray(p["offsets"], dtype=np.float64),
                center=np.asarray(p["center"], dtype=np.float64),
                phi=float(p["phi"]),
                adam_offsets=_adam_from_dict(p["adam_offsets"]),
                adam_center=_adam_from_dict(p["adam_center"]),
                adam_phi=_adam_from_dict(p["adam_phi"]),
            )
            for p in doc["patterns"]
        ]
        return AttackState(
            patterns=patterns,
            iteration=int(doc["iteration"]),
            loss_history=[float(v) for v in doc["loss_history"]],
            events=list(doc["events"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e


# ---------------------------------------------------------------------------
# Gradcheck case: the full composed objective


def _total_loss_case(seed: int):
    from .assets import build_demo_car
    from .objective import build_template_detector

    rng = np.random.default_rng(seed)
    model = build_demo_car()
    cam = CameraParams(dist=3.0, elev=25.0, azim=40.0, fov=60.0, width=96, height=96)
    detector = build_template_detector(model, cam)
    config = AttackConfig(
        num_patterns=1,
        iterations=1,
        batch_views=1,
        view_width=96,
        view_height=96,
        pattern_resolution=32,
        pattern_scale=40.0,
        sticker_radius=0.5,
        pattern_regions=("door",),
        seed=seed,
    )
    setup = _setup(config)
    offsets0 = 0.02 * rng.normal(size=(len(setup.anchors), 3))
    region = model.regions["door"]
    center0 = _region_center(region) + rng.uniform(-1.0, 1.0, size=2)
    phi0 = np.asarray(rng.uniform(0.0, 2 * math.pi))

    def make_state(inputs):
        state = init_state(config, model, setup)
        p = state.patterns[0]
        p.offsets = np.asarray(inputs[0], dtype=np.float64)
        p.center = np.asarray(inputs[1], dtype=np.float64)
        p.phi = float(inputs[2])
        return state

    def forward_fn(inputs):
        state = make_state(inputs)
        total, _, _ = _forward_impl(
            state, config, model, detector, [cam], [0], setup, False
        )
        return np.asarray(total)

    def vjp(inputs, cotangent):
        state = make_state(inputs)
        _, _, grads = _forward_impl(
            state, config, model, detector, [cam], [0], setup, True
        )
        g = grads[0]
        c = float(cotangent)
        return [c * g["offsets"], c * g["center"], np.asarray(c * g["phi"])]

    op = DiffOp(
        name="attack.total_loss", forward=forward_fn, vjp=vjp,
        diff_mask=(True, True, True),
    )
    return op, [offsets0, center0.astype(np.float64), phi0], {"tol": 1e-3}


register_gradcheck_case("attack.total_loss", _total_loss_case)
