"""Infrared adversarial sticker patterns for 3D vehicle models.

Deformable meshes are projected to 2D shadow silhouettes, composited onto a
car's infrared texture at optimized positions and angles, rendered from
sampled viewpoints, and driven to suppress a detector's object confidence.
Evaluation measures the attack success rate over a full viewing grid, either
with the built-in template detector or any HTTP detector service speaking the
bridge protocol.
"""

__version__ = "0.1.0"

from . import assets, attack, diffcore, eval, geometry, images, losses, objective, scene, shadow
from .attack import AttackConfig, AttackState, demo_attack_config
from .attack import run as run_attack
from .eval import ASRReport, EvalGrid, compute_asr, default_grid
from .geometry import TriMesh, load_obj, make_icosphere, save_obj
from .objective import Detection, TemplateDetector, build_template_detector
from .scene import CameraParams, CarModel, TextureMap, render
from .shadow import PatternRaster, ShadowParams, shadow_project

__all__ = [
    "__version__",
    "assets",
    "attack",
    "diffcore",
    "eval",
    "geometry",
    "images",
    "losses",
    "objective",
    "scene",
    "shadow",
    "AttackConfig",
    "AttackState",
    "demo_attack_config",
    "run_attack",
    "ASRReport",
    "EvalGrid",
    "compute_asr",
    "default_grid",
    "TriMesh",
    "load_obj",
    "make_icosphere",
    "save_obj",
    "Detection",
    "TemplateDetector",
    "build_template_detector",
    "CameraParams",
    "CarModel",
    "TextureMap",
    "render",
    "PatternRaster",
    "ShadowParams",
    "shadow_project",
]
