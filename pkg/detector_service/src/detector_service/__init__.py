"""HTTP object-detection service speaking the JSON bridge protocol."""

from .registry import COCO_NAMES, REGISTRY, ModelUnavailable, build_model, label_name
from .service import ServiceConfig, create_app, serve

__version__ = "0.1.0"

__all__ = [
    "COCO_NAMES",
    "REGISTRY",
    "ModelUnavailable",
    "ServiceConfig",
    "build_model",
    "create_app",
    "label_name",
    "serve",
    "__version__",
]
