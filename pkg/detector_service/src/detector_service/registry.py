"""Detector registry: named torchvision models behind one constructor.

Five family names are accepted. The three torchvision families construct
directly; the yolo and detr families are registered so configs naming them
fail with guidance instead of a typo error, but they need packages or
weight downloads this service does not ship.
"""

from __future__ import annotations

from pathlib import Path

import torch
import torchvision


class ModelUnavailable(RuntimeError):
    """The requested model cannot be constructed in this installation."""


REGISTRY = ("faster-rcnn", "retinanet", "ssd", "yolo", "detr")

_UNAVAILABLE = {
    "yolo": "the yolo family needs the ultralytics package, which is not a dependency",
    "detr": "the detr family needs transformer weights downloaded from a model hub",
}

_TORCHVISION = {
    "faster-rcnn": "fasterrcnn_resnet50_fpn",
    "retinanet": "retinanet_resnet50_fpn",
    "ssd": "ssd300_vgg16",
}

# Detection-task COCO category ids (91 slots, 0 is background). Ids that the
# dataset never assigned are absent and map to a generic name.
COCO_NAMES = {
    1: "person", 2: "bicycle", 3: "car", 4: "motorcycle", 5: "airplane",
    6: "bus", 7: "train", 8: "truck", 9: "boat", 10: "traffic light",
    11: "fire hydrant", 13: "stop sign", 14: "parking meter", 15: "bench",
    16: "bird", 17: "cat", 18: "dog", 19: "horse", 20: "sheep", 21: "cow",
    22: "elephant", 23: "bear", 24: "zebra", 25: "giraffe", 27: "backpack",
    28: "umbrella", 31: "handbag", 32: "tie", 33: "suitcase", 34: "frisbee",
    35: "skis", 36: "snowboard", 37: "sports ball", 38: "kite",
    39: "baseball bat", 40: "baseball glove", 41: "skateboard",
    42: "surfboard", 43: "tennis racket", 44: "bottle", 46: "wine glass",
    47: "cup", 48: "fork", 49: "knife", 50: "spoon", 51: "bowl",
    52: "banana", 53: "apple", 54: "sandwich", 55: "orange", 56: "broccoli",
    57: "carrot", 58: "hot dog", 59: "pizza", 60: "donut", 61: "cake",
    62: "chair", 63: "couch", 64: "potted plant", 65: "bed",
    67: "dining table", 70: "toilet", 72: "tv", 73: "laptop", 74: "mouse",
    75: "remote", 76: "keyboard", 77: "cell phone", 78: "microwave",
    79: "oven", 80: "toaster", 81: "sink", 82: "refrigerator", 84: "book",
    85: "clock", 86: "vase", 87: "scissors", 88: "teddy bear",
    89: "hair drier", 90: "toothbrush",
}


def label_name(category_id: int) -> str:
    return COCO_NAMES.get(int(category_id), f"class_{int(category_id)}")


def build_model(name: str, weights: str = "none", device: str = "cpu"):
    """Construct an eval-mode detection model on the requested device.

    ``weights`` is "default" (pretrained, needs download access), "none"
    (random initialization, schema-conformant but blind), or a filesystem
    path to a saved state dict.
    """
    if name not in REGISTRY:
        raise ValueError(f"unknown model {name!r}; registry: {', '.join(REGISTRY)}")
    if name in _UNAVAILABLE:
        raise ModelUnavailable(f"{name} is registered but not buildable here: {_UNAVAILABLE[name]}")
    ctor = getattr(torchvision.models.detection, _TORCHVISION[name])
    if weights == "default":
        try:
            model = ctor(weights="DEFAULT")
        except Exception as e:
            raise ModelUnavailable(f"pretrained weights for {name} not obtainable: {e}") from e
    elif weights == "none":
        model = ctor(weights=None, weights_backbone=None)
    else:
        path = Path(weights)
        if not path.exists():
            raise ModelUnavailable(f"weights file not found: {path}")
        model = ctor(weights=None, weights_backbone=None)
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
            model.load_state_dict(state)
        except Exception as e:
            raise ModelUnavailable(f"weights file {path} does not fit {name}: {e}") from e
    model.eval()
    return model.to(torch.device(device))
