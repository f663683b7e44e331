"""Model registry: construction, rejection, and configuration validation."""

import pytest

from detector_service import ModelUnavailable, ServiceConfig, build_model


def test_unknown_model_name_rejected():
    with pytest.raises(ValueError):
        build_model("mask-rcnn")


@pytest.mark.parametrize("family", ["yolo", "detr"])
def test_registered_but_unbuildable_families(family):
    with pytest.raises(ModelUnavailable) as info:
        build_model(family)
    # The error explains what is missing, not just that it failed.
    assert "needs" in str(info.value)


def test_faster_rcnn_builds_without_weights():
    model = build_model("faster-rcnn", weights="none")
    assert not model.training


def test_missing_weights_path_is_model_unavailable(tmp_path):
    with pytest.raises(ModelUnavailable) as info:
        build_model("faster-rcnn", weights=str(tmp_path / "absent.pth"))
    assert "not found" in str(info.value)


def test_config_validates_model_name():
    with pytest.raises(ValueError):
        ServiceConfig(model="mask-rcnn")


def test_config_validates_score_floor():
    with pytest.raises(ValueError):
        ServiceConfig(score_floor=1.5)


def test_config_validates_port():
    with pytest.raises(ValueError):
        ServiceConfig(port=70000)


def test_config_accepts_registered_but_unbuildable_name():
    # The registry invariant is on the name; buildability is checked at
    # construction time with its own error type.
    config = ServiceConfig(model="yolo")
    assert config.model == "yolo"
