"""Texture compositing, perspective rendering, and EOT sampling."""

import numpy as np
import pytest

from shadowforge.assets import demo_car
from shadowforge.scene import (
    CameraParams,
    EOTConfig,
    NoObjectError,
    PastePlacement,
    TextureMap,
    apply_pattern_noise,
    bilinear_sample,
    eot_sample,
    paste_patterns,
    render,
    silhouette_bbox,
)
from shadowforge.shadow import PatternRaster


def test_bilinear_sample_hand_cases():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    values = bilinear_sample(
        img,
        np.array([0.0, 1.0, 0.5, 0.25]),
        np.array([0.0, 1.0, 0.5, 0.0]),
    )[0]
    # Exact texel hits return the texel; interior points blend linearly.
    np.testing.assert_allclose(values, [0.0, 3.0, 1.5, 0.25], atol=1e-12)


def test_bilinear_sample_clamps_at_border():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    values = bilinear_sample(img, np.array([-5.0, 10.0]), np.array([0.0, 10.0]))[0]
    np.testing.assert_allclose(values, [0.0, 3.0], atol=1e-12)


def test_paste_patterns_alpha_blend():
    origin = TextureMap(gray=np.full((16, 16), 0.6))
    alpha = np.zeros((4, 4))
    alpha[1:3, 1:3] = 1.0
    alpha[0, 0] = 0.5
    pattern = PatternRaster(alpha=alpha, gray=0.1)
    placement = PastePlacement(
        center=np.array([8.0, 8.0]), region=(0, 0, 15, 15)
    )
    pasted = paste_patterns(origin, [pattern], [placement])
    out = pasted.gray
    # Full-alpha texels take the pattern gray, half-alpha ones blend.
    assert np.isclose(out[8, 8], 0.1) or np.isclose(out[7, 7], 0.1)
    assert np.isclose(out.max(), 0.6)
    blended = 0.5 * 0.6 + 0.5 * 0.1
    assert np.isclose(out, blended, atol=1e-9).any()
    # Texels away from the paste window are untouched.
    assert np.isclose(out[0, 0], 0.6)
    assert np.isclose(out[15, 15], 0.6)


def test_paste_patterns_clips_to_region_with_warning():
    origin = TextureMap(gray=np.full((16, 16), 0.6))
    pattern = PatternRaster(alpha=np.ones((6, 6)), gray=0.0)
    placement = PastePlacement(center=np.array([1.0, 8.0]), region=(0, 0, 15, 15))
    warnings: list = []
    pasted = paste_patterns(origin, [pattern], [placement], warnings=warnings)
    assert warnings
    # Nothing leaks outside the region; the in-region part is applied.
    assert pasted.gray.min() == 0.0
    assert pasted.gray[8, 0] == 0.0


def test_paste_placement_rejects_center_outside_region():
    with pytest.raises(ValueError):
        PastePlacement(center=np.array([30.0, 30.0]), region=(40, 2, 62, 62))


def test_render_produces_object_and_background():
    car = demo_car()
    cam = CameraParams(dist=3.0, elev=25.0, azim=40.0, width=96, height=96)
    img = render(car.mesh, car.texture, cam, car.background)
    assert img.gray.shape == (96, 96)
    assert img.mask.dtype == bool
    assert img.mask.any() and not img.mask.all()
    # Background texels carry exactly the background level.
    assert np.isclose(img.gray[~img.mask], car.background).all()
    assert img.gray.min() >= 0.0 and img.gray.max() <= 1.0


def test_render_texture_changes_hit_the_image():
    car = demo_car()
    cam = CameraParams(dist=3.0, elev=25.0, azim=40.0, width=96, height=96)
    base = render(car.mesh, car.texture, cam, car.background)
    dark = TextureMap(gray=np.zeros_like(car.texture.gray))
    black = render(car.mesh, dark, cam, car.background)
    np.testing.assert_array_equal(base.mask, black.mask)
    assert black.gray[black.mask].mean() < base.gray[base.mask].mean()


def test_silhouette_bbox_contains_mask():
    car = demo_car()
    cam = CameraParams(dist=3.0, elev=25.0, azim=40.0, width=96, height=96)
    img = render(car.mesh, car.texture, cam, car.background)
    x1, y1, x2, y2 = silhouette_bbox(img)
    rows, cols = np.nonzero(img.mask)
    assert x1 == cols.min() and y1 == rows.min()
    assert x2 == cols.max() and y2 == rows.max()


def test_silhouette_bbox_empty_mask_raises():
    img_gray = np.full((8, 8), 0.35)
    from shadowforge.scene import RenderedImage

    with pytest.raises(NoObjectError):
        silhouette_bbox(RenderedImage(gray=img_gray, mask=np.zeros((8, 8), bool)))


def test_eot_sample_deterministic_and_in_range():
    config = EOTConfig(
        vertex_sigma=0.002,
        noise_density=0.02,
        noise_amplitude=0.3,
        gray_delta=0.03,
        pos_delta=1.0,
        backgrounds=(0.3, 0.35, 0.4),
    )
    a = eot_sample(config, seed=7)
    b = eot_sample(config, seed=7)
    assert a.background == b.background
    np.testing.assert_array_equal(a.pos_delta, b.pos_delta)
    assert a.noise_seed == b.noise_seed
    assert abs(a.gray_delta) <= 0.03 + 1e-12
    assert np.abs(a.pos_delta).max() <= 1.0 + 1e-12
    assert a.background in config.backgrounds
    c = eot_sample(config, seed=8)
    assert (
        a.gray_delta != c.gray_delta
        or not np.array_equal(a.pos_delta, c.pos_delta)
        or a.noise_seed != c.noise_seed
    )


def test_eot_sample_zero_config_is_identity_like():
    sample = eot_sample(EOTConfig(), seed=3)
    assert sample.vertex_sigma == 0.0
    assert sample.gray_delta == 0.0
    np.testing.assert_array_equal(sample.pos_delta, np.zeros(2))
    assert sample.background == 0.35


def test_apply_pattern_noise_properties():
    alpha = np.full((32, 32), 0.5)
    noisy, _ = apply_pattern_noise(alpha, density=0.1, amplitude=0.3, seed=2)
    again, _ = apply_pattern_noise(alpha, density=0.1, amplitude=0.3, seed=2)
    np.testing.assert_array_equal(noisy, again)
    assert noisy.shape == alpha.shape
    assert (noisy >= 0.0).all() and (noisy <= 1.0).all()
    changed = ~np.isclose(noisy, 0.5)
    rate = changed.mean()
    assert 0.02 < rate < 0.25
    # Touched texels move by exactly the amplitude in either direction.
    moved = np.unique(np.round(noisy[changed], 6))
    assert set(moved) <= {0.2, 0.8}
    assert len(moved) == 2


def test_apply_pattern_noise_pass_mask_flags_clipping():
    # The secondary output gates gradients: zero wherever clipping engaged.
    alpha = np.array([[1.0, 0.5], [0.0, 0.5]])
    noisy, passthrough = apply_pattern_noise(
        alpha, density=2.0, amplitude=0.3, seed=0
    )
    assert (noisy >= 0.0).all() and (noisy <= 1.0).all()
    raw_clipped = (noisy == 0.0) | (noisy == 1.0)
    assert not passthrough[raw_clipped].any()


def test_apply_pattern_noise_zero_density_is_identity():
    alpha = np.random.default_rng(0).random((8, 8))
    noisy, _ = apply_pattern_noise(alpha, density=0.0, amplitude=0.3, seed=5)
    np.testing.assert_array_equal(noisy, alpha)
