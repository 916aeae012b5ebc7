import numpy as np
import pytest

from msvr.pyramid import (
    Image,
    augment,
    build_pyramid,
    hflip,
    load_image,
    read_ppm,
    read_raw_float,
    resize,
    write_ppm,
    write_raw_float,
)


def random_image(rng, h, w):
    return Image(rng.uniform(0, 1, (3, h, w)))


def test_image_rejects_out_of_range():
    with pytest.raises(ValueError):
        Image(np.full((3, 4, 4), 1.5))
    with pytest.raises(ValueError):
        Image(np.zeros((4, 4, 3)))


def test_resize_same_size_is_identity():
    rng = np.random.default_rng(0)
    img = random_image(rng, 9, 9)
    out = resize(img, 9)
    assert np.array_equal(out.pixels, img.pixels)


def test_resize_preserves_constants():
    img = Image(np.full((3, 5, 7), 0.37))
    out = resize(img, 12)
    assert np.allclose(out.pixels, 0.37, atol=1e-12)


def test_resize_checkerboard_to_single_pixel():
    board = np.zeros((3, 2, 2))
    board[:, 0, 1] = 1.0
    board[:, 1, 0] = 1.0
    out = resize(Image(board), 1)
    assert np.allclose(out.pixels, 0.5, atol=1e-12)


def test_resize_nearest_available():
    rng = np.random.default_rng(1)
    img = random_image(rng, 6, 6)
    out = resize(img, 3, method="nearest")
    assert out.pixels.shape == (3, 3, 3)
    # every output pixel is an exact input pixel
    assert all(v in img.pixels for v in out.pixels.reshape(-1))


def test_flip_is_involution():
    rng = np.random.default_rng(2)
    img = random_image(rng, 8, 10)
    assert np.array_equal(hflip(hflip(img)).pixels, img.pixels)


def test_augment_forced_flip_twice_restores():
    rng = np.random.default_rng(3)
    img = random_image(rng, 12, 12)
    once = augment(img, np.random.default_rng(0), crop_area_range=(1.0, 1.0), flip_prob=1.0)
    twice = augment(once, np.random.default_rng(0), crop_area_range=(1.0, 1.0), flip_prob=1.0)
    assert np.array_equal(twice.pixels, img.pixels)


def test_augment_full_crop_no_flip_is_identity():
    rng = np.random.default_rng(4)
    img = random_image(rng, 16, 16)
    out = augment(img, np.random.default_rng(7), crop_area_range=(1.0, 1.0), flip_prob=0.0)
    assert np.array_equal(out.pixels, img.pixels)


def test_augment_stays_in_range_under_fuzz():
    rng = np.random.default_rng(5)
    stream = np.random.default_rng(6)
    for _ in range(1000):
        h = int(rng.integers(8, 24))
        w = int(rng.integers(8, 24))
        out = augment(random_image(rng, h, w), stream)
        assert out.pixels.min() >= 0.0
        assert out.pixels.max() <= 1.0
        assert (out.height, out.width) == (h, w)


def test_augment_deterministic_for_equal_streams():
    rng = np.random.default_rng(8)
    img = random_image(rng, 20, 20)
    a = augment(img, np.random.default_rng(123))
    b = augment(img, np.random.default_rng(123))
    assert np.array_equal(a.pixels, b.pixels)


def test_augment_rejects_tiny_images():
    with pytest.raises(ValueError):
        augment(Image(np.zeros((3, 4, 4))), np.random.default_rng(0))


def test_build_pyramid_shapes():
    rng = np.random.default_rng(9)
    sample = build_pyramid(random_image(rng, 40, 40), [64, 48], source="x", label=3)
    assert [im.pixels.shape for im in sample.images] == [(3, 64, 64), (3, 48, 48)]
    assert sample.label == 3
    assert sample.scales == (64, 48)


def test_build_pyramid_without_augment_is_pure_resize():
    rng = np.random.default_rng(10)
    img = random_image(rng, 30, 30)
    sample = build_pyramid(img, [16, 8])
    for side, view in zip([16, 8], sample.images):
        assert np.array_equal(view.pixels, resize(img, side).pixels)


def test_build_pyramid_deterministic_with_seed():
    rng = np.random.default_rng(11)
    img = random_image(rng, 30, 30)
    a = build_pyramid(img, [16, 8], augment_enabled=True, rng=np.random.default_rng(5))
    b = build_pyramid(img, [16, 8], augment_enabled=True, rng=np.random.default_rng(5))
    for va, vb in zip(a.images, b.images):
        assert np.array_equal(va.pixels, vb.pixels)


def test_build_pyramid_scales_share_one_augmentation():
    # with the crop pinned to full size and flip forced, every scale must be
    # the flipped resize of the source
    rng = np.random.default_rng(12)
    img = random_image(rng, 24, 24)
    sample = build_pyramid(
        img,
        [12, 6],
        augment_enabled=True,
        rng=np.random.default_rng(0),
        crop_area_range=(1.0, 1.0),
        flip_prob=1.0,
    )
    flipped = hflip(img)
    for side, view in zip([12, 6], sample.images):
        assert np.array_equal(view.pixels, resize(flipped, side).pixels)


def test_build_pyramid_requires_scales():
    with pytest.raises(ValueError):
        build_pyramid(Image(np.zeros((3, 10, 10))), [])


def test_ppm_roundtrip_quantizes_to_8bit(tmp_path):
    rng = np.random.default_rng(13)
    img = random_image(rng, 11, 7)
    path = tmp_path / "img.ppm"
    write_ppm(img, path)
    back = read_ppm(path)
    assert back.pixels.shape == img.pixels.shape
    assert np.max(np.abs(back.pixels - img.pixels)) <= 0.5 / 255 + 1e-12


def test_ppm_bytes_deterministic(tmp_path):
    rng = np.random.default_rng(14)
    img = random_image(rng, 5, 5)
    p1, p2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
    write_ppm(img, p1)
    write_ppm(img, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_raw_float_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(15)
    img = random_image(rng, 6, 9)
    path = tmp_path / "img.pln"
    write_raw_float(img, path)
    back = read_raw_float(path)
    assert np.array_equal(back.pixels, img.pixels)


def test_load_image_dispatches_on_extension(tmp_path):
    rng = np.random.default_rng(16)
    img = random_image(rng, 4, 4)
    ppm = tmp_path / "x.ppm"
    raw = tmp_path / "x.pln"
    write_ppm(img, ppm)
    write_raw_float(img, raw)
    assert load_image(ppm).pixels.shape == (3, 4, 4)
    assert np.array_equal(load_image(raw).pixels, img.pixels)
