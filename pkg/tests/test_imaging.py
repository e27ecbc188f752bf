"""Resampling, metrics, and PGM round trips."""

import numpy as np
import pytest

from patchwalk import imaging
from patchwalk.imaging import ImagingError


def test_normalize_denormalize_are_inverse():
    u = np.linspace(0.0, 1.0, 11)
    np.testing.assert_allclose(imaging.denormalize(imaging.normalize(u)), u,
                               atol=1e-15)


# -- bicubic resampling -------------------------------------------------------

def test_identity_resize_is_exact():
    rng = np.random.default_rng(0)
    img = rng.uniform(-1, 1, (13, 17))
    np.testing.assert_allclose(imaging.bicubic_resize(img, 13, 17), img,
                               atol=1e-12)


def test_constant_images_stay_constant():
    # weight rows sum to one, so flat fields pass through at any ratio
    for value in (-1.0, 0.25, 1.0):
        img = np.full((16, 16), value)
        for hw in ((32, 32), (8, 8), (24, 12)):
            out = imaging.bicubic_resize(img, *hw)
            np.testing.assert_allclose(out, value, atol=1e-12)


def test_upscale_preserves_interior_ramps():
    # cubic convolution reproduces affine signals away from the clamped edges
    yy, xx = np.mgrid[0:16, 0:16]
    img = 0.02 * xx + 0.01 * yy - 0.3
    out = imaging.bicubic_resize(img, 32, 32)
    want_x = np.mgrid[0:32, 0:32][1]
    # interior columns map to source coordinate (j+0.5)/2 - 0.5
    src_x = (want_x + 0.5) / 2.0 - 0.5
    src_y = (np.mgrid[0:32, 0:32][0] + 0.5) / 2.0 - 0.5
    want = 0.02 * src_x + 0.01 * src_y - 0.3
    np.testing.assert_allclose(out[4:-4, 4:-4], want[4:-4, 4:-4], atol=1e-12)


def test_resize_output_is_clipped():
    img = np.zeros((8, 8))
    img[::2, ::2] = 1.0
    img[1::2, 1::2] = -1.0
    out = imaging.bicubic_resize(img, 32, 32)
    assert out.max() <= 1.0 and out.min() >= -1.0


def test_resize_rejects_bad_inputs():
    with pytest.raises(ImagingError):
        imaging.bicubic_resize(np.zeros((4, 4, 1)), 8, 8)
    with pytest.raises(ImagingError):
        imaging.bicubic_resize(np.zeros((4, 4)), 0, 8)


def test_degrade_validates_factor_and_extents():
    img = np.zeros((64, 64))
    assert imaging.degrade(img, 4).shape == (16, 16)
    with pytest.raises(ImagingError):
        imaging.degrade(img, 3)
    with pytest.raises(ImagingError):
        imaging.degrade(np.zeros((66, 64)), 4)
    with pytest.raises(ImagingError):
        imaging.degrade(np.zeros((16, 16)), 4)  # would fall below 8 px


# -- metrics ---------------------------------------------------------------------

def test_psnr_identity_hits_the_cap():
    img = np.zeros((12, 12))
    assert imaging.psnr(img, img) == imaging.PSNR_CAP


def test_psnr_known_case_is_20db():
    # denormalized offset 0.1 -> mse 0.01 -> 10*log10(1/0.01) = 20
    a = np.zeros((10, 10))
    b = np.full((10, 10), 0.2)
    assert abs(imaging.psnr(a, b) - 20.0) < 1e-12


def test_psnr_symmetry_and_shape_check():
    rng = np.random.default_rng(1)
    a = rng.uniform(-1, 1, (9, 9))
    b = rng.uniform(-1, 1, (9, 9))
    assert imaging.psnr(a, b) == imaging.psnr(b, a)
    with pytest.raises(ImagingError):
        imaging.psnr(a, b[:5])


def test_ssim_identity_is_one():
    rng = np.random.default_rng(2)
    img = rng.uniform(-1, 1, (16, 16))
    assert abs(imaging.ssim(img, img) - 1.0) < 1e-12


def test_ssim_degrades_with_noise_and_is_symmetric():
    rng = np.random.default_rng(3)
    a = rng.uniform(-0.5, 0.5, (20, 20))
    b = np.clip(a + 0.3 * rng.standard_normal((20, 20)), -1, 1)
    s = imaging.ssim(a, b)
    assert s < 0.95
    assert abs(s - imaging.ssim(b, a)) < 1e-12


def test_ssim_needs_a_window():
    with pytest.raises(ImagingError):
        imaging.ssim(np.zeros((8, 8)), np.zeros((8, 8)))


# -- PGM I/O -----------------------------------------------------------------------

def test_save_load_round_trip_on_the_8bit_lattice(tmp_path):
    rng = np.random.default_rng(4)
    q = rng.integers(0, 256, size=(15, 9)).astype(np.uint8)
    img = imaging.normalize(q / 255.0)
    path = tmp_path / "img.pgm"
    imaging.save_image(img, path)
    back = imaging.load_image(path)
    np.testing.assert_allclose(back, img, atol=1e-12)


def test_save_quantizes_out_of_lattice_values(tmp_path):
    img = np.full((8, 8), 0.123456)
    path = tmp_path / "img.pgm"
    imaging.save_image(img, path)
    back = imaging.load_image(path)
    assert np.max(np.abs(back - img)) <= 1.0 / 255.0


def test_header_comments_are_skipped(tmp_path):
    payload = bytes(range(6))
    raw = b"P5\n# comment line\n3 2\n# another\n255\n" + payload
    path = tmp_path / "c.pgm"
    path.write_bytes(raw)
    img = imaging.load_image(path)
    assert img.shape == (2, 3)
    np.testing.assert_allclose(
        img, imaging.normalize(np.arange(6).reshape(2, 3) / 255.0), atol=1e-12)


@pytest.mark.parametrize("raw", [
    b"P2\n3 2\n255\n" + bytes(6),          # ascii variant unsupported
    b"P5\n3 2\n65535\n" + bytes(12),       # wide samples unsupported
    b"P5\n3 2\n255\n" + bytes(3),          # payload short
    b"P5\n3\n",                            # header cut off
    b"P5\nx 2\n255\n" + bytes(6),          # malformed extent
])
def test_bad_pgm_is_rejected(tmp_path, raw):
    path = tmp_path / "bad.pgm"
    path.write_bytes(raw)
    with pytest.raises(ImagingError):
        imaging.load_image(path)


def test_save_rejects_non_planes(tmp_path):
    with pytest.raises(ImagingError):
        imaging.save_image(np.zeros((2, 2, 2)), tmp_path / "x.pgm")
