import numpy as np
import pytest

from crossview_lm import (CameraModel, Grad3Extractor, Poly3Extractor,
                          SatelliteFrame, extract_pyramid)
from crossview_lm.features import (downsample_half, l2_normalize_per_pixel,
                                   to_grayscale)


class TestGrayscale:
    def test_white_saturates(self):
        img = np.full((2, 2, 3), 255, dtype=np.uint8)
        np.testing.assert_allclose(to_grayscale(img), 1.0)

    def test_pure_red_luma(self):
        img = np.zeros((1, 1, 3), dtype=np.uint8)
        img[..., 0] = 255
        assert to_grayscale(img)[0, 0] == pytest.approx(0.299)

    def test_eight_bit_gray_passthrough(self):
        img = np.full((3, 3), 128, dtype=np.uint8)
        np.testing.assert_allclose(to_grayscale(img), 128 / 255)

    def test_sixteen_bit_scaling(self):
        img = np.full((2, 2), 65535, dtype=np.uint16)
        np.testing.assert_allclose(to_grayscale(img), 1.0)

    def test_empty_image_rejected(self):
        with pytest.raises(ValueError):
            to_grayscale(np.zeros((0, 4)))


class TestDownsample:
    def test_constant_invariance(self):
        grid = np.full((6, 8), 0.37)
        np.testing.assert_allclose(downsample_half(grid), 0.37)

    def test_two_by_two_box_average(self):
        out = downsample_half(np.array([[0.0, 1.0], [2.0, 3.0]]))
        assert out.shape == (1, 1)
        assert out[0, 0] == pytest.approx(1.5)

    def test_checkerboard_averages_to_half(self):
        board = np.indices((4, 4)).sum(axis=0) % 2
        np.testing.assert_allclose(downsample_half(board.astype(float)), 0.5)

    def test_odd_dimensions_floor(self):
        out = downsample_half(np.zeros((5, 7)))
        assert out.shape == (2, 3)

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            downsample_half(np.zeros((1, 5)))


class TestNormalize:
    def test_three_four_five(self):
        out = l2_normalize_per_pixel(np.array([[[3.0, 4.0]]]))
        np.testing.assert_allclose(out[0, 0], [0.6, 0.8])

    def test_zero_vector_stays_zero(self):
        out = l2_normalize_per_pixel(np.zeros((2, 2, 3)))
        np.testing.assert_array_equal(out, 0.0)

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        ch = rng.normal(size=(8, 8, 3))
        ch[0, 0] = 0.0
        once = l2_normalize_per_pixel(ch)
        twice = l2_normalize_per_pixel(once)
        assert np.abs(twice - once).max() < 1e-12

    def test_unit_vector_unchanged(self):
        ch = np.array([[[1.0, 0.0, 0.0]]])
        assert np.abs(l2_normalize_per_pixel(ch) - ch).max() < 1e-12


class TestPyramid:
    def test_satellite_level_dimensions(self):
        pyr = extract_pyramid(np.zeros((512, 512)), Poly3Extractor(),
                              frame=SatelliteFrame.centered(0.2, 512, 512))
        assert (pyr[1].height, pyr[1].width) == (64, 64)
        assert (pyr[2].height, pyr[2].width) == (128, 128)
        assert (pyr[3].height, pyr[3].width) == (256, 256)

    def test_ground_level_dimensions(self):
        cam = CameraModel(fx=256, fy=256, cx=511.5, cy=127.5, height=1.65,
                          width=1024, height_px=256)
        pyr = extract_pyramid(np.zeros((256, 1024)), Poly3Extractor(),
                              camera=cam)
        assert (pyr[1].height, pyr[1].width) == (32, 128)
        assert (pyr[2].height, pyr[2].width) == (64, 256)
        assert (pyr[3].height, pyr[3].width) == (128, 512)

    def test_constant_image_grad3_unit_intensity_feature(self):
        pyr = extract_pyramid(np.full((64, 64), 0.6), Grad3Extractor())
        for level in (1, 2, 3):
            data = pyr[level].data
            np.testing.assert_allclose(data[..., 0], 1.0, atol=1e-12)
            np.testing.assert_allclose(data[..., 1:], 0.0, atol=1e-12)

    def test_too_small_image_rejected(self):
        with pytest.raises(ValueError):
            extract_pyramid(np.zeros((16, 16)), Poly3Extractor())

    def test_grad3_gain_invariance(self):
        rng = np.random.default_rng(1)
        image = rng.uniform(0.2, 0.8, size=(64, 64))
        base = extract_pyramid(image, Grad3Extractor())
        scaled = extract_pyramid(3.7 * image, Grad3Extractor())
        for level in (1, 2, 3):
            a, b = base[level].data, scaled[level].data
            norms = np.linalg.norm(a, axis=-1)
            mask = norms > 0
            assert np.abs(a[mask] - b[mask]).max() < 1e-9

    def test_per_pixel_unit_norm_invariant(self):
        rng = np.random.default_rng(2)
        image = rng.uniform(size=(64, 96))
        for extractor in (Poly3Extractor(), Grad3Extractor()):
            pyr = extract_pyramid(image, extractor)
            for level in (1, 2, 3):
                norms = np.linalg.norm(pyr[level].data, axis=-1)
                ok = (np.abs(norms - 1.0) < 1e-12) | (norms == 0.0)
                assert ok.all()

    def test_satellite_alpha_width_level_invariant(self):
        frame = SatelliteFrame.centered(0.2, 512, 512)
        pyr = extract_pyramid(np.zeros((512, 512)), Poly3Extractor(),
                              frame=frame)
        coverage = frame.alpha * frame.width
        for level in (1, 2, 3):
            lv = pyr[level].frame
            assert abs(lv.alpha * lv.width - coverage) < 1e-9 * coverage

    def test_levels_carry_scaled_geometry(self):
        cam = CameraModel(fx=256, fy=256, cx=511.5, cy=127.5, height=1.65,
                          width=1024, height_px=256)
        pyr = extract_pyramid(np.zeros((256, 1024)), Poly3Extractor(),
                              camera=cam)
        assert pyr[1].camera.fx == pytest.approx(32.0)
        assert pyr[1].camera.height == cam.height

    def test_extractors_deterministic(self):
        rng = np.random.default_rng(3)
        image = rng.uniform(size=(64, 64))
        for extractor_cls in (Poly3Extractor, Grad3Extractor):
            a = extract_pyramid(image.copy(), extractor_cls())
            b = extract_pyramid(image.copy(), extractor_cls())
            for level in (1, 2, 3):
                np.testing.assert_array_equal(a[level].data, b[level].data)
