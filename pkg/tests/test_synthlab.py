import math

import numpy as np
import pytest

from filament_sr.errors import ParameterError
from filament_sr.imgcore import Image2D
from filament_sr.postmetrics import fwhm, line_profile
from filament_sr.synthlab import (
    DegradationSpec,
    PhantomSpec,
    Psf,
    convolve2d,
    degrade,
    gaussian_psf,
    generate_phantom,
    render_filaments,
)


def brute_convolve(img, k, boundary):
    """Direct sum out(y,x) = sum_ij k(i,j) img(y-i+r, x-j+r) with explicit edge handling."""
    h, w = img.shape
    r0, r1 = k.shape[0] // 2, k.shape[1] // 2
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            s = 0.0
            for i in range(k.shape[0]):
                for j in range(k.shape[1]):
                    yy, xx = y - (i - r0), x - (j - r1)
                    if boundary == "reflect":
                        yy = -yy - 1 if yy < 0 else (2 * h - yy - 1 if yy >= h else yy)
                        xx = -xx - 1 if xx < 0 else (2 * w - xx - 1 if xx >= w else xx)
                    elif not (0 <= yy < h and 0 <= xx < w):
                        continue
                    s += k[i, j] * img[yy, xx]
            out[y, x] = s
    return out


class TestPsf:
    def test_delta_limit(self):
        assert gaussian_psf(1e-6, 1).kernel[1, 1] >= 1 - 1e-9

    @pytest.mark.parametrize("sigma", [0.3, 1.0, 2.0, 4.7])
    def test_normalized_and_symmetric(self, sigma):
        k = gaussian_psf(sigma).kernel
        assert abs(k.sum() - 1) <= 1e-12
        np.testing.assert_array_equal(k, k[::-1, ::-1])
        np.testing.assert_array_equal(k, k.T)

    def test_center_edge_ratio(self):
        k = gaussian_psf(2.0, 6).kernel
        assert k[6, 6] / k[6, 0] == pytest.approx(math.exp(36 / 8), rel=1e-12)

    def test_rejects_bad_sigma(self):
        with pytest.raises(ParameterError):
            gaussian_psf(0.0)


class TestConvolve:
    def test_delta_identity(self):
        img = Image2D(np.random.default_rng(0).random((9, 9)))
        delta = Psf(np.pad([[1.0]], 1))
        np.testing.assert_array_equal(convolve2d(img, delta).values, img.values)

    def test_linearity(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((20, 20)), rng.random((20, 20))
        p = gaussian_psf(1.5)
        lhs = convolve2d(Image2D(a + b), p).values
        rhs = convolve2d(Image2D(a), p).values + convolve2d(Image2D(b), p).values
        assert np.max(np.abs(lhs - rhs)) <= 1e-10 * np.max(np.abs(lhs))

    @pytest.mark.parametrize("boundary", ["reflect", "zero"])
    def test_against_brute_force(self, boundary):
        rng = np.random.default_rng(2)
        for shape, ks in [((5, 5), (3, 3)), ((16, 16), (5, 5)), ((7, 12), (5, 3)), ((11, 6), (1, 5))]:
            img = rng.random(shape)
            k = rng.random(ks)
            psf = Psf(k)
            got = convolve2d(Image2D(img), psf, boundary).values
            np.testing.assert_allclose(got, brute_convolve(img, psf.kernel, boundary), rtol=0, atol=1e-12)

    def test_shift_equivariant_interior(self):
        rng = np.random.default_rng(3)
        img = np.zeros((32, 32))
        img[10:14, 10:14] = rng.random((4, 4))
        p = gaussian_psf(1.0)
        a = convolve2d(Image2D(img), p).values
        b = convolve2d(Image2D(np.roll(img, (3, 5), axis=(0, 1))), p).values
        np.testing.assert_allclose(np.roll(a, (3, 5), axis=(0, 1)), b, atol=1e-15)


class TestDegrade:
    def test_delta_no_noise_identity(self):
        h = Image2D(np.random.default_rng(0).random((12, 12)))
        spec = DegradationSpec(Psf(np.pad([[1.0]], 1)), "none")
        np.testing.assert_array_equal(degrade(h, spec).values, h.values)

    def test_zero_param_is_noiseless(self):
        h = Image2D(np.random.default_rng(1).random((12, 12)))
        spec = DegradationSpec(gaussian_psf(1.0), "gaussian", 0.0, seed=3)
        np.testing.assert_array_equal(degrade(h, spec).values, convolve2d(h, spec.psf).values)

    def test_gaussian_noise_unbiased(self):
        s = 0.5
        h = Image2D(np.full((1000, 1000), 100.0))
        spec = DegradationSpec(gaussian_psf(1.0), "gaussian", s, seed=11)
        diff = degrade(h, spec).values - convolve2d(h, spec.psf).values
        assert abs(diff.mean()) <= 5 * s / 1e3
        assert diff.std() == pytest.approx(s, rel=0.01)

    def test_deterministic(self):
        h = Image2D(np.random.default_rng(2).random((16, 16)))
        for kind in ("gaussian", "poisson"):
            spec = DegradationSpec(gaussian_psf(2.0), kind, 0.05, seed=42)
            np.testing.assert_array_equal(degrade(h, spec).values, degrade(h, spec).values)

    def test_nonnegative_output(self):
        h = Image2D(np.zeros((32, 32)))
        out = degrade(h, DegradationSpec(gaussian_psf(1.0), "gaussian", 1.0, seed=0)).values
        assert out.min() >= 0 and out.max() > 0

    def test_flux_conserved_reflect(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            h = Image2D(rng.random((24, 17)))
            out = degrade(h, DegradationSpec(gaussian_psf(2.0), "none"))
            assert out.values.sum() == pytest.approx(h.values.sum(), rel=1e-9)


class TestPhantom:
    def test_straight_line_profile_fwhm(self):
        curve = np.array([[-5.0, 20.0], [32.0, 20.0], [70.0, 20.0]])
        vals = render_filaments([curve], 64, 40, thickness_px=3.0)
        col = Image2D(vals.T.copy(), pixel_pitch_nm=1.0)
        assert fwhm(line_profile(col, 32, (10, 31))) == pytest.approx(3.0, rel=0.05)

    def test_background_exactly_zero(self):
        curve = np.array([[0.0, 5.0], [30.0, 5.0], [63.0, 5.0]])
        vals = render_filaments([curve], 64, 64, thickness_px=2.0)
        assert vals[40:, :].max() == 0.0
        assert vals[5, 10] == pytest.approx(1.0, abs=1e-3)

    def test_deterministic_and_nonzero(self):
        spec = PhantomSpec(48, 40, 4, 1.5, 2.0, 0.2, seed=9)
        a, b = generate_phantom(spec), generate_phantom(spec)
        np.testing.assert_array_equal(a.values, b.values)
        assert a.values.max() > 0 and a.values.min() == 0.0
        assert a.values.max() <= 2.0
        assert not np.array_equal(a.values, generate_phantom(PhantomSpec(48, 40, 4, 1.5, 2.0, 0.2, seed=10)).values)

    @pytest.mark.parametrize(
        "bad",
        [dict(width=0), dict(height=-1), dict(n_filaments=0), dict(thickness_px=0.4), dict(intensity=0.0)],
    )
    def test_rejects_degenerate(self, bad):
        with pytest.raises(ParameterError):
            generate_phantom(PhantomSpec(**bad))
