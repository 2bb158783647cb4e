"""
Quality metrics, profiles and z-stacks
======================================

PSNR and SSIM against a reference, FWHM of line profiles, and a stack of
result slices with its maximum-intensity projection.
"""

import tempfile

import numpy as np

from filament_sr.imgcore import Depth, Image2D
from filament_sr.postmetrics import (
    QualityReport,
    fwhm,
    line_profile,
    max_intensity_projection,
    psnr,
    reload_stack,
    ssim,
    stack_result,
)
from filament_sr.synthlab import PhantomSpec, generate_phantom

ref = generate_phantom(PhantomSpec(64, 64, 4, 2.0, 200.0, seed=5))
ref = ref.with_values(ref.values, source_depth=Depth.U8)
rng = np.random.default_rng(0)
for s in (2, 8, 32):
    noisy = ref.with_values(ref.values + rng.normal(0, s, ref.shape))
    print("noise std %2d: PSNR %.2f dB, SSIM %.3f" % (s, psnr(ref, noisy), ssim(ref, noisy)))
print(QualityReport(psnr(ref, ref), ssim(ref, ref)).to_json())

# %%
# FWHM of a sampled Gaussian is 2.3548 sigma.
x = np.arange(-60, 61)
for sigma in (2, 10):
    img = Image2D(np.tile(np.exp(-(x**2) / (2 * sigma**2)), (3, 1)), pixel_pitch_nm=62.5)
    print("sigma %2d px -> FWHM %.1f nm (expected %.1f)" % (sigma, fwhm(line_profile(img, 1)), 2.3548 * sigma * 62.5))

# %%
# Three slices written as a stack, reloaded, and projected.
slices = [generate_phantom(PhantomSpec(32, 32, 1, 1.5, seed=z)) for z in range(3)]
with tempfile.TemporaryDirectory() as d:
    stack, manifest = stack_result(slices, 200.0, d)
    back = reload_stack(manifest)
    mip = max_intensity_projection(back)
print("slices", len(back.slices), "z step", back.z_step_nm, "nm; MIP covers",
      int((mip.values > 0).sum()), "pixels")
