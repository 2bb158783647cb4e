"""
Synthetic filaments and the imaging model
=========================================

Render curved filaments, blur them with a Gaussian PSF and add noise.
The cross-section width before and after blurring is the quantity the
rest of the pipeline tries to recover.
"""

import numpy as np

from filament_sr.postmetrics import fwhm, line_profile
from filament_sr.synthlab import DegradationSpec, PhantomSpec, degrade, gaussian_psf, generate_phantom, render_filaments

# A phantom: two thin filaments on a 64x64 grid at 62.5 nm per pixel.
truth = generate_phantom(PhantomSpec(64, 64, n_filaments=2, thickness_px=1.0, seed=3))
print("phantom", truth.shape, "pitch", truth.pixel_pitch_nm, "nm, peak", truth.values.max())

# Blur with a sigma = 2 px PSF and add Gaussian noise at 5% of the peak.
psf = gaussian_psf(2.0)
blurred = degrade(truth, DegradationSpec(psf, "none"))
noisy = degrade(truth, DegradationSpec(psf, "gaussian", 0.05 * blurred.values.max(), seed=1))
print("flux before/after blur: %.4f / %.4f" % (truth.values.sum(), blurred.values.sum()))

# %%
# A straight vertical filament makes the width change easy to read off.
line = np.array([[32.0, -4.0], [32.0, 32.0], [32.0, 68.0]])
straight = truth.with_values(render_filaments([line], 64, 64, 1.0))
wide = degrade(straight, DegradationSpec(psf, "none"))
for name, img in (("sharp", straight), ("blurred", wide)):
    print("%-8s FWHM %.1f nm" % (name, fwhm(line_profile(img, 32, (20, 45)))))
