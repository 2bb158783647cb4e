"""
Training a small encoder-decoder
================================

Train a depth-2 network on a handful of synthetic tiles, then predict a
whole image tile by tile and keep only the pixels the network calls
foreground.
"""

import logging
import tempfile

import numpy as np

from filament_sr.anet.model import AnetConfig
from filament_sr.anet.training import epoch_means, predict_image, train
from filament_sr.imgcore import Image2D, normalize_unit
from filament_sr.postmetrics import postprocess_result
from filament_sr.preprocess import build_dataset

logging.basicConfig(level=logging.INFO, format="%(message)s")
rng = np.random.default_rng(0)


def sample():
    label = np.zeros((32, 32))
    label[:, rng.integers(6, 26)] = 1
    label[rng.integers(6, 26), :] = 1
    return Image2D(label * 4 + rng.random((32, 32))), Image2D(label)


pairs = [sample() for _ in range(6)]
with tempfile.TemporaryDirectory() as d:
    man = build_dataset([p[0] for p in pairs], [p[1] for p in pairs], 32, d)
    model, rows = train(man, AnetConfig(depth=2, base_channels=4), epochs=30, lr=1e-2, seed=0)
means = epoch_means(rows)
print("loss: first epoch %.3f, last epoch %.3f" % (means[0], means[-1]))

# %%
# Predict an unseen image and apply the mask to it.
img, label = sample()
prob = predict_image(model, img, 32)
result = postprocess_result(prob, normalize_unit(img), 0.5)
agree = np.mean((prob.values > 0.5) == (label.values == 1))
print("pixel agreement with the hidden label: %.1f%%" % (100 * agree))
print("foreground pixels kept:", int((result.values > 0).sum()), "of", int(label.values.sum()))
