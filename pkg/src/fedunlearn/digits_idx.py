"""Build an MNIST-format (IDX) digit corpus from scikit-learn's bundled digits.

The 8x8 handwritten digits shipped with scikit-learn are upsampled to 20x20,
randomly rotated/shifted/scaled and centred on a 28x28 canvas.  Train and
test images are augmented from disjoint pools of source digits, so the test
split never shares a source image with training.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
from scipy import ndimage
from sklearn.datasets import load_digits

from .data import write_idx

FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _render(src: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    img = ndimage.zoom(src / 16.0, 20 / 8, order=1)
    img = ndimage.rotate(img, rng.uniform(-12, 12), reshape=False, order=1)
    scale = rng.uniform(0.9, 1.1)
    img = ndimage.zoom(img, scale, order=1)
    canvas = np.zeros((28, 28))
    h, w = img.shape
    top = (28 - h) // 2 + int(rng.integers(-2, 3))
    left = (28 - w) // 2 + int(rng.integers(-2, 3))
    top, left = min(max(top, 0), 28 - h), min(max(left, 0), 28 - w)
    canvas[top : top + h, left : left + w] = img
    canvas = ndimage.gaussian_filter(canvas, 0.5)
    canvas = canvas / max(canvas.max(), 1e-9)
    return np.clip(np.round(canvas * 255), 0, 255).astype(np.uint8)


def render_digits(n_train: int, n_test: int, seed: int = 0,
                  test_pool_fraction: float = 0.25) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    digits = load_digits()
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(digits.target))
    cut = int(round(len(order) * (1 - test_pool_fraction)))
    pools = {"train": order[:cut], "test": order[cut:]}
    out = []
    for split, n in (("train", n_train), ("test", n_test)):
        pick = rng.choice(pools[split], size=n, replace=n > len(pools[split]))
        imgs = np.stack([_render(digits.images[i], rng) for i in pick]) if n else np.zeros((0, 28, 28), np.uint8)
        out.extend([imgs, digits.target[pick].astype(np.uint8)])
    return tuple(out)


def write_digits_idx(out_dir: Union[str, Path], n_train: int = 5000, n_test: int = 1000,
                     seed: int = 0) -> Dict[str, Path]:
    """Write train/test IDX files into ``out_dir``; returns the four paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    xtr, ytr, xte, yte = render_digits(n_train, n_test, seed)
    paths = {k: out_dir / v for k, v in FILES.items()}
    write_idx(paths["train_images"], paths["train_labels"], xtr, ytr)
    write_idx(paths["test_images"], paths["test_labels"], xte, yte)
    return paths
