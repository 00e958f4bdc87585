"""AugMix-style mixing of analytic augmentation chains for (C, H, W) images in [0, 1]."""
from __future__ import annotations

import numpy as np
from scipy import ndimage


def _affine(img: np.ndarray, matrix: np.ndarray, offset_px: np.ndarray) -> np.ndarray:
    # maps output coords to input coords around the image centre
    h, w = img.shape[1:]
    c = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = c - matrix @ c + offset_px
    return np.stack([
        ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode="nearest")
        for ch in img
    ])


def rotate(img, level, rng):
    ang = np.deg2rad(30.0 * level) * rng.choice((-1, 1))
    m = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    return _affine(img, m, np.zeros(2))


def translate(img, level, rng):
    shift = img.shape[1] / 3.0 * level * rng.choice((-1, 1))
    off = np.array([shift, 0.0]) if rng.random() < 0.5 else np.array([0.0, shift])
    return _affine(img, np.eye(2), off)


def shear(img, level, rng):
    s = 0.3 * level * rng.choice((-1, 1))
    m = np.array([[1.0, s], [0.0, 1.0]]) if rng.random() < 0.5 else np.array([[1.0, 0.0], [s, 1.0]])
    return _affine(img, m, np.zeros(2))


def brightness(img, level, rng):
    return img + 0.3 * level * rng.choice((-1, 1))


def contrast(img, level, rng):
    factor = 1.0 + 0.8 * level * rng.choice((-1, 1))
    mean = img.mean()
    return (img - mean) * factor + mean


def posterize(img, level, rng):
    bits = 8 - int(round(4 * level))
    q = 2 ** bits - 1
    return np.floor(np.clip(img, 0, 1) * q + 0.5) / q


OPS = (rotate, translate, shear, brightness, contrast, posterize)


def _one(img, rng, width, depth, alpha, mix_weight):
    ws = rng.dirichlet([alpha] * width)
    m = rng.beta(alpha, alpha) if mix_weight is None else float(mix_weight)
    mix = np.zeros(img.shape, dtype=np.float64)
    for i in range(width):
        aug = img.astype(np.float64)
        for _ in range(int(rng.integers(1, depth + 1))):
            op = OPS[int(rng.integers(len(OPS)))]
            aug = np.clip(op(aug, rng.uniform(0.1, 1.0), rng), 0.0, 1.0)
        mix += ws[i] * aug
    dtype = img.dtype
    # m weights the original image; m=1 returns the input unchanged
    out = dtype.type(m) * img + dtype.type(1.0 - m) * mix.astype(dtype)
    return np.clip(out, 0.0, 1.0).astype(dtype)


def augmix(x: np.ndarray, rng: np.random.Generator, width: int = 3, depth: int = 3,
           dirichlet_alpha: float = 1.0, mix_weight: float | None = None) -> np.ndarray:
    """Mix ``width`` chains of 1..``depth`` random ops with Dirichlet weights, then blend with ``x``.

    Accepts one image (C, H, W) or a batch (B, C, H, W). ``mix_weight`` pins the
    Beta-distributed weight on the original image.
    """
    if width < 1 or depth < 1:
        raise ValueError(f"width and depth must be >= 1, got width={width}, depth={depth}")
    x = np.asarray(x)
    if x.ndim == 3:
        return _one(x, rng, width, depth, dirichlet_alpha, mix_weight)
    if x.ndim != 4:
        raise ValueError(f"expected (C, H, W) or (B, C, H, W), got {x.shape}")
    return np.stack([_one(img, rng, width, depth, dirichlet_alpha, mix_weight) for img in x])
