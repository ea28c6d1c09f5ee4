"""Procedural class-conditional images standing in for generated data.

Class ``k`` draws shape ``k mod 5`` in hue band ``[k/10, (k+1)/10)`` on a dim
grey background, with seeded jitter in position, scale and rotation plus
Gaussian pixel noise.
"""
from __future__ import annotations

import colorsys

import numpy as np
from scipy.ndimage import gaussian_filter

from genq import rng as rngmod
from genq.datasrc.dataset import CLASS_NAMES, Dataset
from genq.errors import ContractError

SIZE = 32
NUM_CLASSES = 10
NOISE_STD = 0.05

_yy, _xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64) + 0.5
_TRI_NORMALS = np.array([[np.cos(a), np.sin(a)] for a in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3,
                                                           np.pi / 2 + 4 * np.pi / 3)])


def _signed_distance(shape: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Distance to the unit-scale outline, negative inside."""
    if shape == 0:      # disk
        return np.hypot(u, v) - 1.0
    if shape == 1:      # square
        return np.maximum(np.abs(u), np.abs(v)) - 0.8
    if shape == 2:      # triangle
        return np.max([u * n[0] + v * n[1] for n in _TRI_NORMALS], axis=0) - 0.5
    if shape == 3:      # plus
        bar1 = np.maximum(np.abs(u) - 1.0, np.abs(v) - 0.3)
        bar2 = np.maximum(np.abs(u) - 0.3, np.abs(v) - 1.0)
        return np.minimum(bar1, bar2)
    return np.abs(np.hypot(u, v) - 0.72) - 0.28      # ring


def render(class_id: int, gen: np.random.Generator) -> np.ndarray:
    shape = class_id % 5
    hue = (class_id + gen.uniform(0.0, 1.0)) / NUM_CLASSES
    sat = gen.uniform(0.75, 1.0)
    val = gen.uniform(0.8, 1.0)
    color = np.array(colorsys.hsv_to_rgb(hue % 1.0, sat, val))
    bg = gen.uniform(0.05, 0.35) + gen.uniform(-0.03, 0.03, size=3)

    cx, cy = SIZE / 2 + gen.uniform(-5, 5, size=2)
    radius = gen.uniform(7.0, 11.0)
    theta = gen.uniform(0, 2 * np.pi)
    dx, dy = _xx - cx, _yy - cy
    u = (np.cos(theta) * dx + np.sin(theta) * dy) / radius
    v = (-np.sin(theta) * dx + np.cos(theta) * dy) / radius
    cover = np.clip(0.5 - _signed_distance(shape, u, v) * radius, 0.0, 1.0)

    img = bg[:, None, None] * (1 - cover) + color[:, None, None] * cover
    img = img + gen.normal(0.0, NOISE_STD, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_images(class_id: int, count: int, seed: int, start: int = 0) -> Dataset:
    """``count`` images of one class; image ``i`` depends only on (class, start+i, seed)."""
    if not 0 <= class_id < NUM_CLASSES:
        raise ContractError(f"class_id must be in 0..{NUM_CLASSES - 1}, got {class_id}")
    if count <= 0:
        raise ContractError(f"count must be positive, got {count}")
    imgs = np.stack([render(class_id, rngmod.stream(seed, "synth", class_id, start + i))
                     for i in range(count)])
    return Dataset(imgs, np.full(count, class_id), CLASS_NAMES, "synthetic")


def synth_dataset(per_class: int, seed: int) -> Dataset:
    """Balanced set, classes interleaved so that any prefix is near-balanced."""
    parts = [synth_images(k, per_class, seed) for k in range(NUM_CLASSES)]
    images = np.stack([p.images for p in parts], axis=1).reshape(-1, 3, SIZE, SIZE)
    labels = np.tile(np.arange(NUM_CLASSES), per_class)
    return Dataset(images, labels, CLASS_NAMES, "synthetic")


def _hue_rotate(img: np.ndarray, angle: float) -> np.ndarray:
    """Rotate colours about the grey axis (Rodrigues rotation in RGB)."""
    k = np.ones(3) / np.sqrt(3.0)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    rot = np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)
    return np.einsum("ij,jhw->ihw", rot, img)


def corrupt(dataset: Dataset, severity: int, seed: int) -> Dataset:
    """Push images off the clean distribution; labels are kept.

    Applies a hue rotation (half a turn at severity 5), Gaussian blur and a
    contrast collapse towards mid-gray, all growing with severity.
    """
    if severity not in (1, 2, 3, 4, 5):
        raise ContractError(f"severity must be in 1..5, got {severity}")
    frac = severity / 5.0
    out = np.empty_like(dataset.images)
    for i, img in enumerate(dataset.images.astype(np.float64)):
        gen = rngmod.stream(seed, "corrupt", severity, int(dataset.ids[i]))
        angle = np.pi * frac * gen.uniform(0.85, 1.0)
        x = _hue_rotate(img, angle)
        sigma = 0.5 * severity * gen.uniform(0.9, 1.1)
        x = np.stack([gaussian_filter(ch, sigma, mode="reflect") for ch in x])
        contrast = 1.0 - 0.19 * severity * gen.uniform(0.9, 1.0)
        x = 0.5 + contrast * (x - 0.5)
        out[i] = np.clip(x, 0.0, 1.0)
    return Dataset(out, dataset.labels.copy(), dataset.class_names, dataset.provenance,
                   dataset.ids.copy())
