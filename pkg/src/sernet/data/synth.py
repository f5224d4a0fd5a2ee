"""Synthetic street-scene stand-in: coloured geometric regions with exact labels.

Class 0 is a background with a linear colour gradient; every other class is
one shape kind (rectangle, disc, bar, ...) painted in its own colour.  Each
scene contains every class: shapes are painted in random order and any
class that ends up fully occluded is repainted on top.
"""

from __future__ import annotations

import colorsys

import numpy as np

from ..seeding import derive_seed
from ..tensor import Tensor
from .io import SegSample

SHAPE_KINDS = ("rect", "disc", "bar", "triangle", "ring", "cross", "diamond", "ellipse")
NOISE_SIGMA = 0.05
_BASE_COLORS = [
    (0.35, 0.35, 0.40),  # background
    (0.85, 0.25, 0.20),
    (0.20, 0.70, 0.30),
    (0.25, 0.35, 0.85),
    (0.85, 0.80, 0.20),
    (0.75, 0.30, 0.80),
    (0.20, 0.80, 0.80),
    (0.90, 0.55, 0.15),
    (0.55, 0.85, 0.55),
]


def class_color(c: int) -> np.ndarray:
    if c < len(_BASE_COLORS):
        return np.array(_BASE_COLORS[c])
    # golden-ratio hue walk for anything beyond the fixed table
    h = (c * 0.618033988749895) % 1.0
    return np.array(colorsys.hsv_to_rgb(h, 0.65, 0.8))


def shape_kind(c: int) -> str:
    return SHAPE_KINDS[(c - 1) % len(SHAPE_KINDS)]


def _mask(kind: str, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    s = min(h, w)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    cy = rng.uniform(0.2, 0.8) * h
    cx = rng.uniform(0.2, 0.8) * w
    if kind == "rect":
        rh, rw = rng.uniform(0.22, 0.36, size=2) * s
        return (np.abs(yy - cy) <= rh) & (np.abs(xx - cx) <= rw)
    if kind == "disc":
        r = rng.uniform(0.24, 0.34) * s
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "bar":
        t = rng.uniform(0.14, 0.2) * s
        if rng.random() < 0.5:
            return np.abs(yy - cy) <= t
        return np.abs(xx - cx) <= t
    if kind == "triangle":
        r = rng.uniform(0.22, 0.32) * s
        return (yy <= cy + r) & (np.abs(xx - cx) <= (yy - (cy - r)) * 0.6)
    if kind == "ring":
        r = rng.uniform(0.22, 0.32) * s
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        r = rng.uniform(0.22, 0.32) * s
        t = 0.3 * r
        return ((np.abs(yy - cy) <= t) & (np.abs(xx - cx) <= r)) | ((np.abs(xx - cx) <= t) & (np.abs(yy - cy) <= r))
    if kind == "diamond":
        r = rng.uniform(0.22, 0.32) * s
        return np.abs(yy - cy) + np.abs(xx - cx) <= r
    if kind == "ellipse":
        a, b = rng.uniform(0.18, 0.32, size=2) * s
        return ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1.0
    raise ValueError(kind)


def synth_scene(seed: int, h: int = 32, w: int = 32, num_classes: int = 4) -> SegSample:
    """Deterministic scene for ``seed``; every class 0..num_classes-1 is visible."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if h < 32 or w < 32:
        raise ValueError(f"scenes must be at least 32x32, got {h}x{w}")
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "synth_scene")))

    labels = np.zeros((h, w), dtype=np.int64)
    yy, xx = np.mgrid[0:h, 0:w]
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * (yy / h - 0.5) + np.sin(theta) * (xx / w - 0.5)) * 0.3
    image = class_color(0)[:, None, None] + ramp[None]

    shapes = []
    for c in range(1, num_classes):
        for _ in range(1 + int(rng.random() < 0.3)):
            shapes.append(c)
    shapes = [shapes[i] for i in rng.permutation(len(shapes))]
    for c in shapes:
        labels[_mask(shape_kind(c), rng, h, w)] = c
    for _ in range(8):
        missing = [c for c in range(num_classes) if not np.any(labels == c)]
        if not missing:
            break
        for c in missing:
            if c == 0:
                # background fully covered: clear a border strip
                labels[:, : max(2, w // 8)] = 0
            else:
                m = _mask(shape_kind(c), rng, h, w)
                if m.any():
                    labels[m] = c

    for c in range(1, num_classes):
        image[:, labels == c] = class_color(c)[:, None]
    image = image + rng.normal(0.0, NOISE_SIGMA, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return SegSample(
        image=Tensor(image[None]),
        labels=labels.reshape(1, 1, h, w),
        id=f"synth_{seed}",
    )


def synth_dataset(seed: int, count: int, h: int = 32, w: int = 32, num_classes: int = 4, offset: int = 0) -> list[SegSample]:
    """``count`` scenes whose per-scene seeds are derived from ``seed``."""
    return [synth_scene(derive_seed(seed, f"scene{offset + i}"), h, w, num_classes) for i in range(count)]
