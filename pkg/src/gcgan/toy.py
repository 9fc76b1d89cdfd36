"""Synthetic unpaired datasets for desk-scale experiments.

``recolor``: domain X holds random warm-colored polygons on a dark
background. Domain Y holds *independently sampled* X-style sprites passed
through the color inversion ``v -> 255 - v`` on every channel, giving cool
polygons on a light background. The ideal translator is that pointwise
inversion, which commutes with every geometric transform.

Layout written under ``out_dir``::

    trainA/  n X images        trainB/  n Y images (independent sprites)
    testA/   n_test X images   testB/   inversion of each testA image
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict

import numpy as np
from PIL import Image, ImageDraw

KINDS = ("recolor",)


def recolor(rgb: np.ndarray) -> np.ndarray:
    """The documented X -> Y map of the recolor task."""
    return (255 - np.asarray(rgb, dtype=np.uint8)).astype(np.uint8)


def sprite(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """One X-style image: 1-3 convex-ish polygons over a dark backdrop."""
    bg = tuple(int(v) for v in rng.integers(0, 40, size=3))
    img = Image.new("RGB", (size, size), bg)
    draw = ImageDraw.Draw(img)
    for _ in range(int(rng.integers(1, 4))):
        n_vert = int(rng.integers(3, 7))
        cx, cy = rng.uniform(0.2 * size, 0.8 * size, size=2)
        radius = rng.uniform(0.15 * size, 0.4 * size)
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=n_vert))
        pts = [(float(cx + radius * np.cos(a)), float(cy + radius * np.sin(a))) for a in angles]
        color = (int(rng.integers(180, 256)), int(rng.integers(40, 180)), int(rng.integers(0, 60)))
        draw.polygon(pts, fill=color)
    return np.asarray(img, dtype=np.uint8)


def make_toy(kind: str, out_dir, n: int, seed: int = 0, size: int = 32, n_test=None) -> Dict[str, Path]:
    if kind not in KINDS:
        raise ValueError(f"unknown toy dataset kind {kind!r}; choose from {list(KINDS)}")
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if size <= 0:
        raise ValueError(f"size must be positive, got {size}")
    n_test = max(1, n // 4) if n_test is None else n_test
    out = Path(out_dir)
    dirs = {name: out / name for name in ("trainA", "trainB", "testA", "testB")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    rng_x = np.random.default_rng([seed, 0])
    rng_y = np.random.default_rng([seed, 1])
    rng_t = np.random.default_rng([seed, 2])
    width = len(str(max(n, n_test)))
    for i in range(n):
        Image.fromarray(sprite(rng_x, size)).save(dirs["trainA"] / f"{i:0{width}d}.png")
        Image.fromarray(recolor(sprite(rng_y, size))).save(dirs["trainB"] / f"{i:0{width}d}.png")
    for i in range(n_test):
        img = sprite(rng_t, size)
        Image.fromarray(img).save(dirs["testA"] / f"{i:0{width}d}.png")
        Image.fromarray(recolor(img)).save(dirs["testB"] / f"{i:0{width}d}.png")
    return dirs
