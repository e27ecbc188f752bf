"""Synthetic dataset: procedural grayscale images for desk-scale runs.

Each image is a piecewise-smooth canvas (affine ramp plus dense sharp-edged
shapes) with a mid-frequency sinusoidal weave laid over the whole frame.
Both ingredients are chosen so the 4x degradation keeps them representable
(texture period at least twice the decimation block, features a few pixels
wide) while bicubic upscaling reproduces them poorly: that gap is exactly
the headroom a small local enhancer can learn and, crucially, transfer to
held-out draws from the same family.  Everything is deterministic in the
seed.
"""

from __future__ import annotations

import os

import numpy as np

from . import imaging

__all__ = ["make_image", "generate_dataset", "load_dataset", "load_pairs"]


def _background(extent: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, extent),
                         np.linspace(0.0, 1.0, extent), indexing="ij")
    img = rng.uniform(0.4, 0.6) * np.ones((extent, extent))
    img += rng.uniform(-0.15, 0.15) * xx + rng.uniform(-0.15, 0.15) * yy
    m = rng.uniform(0.5, 2.0)
    theta = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    img += rng.uniform(0.05, 0.10) * np.sin(
        2.0 * np.pi * m * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    return img


def _weave(extent: int, rng: np.random.Generator) -> np.ndarray:
    """Mid-frequency sinusoidal texture laid over the finished canvas.

    The band sits between the two resolutions: wave-vector magnitude is
    capped so the period stays >= 2 decimation blocks (representable after
    the 4x block mean), yet bicubic interpolation attenuates it badly.  Added
    after the shapes so every pixel, flats included, carries recoverable
    detail, which is the transferable part of the restoration problem; shape
    edges pin sub-pixel phase that never generalizes across images.
    """
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, extent),
                         np.linspace(0.0, 1.0, extent), indexing="ij")
    out = np.zeros((extent, extent))
    for _ in range(2):
        m = rng.uniform(4.0, 7.0)
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        out += rng.uniform(0.12, 0.18) * np.sin(
            2.0 * np.pi * m * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    return out


def _contrast_level(img: np.ndarray, region, rng: np.random.Generator) -> float:
    # a shape whose level matches the background underneath is invisible and
    # adds no edge; push it a fixed distance away from the local mean instead
    base = float(img[region].mean())
    delta = rng.uniform(0.3, 0.55) * (1.0 if rng.random() < 0.5 else -1.0)
    return float(np.clip(base + delta, 0.05, 0.95))


def _add_shapes(img: np.ndarray, rng: np.random.Generator) -> None:
    # every feature is at least ~3 px wide: a 4x downsample keeps enough of
    # the edge that re-sharpening it is a recoverable local mapping, whereas
    # hairline strokes alias away and would force the model to guess phase
    extent = img.shape[0]
    yy, xx = np.indices(img.shape)
    n_shapes = int(rng.integers(18, 29))
    for _ in range(n_shapes):
        kind = rng.random()
        if kind < 0.35:
            h = int(rng.integers(extent // 8, extent // 3))
            w = int(rng.integers(extent // 8, extent // 3))
            top = int(rng.integers(0, extent - h + 1))
            left = int(rng.integers(0, extent - w + 1))
            region = (slice(top, top + h), slice(left, left + w))
        elif kind < 0.65:
            r = rng.uniform(extent / 16, extent / 7)
            cy = rng.uniform(r, extent - r)
            cx = rng.uniform(r, extent - r)
            region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        elif kind < 0.85:
            t = int(rng.integers(3, 8))
            span = int(rng.integers(extent // 3, extent + 1))
            pos = int(rng.integers(0, extent - t + 1))
            off = int(rng.integers(0, extent - span + 1))
            if rng.random() < 0.5:
                region = (slice(pos, pos + t), slice(off, off + span))
            else:
                region = (slice(off, off + span), slice(pos, pos + t))
        else:
            # diagonal stroke: |n.(p - c)| below half thickness
            theta = rng.uniform(0.0, np.pi)
            ny, nx = np.cos(theta), np.sin(theta)
            cy, cx = rng.uniform(0.2, 0.8, size=2) * extent
            t = rng.uniform(3.0, 7.0)
            region = np.abs(ny * (yy - cy) + nx * (xx - cx)) <= t / 2.0
        img[region] = _contrast_level(img, region, rng)


def make_image(extent: int, rng: np.random.Generator) -> np.ndarray:
    """One procedural image in [0, 1], extent x extent."""
    img = _background(extent, rng)
    _add_shapes(img, rng)
    # compress the piecewise-smooth canvas into the middle band so the
    # texture overlay below survives mostly unclipped
    img = 0.25 + 0.5 * np.clip(img, 0.0, 1.0)
    img += _weave(extent, rng)
    return np.clip(img, 0.0, 1.0)


def generate_dataset(out_dir, count: int = 48, extent: int = 64,
                     seed: int = 0) -> list:
    """Write `count` PGM images to out_dir; returns the paths in index order."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 4, i)))
        img = make_image(extent, rng)
        path = os.path.join(out_dir, f"img_{i:03d}.pgm")
        imaging.save_image(imaging.normalize(img), path)
        paths.append(path)
    return paths


def load_dataset(image_dir) -> list:
    """All .pgm files under image_dir in sorted name order, normalized."""
    names = sorted(n for n in os.listdir(image_dir) if n.endswith(".pgm"))
    if not names:
        raise FileNotFoundError(f"no .pgm images in {image_dir}")
    return [imaging.load_image(os.path.join(image_dir, n)) for n in names]


def load_pairs(image_dir, factor: int) -> list:
    """(I_lr, I_hr) pairs built by degrading each HR image in image_dir."""
    return [(imaging.degrade(img, factor), img) for img in load_dataset(image_dir)]
