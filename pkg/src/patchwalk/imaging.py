"""Image I/O, resampling, normalization, and quality metrics.

All in-memory planes are float64 numpy arrays in normalized space [-1, 1]
(denormalized space is [0, 1]).  Everything here is a pure function; the
resampler caches its per-(size, size) weight matrices.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

__all__ = [
    "ImagingError", "normalize", "denormalize",
    "bicubic_resize", "degrade", "psnr", "ssim",
    "load_image", "save_image", "PSNR_CAP",
]

PSNR_CAP = 99.0

_MIN_EXTENT = 8


class ImagingError(ValueError):
    pass


def normalize(u: np.ndarray) -> np.ndarray:
    """[0,1] -> [-1,1]"""
    return 2.0 * np.asarray(u, dtype=np.float64) - 1.0


def denormalize(v: np.ndarray) -> np.ndarray:
    """[-1,1] -> [0,1]"""
    return (np.asarray(v, dtype=np.float64) + 1.0) / 2.0


# -- bicubic resampling ------------------------------------------------------

def _cubic_kernel(d: np.ndarray, a: float = -0.5) -> np.ndarray:
    d = np.abs(d)
    out = np.zeros_like(d)
    near = d <= 1.0
    far = (d > 1.0) & (d < 2.0)
    out[near] = ((a + 2.0) * d[near] - (a + 3.0)) * d[near] * d[near] + 1.0
    out[far] = (((d[far] - 5.0) * d[far] + 8.0) * d[far] - 4.0) * a
    return out


_weight_cache: dict[tuple[int, int], np.ndarray] = {}


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic [n_out, n_in] cubic-convolution matrix, edge clamped."""
    key = (n_in, n_out)
    got = _weight_cache.get(key)
    if got is not None:
        return got
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    kscale = 1.0 if ratio <= 1.0 else 1.0 / ratio  # widen kernel when reducing
    support = 2.0 / kscale
    for i in range(n_out):
        src = (i + 0.5) * ratio - 0.5
        taps = np.arange(math.ceil(src - support), math.floor(src + support) + 1)
        w = _cubic_kernel((src - taps) * kscale)
        w = w / w.sum()
        clamped = np.clip(taps, 0, n_in - 1)
        for t, wt in zip(clamped, w):
            m[i, t] += wt
    _weight_cache[key] = m
    return m


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable cubic-convolution resampling (a = -0.5), clipped to [-1,1].

    Sample positions use half-pixel centers; out-of-range taps are folded onto
    the nearest edge sample, which keeps each weight row summing to 1. When
    downscaling, the kernel is widened by the scale ratio (standard
    anti-aliasing), so a factor-k reduction averages over ~4k source samples.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ImagingError("expected a 2-d plane")
    if out_h < 1 or out_w < 1:
        raise ImagingError("output extents must be positive")
    wr = _resample_matrix(img.shape[0], out_h)
    wc = _resample_matrix(img.shape[1], out_w)
    out = wr @ img @ wc.T
    return np.clip(out, -1.0, 1.0)


def degrade(img_hr: np.ndarray, factor: int) -> np.ndarray:
    """Bicubic downsample by an integral factor; the LR pair generator."""
    img_hr = np.asarray(img_hr, dtype=np.float64)
    if factor not in (4, 8, 16):
        raise ImagingError(f"degradation factor must be one of 4, 8, 16, got {factor}")
    h, w = img_hr.shape
    if h % factor or w % factor:
        raise ImagingError(f"extents {h}x{w} not divisible by factor {factor}")
    oh, ow = h // factor, w // factor
    if oh < _MIN_EXTENT or ow < _MIN_EXTENT:
        raise ImagingError(f"degraded extent {oh}x{ow} below minimum {_MIN_EXTENT}")
    return bicubic_resize(img_hr, oh, ow)


# -- metrics -----------------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on denormalized values, peak 1.0.

    Zero MSE (and anything above the cap) reports 99.0 dB.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ImagingError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    diff = denormalize(a) - denormalize(b)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


_ssim_window_cache: np.ndarray | None = None


def _ssim_window() -> np.ndarray:
    global _ssim_window_cache
    if _ssim_window_cache is None:
        r = np.arange(11) - 5.0
        g = np.exp(-(r * r) / (2.0 * 1.5 * 1.5))
        w = np.outer(g, g)
        _ssim_window_cache = w / w.sum()
    return _ssim_window_cache


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM, 11x11 Gaussian window sigma=1.5, K1=.01 K2=.03, L=1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ImagingError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise ImagingError("ssim needs at least 11x11")
    x = denormalize(a)
    y = denormalize(b)
    w = _ssim_window()

    def filt(img):
        win = np.lib.stride_tricks.sliding_window_view(img, (11, 11))
        return np.einsum("ijkl,kl->ij", win, w)

    mu_x = filt(x)
    mu_y = filt(y)
    xx = filt(x * x) - mu_x * mu_x
    yy = filt(y * y) - mu_y * mu_y
    xy = filt(x * y) - mu_x * mu_y
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


# -- binary PGM I/O ------------------------------------------------------------

def _read_header_tokens(raw: bytes):
    """Yield (token, offset_after) skipping whitespace and # comments."""
    i = 0
    n = len(raw)
    while True:
        while i < n and raw[i:i + 1].isspace():
            i += 1
        if i < n and raw[i:i + 1] == b"#":
            while i < n and raw[i] != 0x0A:
                i += 1
            continue
        if i >= n:
            raise ImagingError("truncated header")
        j = i
        while j < n and not raw[j:j + 1].isspace() and raw[j:j + 1] != b"#":
            j += 1
        yield raw[i:j], j
        i = j


def load_image(path) -> np.ndarray:
    """Read a binary PGM (P5, maxval 255) into a normalized [-1,1] plane."""
    raw = Path(path).read_bytes()
    toks = _read_header_tokens(raw)
    try:
        magic, _ = next(toks)
        if magic != b"P5":
            raise ImagingError(f"not a binary PGM (magic {magic!r})")
        wtok, _ = next(toks)
        htok, _ = next(toks)
        mtok, after = next(toks)
    except StopIteration:
        raise ImagingError("truncated header") from None
    try:
        w, h, maxval = int(wtok), int(htok), int(mtok)
    except ValueError:
        raise ImagingError("malformed header field") from None
    if w < 1 or h < 1:
        raise ImagingError(f"bad extents {h}x{w}")
    if maxval != 255:
        raise ImagingError(f"only maxval 255 supported, got {maxval}")
    start = after + 1  # single whitespace byte separates header from payload
    if start + w * h > len(raw):
        raise ImagingError("truncated payload")
    data = np.frombuffer(raw[start:start + w * h], dtype=np.uint8).reshape(h, w)
    return normalize(data.astype(np.float64) / 255.0)


def save_image(img: np.ndarray, path) -> None:
    """Write a normalized plane as binary PGM, rounding to 8 bits."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ImagingError("expected a 2-d plane")
    u = denormalize(img)
    q = np.clip(np.rint(u * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + q.tobytes())
