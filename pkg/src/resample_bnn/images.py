"""Grayscale image ops: luma conversion, resampling kernels, file I/O.

Images are 2-D float64 arrays with values in [0, 255]. All three resampling
kernels use the half-pixel-centered coordinate mapping
``src = (dst + 0.5) * (in/out) - 0.5``, which makes s = 1.0 the exact
identity. "areal" is exact-coverage box filtering, computed separably via
fractional cumulative sums.
"""

from __future__ import annotations

import numpy as np

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
RESAMPLE_KERNELS = ("bilinear", "nearest", "areal")


def luma(rgb: np.ndarray) -> np.ndarray:
    """ITU-R 601-2 luma: L = 0.299 R + 0.587 G + 0.114 B, kept in float."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"luma expects (H,W,3), got {rgb.shape}")
    r, g, b = LUMA_WEIGHTS
    return r * rgb[:, :, 0] + g * rgb[:, :, 1] + b * rgb[:, :, 2]


def _round_dim(extent: int, s: float) -> int:
    return int(np.floor(extent * s + 0.5))


def _linear_axis(img: np.ndarray, out_len: int) -> np.ndarray:
    """Bilinear interpolation along axis 0 (border-clamped)."""
    h = img.shape[0]
    if out_len == h:
        return img.copy()
    r = h / out_len
    pos = np.clip((np.arange(out_len) + 0.5) * r - 0.5, 0.0, h - 1.0)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, h - 1)
    frac = (pos - lo)[:, None]
    return img[lo] * (1.0 - frac) + img[hi] * frac


def _nearest_axis_index(in_len: int, out_len: int) -> np.ndarray:
    pos = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    return np.clip(np.floor(pos + 0.5).astype(np.intp), 0, in_len - 1)


def _box_axis(img: np.ndarray, out_len: int) -> np.ndarray:
    """Exact-coverage box average along axis 0.

    Output cell i covers source span [i*r, (i+1)*r); the average is the
    difference of the piecewise-linear prefix integral at the span edges.
    """
    h = img.shape[0]
    if out_len == h:
        return img.copy()
    r = h / out_len
    edges = np.clip(np.arange(out_len + 1) * r, 0.0, float(h))
    whole = np.floor(edges).astype(np.intp)
    frac = edges - whole
    prefix = np.concatenate([np.zeros((1,) + img.shape[1:]),
                             np.cumsum(img, axis=0)], axis=0)
    pixel = np.minimum(whole, h - 1)
    integral = prefix[whole] + frac.reshape((-1,) + (1,) * (img.ndim - 1)) * img[pixel]
    return (integral[1:] - integral[:-1]) / r


def resample(img: np.ndarray, s: float, kernel: str) -> np.ndarray:
    """Rescale by factor s with the named interpolation kernel."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"resample expects a 2-D image, got {img.shape}")
    if s <= 0:
        raise ValueError(f"scale factor must be positive, got {s}")
    if kernel not in RESAMPLE_KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; choose from {RESAMPLE_KERNELS}")
    h, w = img.shape
    out_h, out_w = _round_dim(h, s), _round_dim(w, s)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output {out_h}x{out_w} smaller than one pixel "
                         f"(input {h}x{w}, s={s})")
    if kernel == "bilinear":
        rows = _linear_axis(img, out_h)
        return _linear_axis(rows.T, out_w).T
    if kernel == "nearest":
        iy = _nearest_axis_index(h, out_h)
        ix = _nearest_axis_index(w, out_w)
        return img[np.ix_(iy, ix)]
    rows = _box_axis(img, out_h)
    return _box_axis(rows.T, out_w).T


def load_gray(path) -> np.ndarray:
    """Read PNG/PGM/PPM; RGB inputs are luma-converted."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA", "P"):
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
            return luma(arr)
        if im.mode in ("L", "I", "I;16"):
            arr = np.asarray(im.convert("F"), dtype=np.float64)
            return arr
        raise ValueError(f"{path}: unsupported image mode {im.mode!r}")


def save_gray(path, img: np.ndarray) -> None:
    """Write an 8-bit grayscale PNG/PGM (values rounded and clipped)."""
    from PIL import Image

    data = np.clip(np.asarray(img, dtype=np.float64), 0.0, 255.0)
    Image.fromarray(np.floor(data + 0.5).astype(np.uint8), mode="L").save(path)
