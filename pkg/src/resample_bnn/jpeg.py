"""JPEG quantization roundtrip on 8x8 DCT blocks.

Simulates the lossy part of JPEG only: level shift, orthonormal 2-D DCT-II,
quantization against the standard luminance table scaled by the IJG quality
formula, dequantization, inverse DCT, clamp. Entropy coding is lossless and
cannot affect pixel statistics, so it is deliberately absent.
"""

from __future__ import annotations

import numpy as np

# Standard luminance quantization table (quality 50 base).
BASE_LUMINANCE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def quality_scale(quality: int) -> float:
    """IJG quality-to-scale mapping: 5000/q below 50, 200-2q at and above."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be in 1..100, got {quality}")
    return 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality


def quantization_table(quality: int) -> np.ndarray:
    """Scaled luminance table, floor((base*scale + 50)/100), clamped to 1..255."""
    scaled = np.floor((BASE_LUMINANCE_TABLE * quality_scale(quality) + 50.0) / 100.0)
    return np.clip(scaled, 1.0, 255.0)


def _dct_matrix() -> np.ndarray:
    x = np.arange(8)
    u = x[:, None]
    mat = np.cos((2 * x[None, :] + 1) * u * np.pi / 16.0)
    mat *= np.sqrt(2.0 / 8.0)
    mat[0] = np.sqrt(1.0 / 8.0)
    return mat


DCT_MATRIX = _dct_matrix()


def dct2(blocks: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II over trailing (8,8) axes."""
    return np.einsum("ui,...ij,vj->...uv", DCT_MATRIX, blocks, DCT_MATRIX)


def idct2(coeffs: np.ndarray) -> np.ndarray:
    return np.einsum("ui,...uv,vj->...ij", DCT_MATRIX, coeffs, DCT_MATRIX)


def jpeg_cycle(img: np.ndarray, quality: int) -> np.ndarray:
    """Lossy 8x8 quantization roundtrip at the given quality factor."""
    table = quantization_table(quality)
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"jpeg_cycle expects a 2-D image, got {img.shape}")
    h, w = img.shape
    ph = (-h) % 8
    pw = (-w) % 8
    padded = np.pad(img, ((0, ph), (0, pw)), mode="reflect") if (ph or pw) else img
    H, W = padded.shape
    blocks = padded.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
    coeffs = dct2(blocks - 128.0)
    quantized = np.round(coeffs / table) * table
    restored = idct2(quantized) + 128.0
    out = restored.transpose(0, 2, 1, 3).reshape(H, W)[:h, :w]
    return np.clip(out, 0.0, 255.0)
