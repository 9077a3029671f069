"""Fixed high-pass noise-residual frontend for the second input stream.

Three classic steganalysis residual kernels are applied to the image on
the 0..255 scale, normalized by their quantization constants, truncated
to [-T, T] and rescaled to [-1, 1]. The bank is a frozen constant: no
gradient ever flows through this stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

# First-order horizontal difference residual.
_FIRST_ORDER = np.array(
    [
        [0, 0, 0],
        [0, -1, 1],
        [0, 0, 0],
    ],
    dtype=np.float64,
)

# Second-order (square 3x3) residual.
_SECOND_ORDER = np.array(
    [
        [-1, 2, -1],
        [2, -4, 2],
        [-1, 2, -1],
    ],
    dtype=np.float64,
)

# 5x5 "KV" residual.
_KV = np.array(
    [
        [-1, 2, -2, 2, -1],
        [2, -6, 8, -6, 2],
        [-2, 8, -12, 8, -2],
        [2, -6, 8, -6, 2],
        [-1, 2, -2, 2, -1],
    ],
    dtype=np.float64,
)

KV_CENTER = -12.0


@dataclass(frozen=True)
class SrmFilterBank:
    """Three fixed high-pass kernels with their normalizers and clamp limit."""

    kernels: Tuple[np.ndarray, ...] = field(
        default_factory=lambda: (_FIRST_ORDER.copy(), _SECOND_ORDER.copy(), _KV.copy())
    )
    q: Tuple[float, ...] = (2.0, 4.0, 12.0)
    truncation: float = 2.0


def build_bank() -> SrmFilterBank:
    return SrmFilterBank()


def truncate(x: np.ndarray, limit: float) -> np.ndarray:
    if limit <= 0:
        raise ValueError("truncation limit must be positive")
    return np.clip(x, -limit, limit)


def _correlate_same(channel: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size cross-correlation with edge-replicate padding.

    Replication keeps a constant image constant under padding, and the
    window is differenced against its own center before the weighted sum:
    with zero-sum kernels this is algebraically identical but makes the
    residual of a constant image exactly zero, not merely ~1e-14.
    """
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(channel, ((ph, ph), (pw, pw)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw))
    centered = win - channel[:, :, None, None]
    return np.einsum("hwij,ij->hw", centered, kernel)


def apply_srm(image: np.ndarray, bank: SrmFilterBank | None = None) -> np.ndarray:
    """Residual stream of a [3,H,W] image with values in [0,1].

    Output channel k is kernel k correlated with the 0..255-scaled image,
    divided by q_k, averaged over the three input channels, clamped to
    the bank's truncation limit and rescaled to [-1, 1].
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"apply_srm expects a [3,H,W] image, got shape {img.shape}")
    if bank is None:
        bank = build_bank()
    scaled = img * 255.0
    out = np.empty_like(img)
    for k, (kernel, q) in enumerate(zip(bank.kernels, bank.q)):
        acc = np.zeros(img.shape[1:])
        for ch in range(3):
            acc += _correlate_same(scaled[ch], kernel)
        out[k] = truncate(acc / (3.0 * q), bank.truncation) / bank.truncation
    return out
