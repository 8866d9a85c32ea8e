"""Rotary position embedding and position realignment of cached key blocks."""

from __future__ import annotations

import numpy as np

from ..errors import OddDimension


def _angles(d: int, base: float) -> np.ndarray:
    if d % 2:
        raise OddDimension(f"rotary dimension must be even, got {d}")
    return base ** (-2.0 * np.arange(d // 2) / d)


def _rotate(x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Rotate pairs (2i, 2i+1) of each row by ``theta[row, i]``."""
    even, odd = x[..., 0::2], x[..., 1::2]
    c, s = np.cos(theta), np.sin(theta)
    out = np.empty_like(x, dtype=np.float64)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


def rope_encode(block, start_pos: float, theta_base: float = 10000.0) -> np.ndarray:
    """Apply rotary encoding to raw vectors placed at ``start_pos, start_pos + 1, ...``."""
    x = np.atleast_2d(np.asarray(block, dtype=np.float64))
    freqs = _angles(x.shape[-1], theta_base)
    pos = start_pos + np.arange(x.shape[0], dtype=np.float64)
    return _rotate(x, pos[:, None] * freqs[None, :])


def rope_realign(block, old_pos: float, new_pos: float, theta_base: float = 10000.0) -> np.ndarray:
    """Move an encoded block from ``old_pos`` to ``new_pos``.

    Every token shifts by the same offset, so a single relative rotation per
    frequency suffices.
    """
    x = np.atleast_2d(np.asarray(block, dtype=np.float64))
    freqs = _angles(x.shape[-1], theta_base)
    if new_pos == old_pos:
        return x.copy()
    delta = float(new_pos) - float(old_pos)
    return _rotate(x, np.broadcast_to(delta * freqs, (x.shape[0], len(freqs))))
