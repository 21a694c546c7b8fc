"""Dense float64 kernels and RNG plumbing shared by every other module.

All math in this package runs in 64-bit floats; gradient verification
depends on that precision. Matrices are plain C-contiguous numpy arrays.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.special import kolmogorov

__all__ = [
    "make_rng",
    "derive_seed",
    "require_matrix",
    "sigmoid",
    "row_softmax",
    "pearson",
    "ks_statistic",
]

RNG_ALGORITHM = "pcg64"

# Keeps sigmoid outputs strictly inside (0, 1) even for saturating inputs.
_SIGMOID_FLOOR = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator. Identical seed gives an identical stream
    within one build; no cross-platform bit-exactness is promised."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(master_seed: int, *keys) -> int:
    """Stable 63-bit sub-seed from a master seed and arbitrary string keys.

    Used to hand out independent, order-free seeds to parallel trials.
    """
    h = hashlib.sha256()
    h.update(str(int(master_seed)).encode())
    for key in keys:
        h.update(b"\x1f")
        h.update(str(key).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1


def require_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return `a` as a 2-D, finite, C-contiguous float64 array."""
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D matrix, got ndim={out.ndim}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name}: entries must be finite")
    return out


def sigmoid(v) -> np.ndarray:
    """Elementwise logistic function 1 / (1 + e^-v).

    Computed in the numerically stable branch per sign and clipped so the
    result stays strictly inside (0, 1) even when float64 would round a
    saturated value to exactly 0 or 1.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("sigmoid: input must be finite")
    with np.errstate(over="ignore"):
        out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-v)), np.exp(v) / (1.0 + np.exp(v)))
    return np.clip(out, _SIGMOID_FLOOR, 1.0 - _SIGMOID_FLOOR)


def row_softmax(m, zeta: float) -> np.ndarray:
    """Row-wise softmax of `zeta * m`; every output row is a distribution.

    Shift-invariant per row (the row max is subtracted before
    exponentiation), so large logits cannot overflow.
    """
    if not zeta > 0:
        raise ValueError(f"row_softmax: zeta must be positive, got {zeta}")
    m = require_matrix(m, "row_softmax input")
    scaled = zeta * m
    scaled -= scaled.max(axis=1, keepdims=True)
    out = np.exp(scaled)
    out /= out.sum(axis=1, keepdims=True)
    return out


def pearson(x, y) -> float | None:
    """Sample Pearson correlation of two equal-length vectors.

    Returns None (rather than NaN) when either vector is constant and the
    coefficient is undefined.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise ValueError("pearson: inputs must be equal-length vectors")
    if x.size < 2:
        raise ValueError("pearson: need at least 2 observations")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("pearson: inputs must be finite")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.dot(dx, dx)
    sy = np.dot(dy, dy)
    if sx == 0.0 or sy == 0.0:
        return None
    r = float(np.dot(dx, dy) / np.sqrt(sx * sy))
    return min(1.0, max(-1.0, r))


def ks_statistic(a, b) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic sup|F_a - F_b| and its
    p-value under the asymptotic Kolmogorov distribution."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("ks_statistic: both samples must be non-empty")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    stat = float(np.abs(cdf_a - cdf_b).max())
    en = np.sqrt(a.size * b.size / (a.size + b.size))
    pvalue = float(np.clip(kolmogorov(en * stat), 0.0, 1.0))
    return stat, pvalue
