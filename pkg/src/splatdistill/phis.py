"""PCA rotation + Hadamard mixing + isotropic scaling (PHI-S standardization).

After the transform every output channel has the same variance, and the
mean channel variance is one. The map is orthogonal up to a single global
scale, so distances and centered cosine similarities are preserved.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import hadamard

from .errors import DataError, FormatError, NumericalError, ShapeError


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n) - 1).bit_length()


@dataclass(frozen=True, eq=False)
class PhisTransform:
    mean: np.ndarray  # (d,)
    rotation: np.ndarray  # (d', d')
    scale: float
    eigenvalues: np.ndarray | None = None  # (d,) descending, for inspection

    @property
    def input_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def output_dim(self) -> int:
        return self.rotation.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return apply(self, x)

    def invert(self, y: np.ndarray) -> np.ndarray:
        return invert(self, y)


def fit(samples: np.ndarray, eig_floor: float = 1e-12) -> PhisTransform:
    """Fit on ``(M, d)`` samples; needs ``M > d``."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("samples must be a 2D array")
    m, d = x.shape
    if m <= d:
        raise DataError(f"need more than {d} samples to fit a {d}-dim transform, got {m}")
    if not np.all(np.isfinite(x)):
        raise DataError("samples contain non-finite values")
    mean = x.mean(axis=0)
    cov = np.cov(x - mean, rowvar=False).reshape(d, d)
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    if evals.min() < -1e-8 * max(1.0, evals.max()):
        raise NumericalError("covariance is not positive semi-definite")
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], eig_floor)
    evecs = evecs[:, order]

    dp = next_pow2(d)
    basis = np.eye(dp)
    basis[:d, :d] = evecs.T
    rotation = hadamard(dp).astype(np.float64) / np.sqrt(dp) @ basis
    scale = 1.0 / np.sqrt(evals.sum() / dp)
    return PhisTransform(mean, rotation, float(scale), evals)


def _pad(x: np.ndarray, dp: int) -> np.ndarray:
    out = np.zeros(x.shape[:-1] + (dp,))
    out[..., : x.shape[-1]] = x
    return out


def apply(t: PhisTransform, x: np.ndarray) -> np.ndarray:
    """``scale * rotation @ pad(x - mean)``; works on ``(..., d)`` arrays."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != t.input_dim:
        raise ShapeError(f"expected last dimension {t.input_dim}, got {x.shape[-1]}")
    return t.scale * _pad(x - t.mean, t.output_dim) @ t.rotation.T


def invert(t: PhisTransform, y: np.ndarray) -> np.ndarray:
    """``mean + unpad(rotation^T y / scale)``."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != t.output_dim:
        raise ShapeError(f"expected last dimension {t.output_dim}, got {y.shape[-1]}")
    return t.mean + (y @ t.rotation / t.scale)[..., : t.input_dim]


def save(t: PhisTransform, path) -> None:
    d, dp = t.input_dim, t.output_dim
    payload = struct.pack("<4sIId", b"CHPS", d, dp, t.scale)
    payload += np.asarray(t.mean, "<f8").tobytes() + np.asarray(t.rotation, "<f8").tobytes()
    Path(path).write_bytes(payload)


def load(path) -> PhisTransform:
    raw = Path(path).read_bytes()
    if raw[:4] != b"CHPS":
        raise FormatError(f"{path}: bad CHPS magic")
    d, dp, scale = struct.unpack_from("<IId", raw, 4)
    off = 20
    if len(raw) != off + 8 * (d + dp * dp):
        raise FormatError(f"{path}: CHPS payload size mismatch")
    mean = np.frombuffer(raw, "<f8", d, off).copy()
    rotation = np.frombuffer(raw, "<f8", dp * dp, off + 8 * d).reshape(dp, dp).copy()
    return PhisTransform(mean, rotation, scale)
