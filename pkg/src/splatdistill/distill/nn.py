"""Small dense-layer toolkit with explicit backward passes (float64)."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
LN_EPS = 1e-5


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def layer_norm(u: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = u.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(u.var(axis=1, keepdims=True) + LN_EPS)
    n = (u - mu) * inv
    return n * gain + bias, (n, inv)


def layer_norm_backward(dv: np.ndarray, gain: np.ndarray, cache):
    n, inv = cache
    dn = dv * gain
    du = inv * (dn - dn.mean(axis=1, keepdims=True) - n * np.mean(dn * n, axis=1, keepdims=True))
    return du, np.sum(dv * n, axis=0), np.sum(dv, axis=0)


def knn_pool_matrix(centers: np.ndarray, k: int) -> sp.csr_matrix:
    """Row-stochastic ``(N, N)`` matrix averaging each point's ``k`` nearest centers (self included)."""
    n = len(centers)
    if n == 0:
        return sp.csr_matrix((0, 0))
    k = min(int(k), n)
    _, idx = cKDTree(centers).query(centers, k=k)
    idx = np.sort(np.asarray(idx).reshape(n, k), axis=1)
    rows = np.repeat(np.arange(n), k)
    return sp.csr_matrix((np.full(n * k, 1.0 / k), (rows, idx.ravel())), shape=(n, n))


def init_linear(rng, fan_in: int, fan_out: int, gain: float = 1.0):
    w = rng.normal(0.0, gain * np.sqrt(2.0 / (fan_in + fan_out)), (fan_in, fan_out))
    return w, np.zeros(fan_out)
