"""Numerical substrate: activations, normalization, softmax/KL, Jacobi SVD, seeded RNG.

Matrices are plain numpy arrays. Training runs in float32 and verification in
float64; every function here preserves the dtype of its inputs.
"""
from __future__ import annotations

import zlib

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NumericError

F32 = np.float32
F64 = np.float64

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


def gelu(x):
    """x * Phi(x) with the exact Gaussian CDF."""
    x = np.asarray(x)
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x):
    x = np.asarray(x)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def layer_norm(x, gamma, beta, eps: float = 1e-6):
    """Standardize along the last axis, then scale by ``gamma`` and shift by ``beta``.

    Works on a single vector or on an N x D batch.
    """
    x = np.asarray(x)
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    if x.shape[-1] != gamma.shape[-1] or gamma.shape != beta.shape:
        raise DimensionError(
            f"layer_norm: x has width {x.shape[-1]}, gamma {gamma.shape}, beta {beta.shape}"
        )
    out, _ = layer_norm_fwd(x, gamma, beta, eps)
    return out


def layer_norm_fwd(x, gamma, beta, eps: float = 1e-6):
    """Forward pass returning ``(out, cache)`` for :func:`layer_norm_bwd`."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layer_norm_bwd(dout, cache):
    """Returns ``(dx, dgamma, dbeta)``; parameter grads are summed over the batch."""
    xhat, rstd, gamma = cache
    dxhat = dout * gamma
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    flat = dout.reshape(-1, dout.shape[-1])
    dgamma = (flat * xhat.reshape(flat.shape)).sum(axis=0)
    dbeta = flat.sum(axis=0)
    return dx, dgamma, dbeta


def softmax_rows(m):
    m = np.asarray(m)
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(m):
    m = np.asarray(m)
    z = m - m.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_divergence(p, q, eps: float = 1e-12):
    """sum_i p_i * ln((p_i + eps) / (q_i + eps)).

    ``eps`` smooths both arguments; with ``p`` a one-hot vector the result is
    off from the exact value by O(eps).
    """
    p = np.asarray(p, dtype=F64)
    q = np.asarray(q, dtype=F64)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence: shapes {p.shape} and {q.shape} differ")
    return float(np.sum(p * (np.log(p + eps) - np.log(q + eps))))


def _round_robin(n: int):
    """Tournament schedule: n-1 rounds (n even) of disjoint index pairs covering all pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    for _ in range(m - 1):
        pairs = [
            (players[i], players[m - 1 - i])
            for i in range(m // 2)
            if players[i] >= 0 and players[m - 1 - i] >= 0
        ]
        yield np.array([min(a, b) for a, b in pairs]), np.array([max(a, b) for a, b in pairs])
        players = [players[0]] + [players[-1]] + players[1:-1]


def svd_values(m, tol: float = 1e-15, max_sweeps: int = 60) -> np.ndarray:
    """Singular values in descending order via one-sided (Hestenes) Jacobi.

    Columns are orthogonalized pairwise by plane rotations until every pair is
    numerically orthogonal; the singular values are then the column norms.
    Disjoint pairs of a round-robin schedule are rotated together.
    Always computed in float64.
    """
    a = np.array(m, dtype=F64)
    if a.ndim != 2:
        raise DimensionError(f"svd_values expects a matrix, got shape {a.shape}")
    check_finite(a, "svd_values input")
    if a.shape[1] > a.shape[0]:
        a = a.T.copy()
    n = a.shape[1]
    if n > 1024:
        raise DimensionError(f"svd_values: min dimension {n} exceeds desk-scale limit 1024")
    if n == 0:
        return np.zeros(0)
    if n > 1:
        rounds = list(_round_robin(n))
        for _ in range(max_sweeps):
            rotated = False
            for i, j in rounds:
                ai, aj = a[:, i], a[:, j]
                alpha = np.einsum("ij,ij->j", ai, ai)
                beta = np.einsum("ij,ij->j", aj, aj)
                gamma = np.einsum("ij,ij->j", ai, aj)
                active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
                active &= gamma != 0.0
                if not active.any():
                    continue
                rotated = True
                zeta = np.where(active, (beta - alpha) / np.where(active, 2.0 * gamma, 1.0), 0.0)
                t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                t = np.where(zeta == 0.0, 1.0, t)
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                a[:, i] = c * ai - s * aj
                a[:, j] = s * ai + c * aj
            if not rotated:
                break
    sv = np.sqrt(np.einsum("ij,ij->j", a, a))
    return np.sort(sv)[::-1]


class Rng:
    """Seeded random stream; named substreams are derived deterministically from the seed.

    Backed by numpy's PCG64, whose output is fixed across platforms.
    """

    def __init__(self, seed: int, stream: str = ""):
        self.seed = int(seed)
        self.stream = stream
        key = (zlib.crc32(stream.encode("utf-8")),) if stream else ()
        ss = np.random.SeedSequence(entropy=self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def substream(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.stream}/{name}" if self.stream else name)

    def normal(self, size, std: float = 1.0, dtype=F64) -> np.ndarray:
        return (self._gen.standard_normal(size) * std).astype(dtype)

    def uniform(self, size, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n: int, p=None) -> int:
        return int(self._gen.choice(n, p=p))
