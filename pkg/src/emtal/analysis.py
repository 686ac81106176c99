"""Low-rank diagnostics of expert blocks and tunable-parameter accounting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .linalg import Rng, svd_values
from .moefy import DenseFFN, extract_experts, partition_ffn
from .mole import tunable_count


def kyfan_ratio(m: np.ndarray, k: int, sv: np.ndarray | None = None) -> float:
    """sqrt(sum of the top-k squared singular values) / Frobenius norm.

    The share of spectral energy a rank-k approximation keeps; higher means
    closer to low-rank.
    """
    m = np.asarray(m)
    r = min(m.shape)
    if not 1 <= k <= r:
        raise ConfigError(f"k={k} must lie in [1, {r}]")
    sv = svd_values(m) if sv is None else sv
    total = float(np.sum(sv**2))
    if total == 0.0:
        return 1.0
    return min(1.0, float(np.sqrt(np.sum(sv[:k] ** 2) / total)))


@dataclass
class ExpertSpectrum:
    layer: int
    expert: int
    singular_values: np.ndarray
    ratios: dict[int, float]


@dataclass
class SpectralReport:
    strategy: str
    experts: list[ExpertSpectrum] = field(default_factory=list)

    def mean_ratio(self, k: int) -> float:
        return float(np.mean([e.ratios[k] for e in self.experts]))


def expert_matrices(ffn: DenseFFN, part, target: str = "up") -> list[np.ndarray]:
    """E_up blocks by default; ``target="stacked"`` uses the full (2D+1) x H/K expert columns."""
    experts = extract_experts(ffn, part)
    if target == "up":
        return [e.E_up for e in experts]
    if target == "stacked":
        return [np.concatenate([e.E_up, e.E_b[None, :], e.E_down.T]) for e in experts]
    raise ConfigError(f"unknown spectral target {target!r}")


def spectral_report(ffn: DenseFFN, part, ks, strategy: str, layer: int = 0, target: str = "up") -> SpectralReport:
    rep = SpectralReport(strategy)
    for i, m in enumerate(expert_matrices(ffn, part, target)):
        sv = svd_values(m)
        rep.experts.append(ExpertSpectrum(layer, i, sv, {k: kyfan_ratio(m, k, sv) for k in ks}))
    return rep


def compare_partitions(ffn: DenseFFN, K: int, k, seed: int = 0, layer: int = 0, target: str = "up",
                       mode: str = "stacked", max_iters: int = 50) -> tuple[SpectralReport, SpectralReport]:
    """Spectra of experts from balanced k-means vs the contiguous split, for the same K."""
    ks = [k] if np.isscalar(k) else list(k)
    balanced = partition_ffn(ffn, K, "balanced", seed=seed, max_iters=max_iters, mode=mode)
    contiguous = partition_ffn(ffn, K, "contiguous")
    return (
        spectral_report(ffn, balanced, ks, "balanced", layer, target),
        spectral_report(ffn, contiguous, ks, "contiguous", layer, target),
    )


def planted_ffn(D: int, H: int, K: int, seed: int = 0, noise: float = 0.05, dtype=np.float64) -> DenseFFN:
    """FFN whose channels form K bundles of H/K near-duplicates, randomly shuffled.

    Channel j of bundle b is ``center_b * scale_j + noise``: within a bundle the
    columns are nearly rank-1, across bundles they are unrelated.
    """
    if K < 1 or H % K:
        raise ConfigError(f"K={K} must divide H={H}")
    rng = Rng(seed, "planted")
    rows = 2 * D + 1
    centers = rng.normal((K, rows))
    bundle = np.repeat(np.arange(K), H // K)
    scale = 1.0 + 0.1 * rng.normal(H)
    cols = centers[bundle] * scale[:, None] + noise * rng.normal((H, rows))
    cols = cols[rng.permutation(H)]
    stacked = cols.T
    return DenseFFN(stacked[:D].copy().astype(dtype), stacked[D].copy().astype(dtype),
                    stacked[D + 1 :].T.copy().astype(dtype), np.zeros(D, dtype))


def count_tunables(D: int, H: int, K: int, rank: int, blocks: int = 1, n_class: int | None = None) -> dict:
    """Closed-form trainable-scalar counts: per MoLE layer, all layers, head, and total."""
    if K < 1 or H % K:
        raise ConfigError(f"K={K} must divide H={H}")
    if rank < 1:
        raise ConfigError("rank must be >= 1")
    per_layer = tunable_count(D, H, K, rank)
    lora = 2 * K * rank * (D + H // K)
    head = D * n_class + n_class if n_class else 0
    return {
        "per_layer": per_layer,
        "lora": lora * blocks,
        "router": D * K * blocks,
        "layers": per_layer * blocks,
        "head": head,
        "total": per_layer * blocks + head,
    }
