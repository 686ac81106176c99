"""Mixture of Low-rank Experts layer.

Frozen experts (from :mod:`emtal.moefy`) get per-expert LoRA deltas on their up
and down projections; a soft router reweights each expert's pre-activation.
The fading coefficient ``alpha`` blends the router output toward the constant 1,
and at ``alpha == 0`` the layer collapses to a plain dense FFN which
:func:`reparameterize` materializes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .linalg import Rng, gelu, gelu_grad, layer_norm_bwd, layer_norm_fwd, softmax_rows
from .moefy import DenseFFN, Expert, ExpertPartition, assemble_experts, extract_experts

LN_EPS = 1e-6
LORA_INIT_STD = 0.02


@dataclass
class LoraFactors:
    A_up: list[np.ndarray]  # D x rank
    B_up: list[np.ndarray]  # rank x H/K
    A_down: list[np.ndarray]  # H/K x rank
    B_down: list[np.ndarray]  # rank x D

    @property
    def rank(self) -> int:
        return self.A_up[0].shape[1]

    @classmethod
    def init(cls, K: int, D: int, hk: int, rank: int, rng: Rng, dtype=np.float32) -> "LoraFactors":
        if rank < 1 or rank > min(D, hk):
            raise ConfigError(f"rank={rank} must lie in [1, min(D={D}, H/K={hk})]")
        return cls(
            [rng.normal((D, rank), LORA_INIT_STD, dtype) for _ in range(K)],
            [np.zeros((rank, hk), dtype) for _ in range(K)],
            [rng.normal((hk, rank), LORA_INIT_STD, dtype) for _ in range(K)],
            [np.zeros((rank, D), dtype) for _ in range(K)],
        )


@dataclass
class Router:
    W_r: np.ndarray  # D x K
    tau: float = 5.0
    alpha: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"router temperature tau must be > 0, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"fading coefficient alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class MoleLayer:
    experts: list[Expert]
    lora: LoraFactors
    router: Router
    b_down: np.ndarray
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    partition: ExpertPartition

    def __post_init__(self):
        K = len(self.experts)
        D = self.b_down.shape[0]
        hk = self.experts[0].E_b.shape[0]
        r = self.lora.rank
        if K != self.partition.K or hk * K != self.partition.H:
            raise DimensionError("expert count or size does not match the partition")
        if self.router.W_r.shape != (D, K):
            raise DimensionError(f"router W_r must be {(D, K)}, got {self.router.W_r.shape}")
        for i, e in enumerate(self.experts):
            shapes = [
                (e.E_up.shape, (D, hk)), (e.E_b.shape, (hk,)), (e.E_down.shape, (hk, D)),
                (self.lora.A_up[i].shape, (D, r)), (self.lora.B_up[i].shape, (r, hk)),
                (self.lora.A_down[i].shape, (hk, r)), (self.lora.B_down[i].shape, (r, D)),
            ]
            for got, want in shapes:
                if got != want:
                    raise DimensionError(f"expert {i}: array shape {got}, expected {want}")

    @property
    def K(self) -> int:
        return len(self.experts)

    @property
    def D(self) -> int:
        return self.b_down.shape[0]

    @property
    def dtype(self):
        return self.b_down.dtype

    def trainable(self) -> dict[str, np.ndarray]:
        """Live references to the trainable arrays, keyed by canonical local names."""
        out = {}
        for i in range(self.K):
            for key in ("A_up", "B_up", "A_down", "B_down"):
                out[f"lora{i}.{key}"] = getattr(self.lora, key)[i]
        out["router.W_r"] = self.router.W_r
        return out

    def frozen(self) -> dict[str, np.ndarray]:
        out = {}
        for i, e in enumerate(self.experts):
            out[f"expert{i}.E_up"] = e.E_up
            out[f"expert{i}.E_b"] = e.E_b
            out[f"expert{i}.E_down"] = e.E_down
        out["ffn.b_down"] = self.b_down
        out["ln.gamma"] = self.ln_gamma
        out["ln.beta"] = self.ln_beta
        return out


def build_mole(
    ffn: DenseFFN, ln_gamma: np.ndarray, ln_beta: np.ndarray, part: ExpertPartition,
    rank: int, rng: Rng, tau: float = 5.0, alpha: float = 1.0,
) -> MoleLayer:
    """Freshly MoEfied layer: zero B factors and zero router, i.e. functionally the dense FFN."""
    dtype = ffn.W_up.dtype
    experts = extract_experts(ffn, part)
    lora = LoraFactors.init(part.K, ffn.D, part.cluster_size, rank, rng, dtype)
    router = Router(np.zeros((ffn.D, part.K), dtype), tau, alpha)
    return MoleLayer(experts, lora, router, ffn.b_down.copy(), ln_gamma.copy(), ln_beta.copy(), part)


def fading_alpha(epoch: float, start_epoch: float, end_epoch: float) -> float:
    """1 before ``start_epoch``, linear down to 0 at ``end_epoch``, 0 afterwards."""
    if start_epoch >= end_epoch:
        raise ConfigError(f"fading start_epoch ({start_epoch}) must be < end_epoch ({end_epoch})")
    if epoch < start_epoch:
        return 1.0
    if epoch >= end_epoch:
        return 0.0
    return (end_epoch - epoch) / (end_epoch - start_epoch)


def router_weights(xn: np.ndarray, router: Router) -> tuple[np.ndarray, np.ndarray]:
    """omega = alpha * K * softmax(xn W_r / tau) + (1 - alpha); returns (omega, softmax probs).

    ``xn`` is the layer-normalized input, shared with the experts.
    """
    if not router.tau > 0:
        raise ConfigError(f"router temperature tau must be > 0, got {router.tau}")
    K = router.W_r.shape[1]
    probs = softmax_rows((xn @ router.W_r) / router.tau)
    omega = router.alpha * K * probs + (1.0 - router.alpha)
    return omega.astype(xn.dtype, copy=False), probs


def effective_expert(i: int, experts: list[Expert], lora: LoraFactors) -> tuple[np.ndarray, np.ndarray]:
    """(E_up + A_up B_up, E_down + A_down B_down) for expert ``i``."""
    e = experts[i]
    up_delta = lora.A_up[i] @ lora.B_up[i]
    down_delta = lora.A_down[i] @ lora.B_down[i]
    if up_delta.shape != e.E_up.shape or down_delta.shape != e.E_down.shape:
        raise DimensionError(f"expert {i}: LoRA delta shapes do not match the expert")
    # an all-zero B leaves the frozen weights bit-identical
    up = e.E_up + up_delta if lora.B_up[i].any() else e.E_up.copy()
    down = e.E_down + down_delta if lora.B_down[i].any() else e.E_down.copy()
    return up, down


@dataclass
class MoleCache:
    ln: tuple
    xn: np.ndarray
    omega: np.ndarray
    probs: np.ndarray
    eff: list
    pre: list
    u: list
    h: list


def mole_forward(x: np.ndarray, layer: MoleLayer, layer_index: int | None = None, return_cache: bool = False):
    """FFN-de(LN(x)): sum_i GELU(omega_i * (xn E_up_i' + E_b_i)) E_down_i' + b_down.

    ``x`` is the pre-LN block input (N x D); the residual is added by the caller.
    """
    xn, ln_cache = layer_norm_fwd(x, layer.ln_gamma, layer.ln_beta, LN_EPS)
    omega, probs = router_weights(xn, layer.router)
    out = np.broadcast_to(layer.b_down, (x.shape[0], layer.D)).copy()
    eff, pre, us, hs = [], [], [], []
    for i, e in enumerate(layer.experts):
        up, down = effective_expert(i, layer.experts, layer.lora)
        p = xn @ up + e.E_b
        u = omega[:, i : i + 1] * p
        h = gelu(u)
        out += h @ down
        if return_cache:
            eff.append((up, down))
            pre.append(p)
            us.append(u)
            hs.append(h)
    if not np.all(np.isfinite(out)):
        where = f" in layer {layer_index}" if layer_index is not None else ""
        raise NumericError(f"non-finite MoLE activation{where}")
    if return_cache:
        return out, MoleCache(ln_cache, xn, omega, probs, eff, pre, us, hs)
    return out


def mole_backward(x: np.ndarray, layer: MoleLayer, upstream: np.ndarray, cache: MoleCache | None = None):
    """Gradients of sum(upstream * mole_forward(x)).

    Returns ``(grads, dx)`` where ``grads`` maps the keys of
    :meth:`MoleLayer.trainable` to arrays; frozen arrays get nothing.
    """
    if upstream.shape != (x.shape[0], layer.D):
        raise DimensionError(f"upstream gradient shape {upstream.shape} != {(x.shape[0], layer.D)}")
    if cache is None:
        _, cache = mole_forward(x, layer, return_cache=True)
    lora, router = layer.lora, layer.router
    xn = cache.xn
    grads: dict[str, np.ndarray] = {}
    dxn = np.zeros_like(xn)
    domega = np.zeros_like(cache.omega)
    for i in range(layer.K):
        up, down = cache.eff[i]
        d_down = cache.h[i].T @ upstream
        grads[f"lora{i}.A_down"] = d_down @ lora.B_down[i].T
        grads[f"lora{i}.B_down"] = lora.A_down[i].T @ d_down
        du = (upstream @ down.T) * gelu_grad(cache.u[i])
        domega[:, i] = (du * cache.pre[i]).sum(axis=1)
        dpre = du * cache.omega[:, i : i + 1]
        d_up = xn.T @ dpre
        grads[f"lora{i}.A_up"] = d_up @ lora.B_up[i].T
        grads[f"lora{i}.B_up"] = lora.A_up[i].T @ d_up
        dxn += dpre @ up.T
    # omega = alpha*K*softmax(s) + const,  s = xn W_r / tau
    p = cache.probs
    dp = domega * (router.alpha * layer.K)
    ds = p * (dp - (dp * p).sum(axis=1, keepdims=True)) / router.tau
    grads["router.W_r"] = xn.T @ ds
    dxn += ds @ router.W_r.T
    dx, _, _ = layer_norm_bwd(dxn, cache.ln)
    return grads, dx


def reparameterize(layer: MoleLayer, restore_order: bool = True) -> DenseFFN:
    """Fold the LoRA deltas into the experts and concatenate them into one dense FFN.

    Equivalent to the layer's forward at alpha = 0. With ``restore_order`` the
    channels return to their original positions.
    """
    ups, downs = zip(*(effective_expert(i, layer.experts, layer.lora) for i in range(layer.K)))
    return assemble_experts(
        list(ups), [e.E_b for e in layer.experts], list(downs), layer.b_down, layer.partition, restore_order
    )


def tunable_count(D: int, H: int, K: int, rank: int) -> int:
    """Trainable scalars of one MoLE layer: K experts x two LoRA pairs, plus the router."""
    return 2 * K * rank * (D + H // K) + D * K
