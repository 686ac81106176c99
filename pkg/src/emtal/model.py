"""Desk-scale multi-task classifier with hand-written backprop.

    x -> embed -> [x + FFN(LN(x))] * blocks -> LN -> head -> logits

Blocks are all dense (pretraining, full fine-tuning) or all MoLE (EMTAL).
Parameters are addressed by canonical dotted names, shared with the archive.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArchiveCorruptionError, ConfigError, DimensionError, NumericError, UsageError
from .linalg import Rng, gelu, gelu_grad, layer_norm_bwd, layer_norm_fwd
from .mole import (
    LN_EPS, LoraFactors, MoleLayer, Router, build_mole, mole_backward, mole_forward, reparameterize,
)
from .moefy import DenseFFN, Expert, ExpertPartition, partition_ffn


@dataclass
class DenseBlock:
    ffn: DenseFFN
    ln_gamma: np.ndarray
    ln_beta: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "ffn.W_up": self.ffn.W_up, "ffn.b_up": self.ffn.b_up,
            "ffn.W_down": self.ffn.W_down, "ffn.b_down": self.ffn.b_down,
            "ln.gamma": self.ln_gamma, "ln.beta": self.ln_beta,
        }


def dense_block_forward(x, blk: DenseBlock):
    xn, ln_cache = layer_norm_fwd(x, blk.ln_gamma, blk.ln_beta, LN_EPS)
    pre = xn @ blk.ffn.W_up + blk.ffn.b_up
    h = gelu(pre)
    y = h @ blk.ffn.W_down + blk.ffn.b_down
    return y, (ln_cache, xn, pre, h)


def dense_block_backward(dy, blk: DenseBlock, cache):
    ln_cache, xn, pre, h = cache
    grads = {"ffn.W_down": h.T @ dy, "ffn.b_down": dy.sum(axis=0)}
    dpre = (dy @ blk.ffn.W_down.T) * gelu_grad(pre)
    grads["ffn.W_up"] = xn.T @ dpre
    grads["ffn.b_up"] = dpre.sum(axis=0)
    dx, grads["ln.gamma"], grads["ln.beta"] = layer_norm_bwd(dpre @ blk.ffn.W_up.T, ln_cache)
    return grads, dx


@dataclass
class ToyNet:
    embed_W: np.ndarray  # d_in x D
    embed_b: np.ndarray
    blocks: list  # DenseBlock | MoleLayer
    final_gamma: np.ndarray
    final_beta: np.ndarray
    head_W: np.ndarray  # D x N_class
    head_b: np.ndarray

    def __post_init__(self):
        kinds = {type(b) for b in self.blocks}
        if len(kinds) > 1:
            raise ConfigError("all blocks must be the same variant (dense or MoLE)")

    @property
    def phase(self) -> str:
        return "mole" if self.blocks and isinstance(self.blocks[0], MoleLayer) else "dense"

    @property
    def dtype(self):
        return self.embed_W.dtype

    @property
    def n_class(self) -> int:
        return self.head_W.shape[1]

    def _outer(self) -> dict[str, np.ndarray]:
        return {
            "embed.W": self.embed_W, "embed.b": self.embed_b,
            "final_ln.gamma": self.final_gamma, "final_ln.beta": self.final_beta,
            "head.W": self.head_W, "head.b": self.head_b,
        }

    def trainable(self) -> dict[str, np.ndarray]:
        """Live references. Dense phase: everything. MoLE phase: LoRA, routers and head."""
        if self.phase == "dense":
            return self.arrays()
        out = {}
        for l, blk in enumerate(self.blocks):
            out.update({f"layer{l}.{k}": v for k, v in blk.trainable().items()})
        out["head.W"] = self.head_W
        out["head.b"] = self.head_b
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        out = self._outer()
        for l, blk in enumerate(self.blocks):
            local = blk.arrays() if isinstance(blk, DenseBlock) else {**blk.frozen(), **blk.trainable()}
            out.update({f"layer{l}.{k}": v for k, v in local.items()})
        return out

    def frozen(self) -> dict[str, np.ndarray]:
        train = self.trainable()
        return {k: v for k, v in self.arrays().items() if k not in train}

    def set_alpha(self, alpha: float) -> None:
        for blk in self.blocks:
            if isinstance(blk, MoleLayer):
                blk.router.alpha = float(alpha)


def init_dense(d_in: int, D: int, H: int, blocks: int, n_class: int, rng: Rng, dtype=np.float32) -> ToyNet:
    rng = rng.substream("init")
    blks = [
        DenseBlock(
            DenseFFN(
                rng.normal((D, H), 1.0 / math.sqrt(D), dtype), np.zeros(H, dtype),
                rng.normal((H, D), 0.5 / math.sqrt(H), dtype), np.zeros(D, dtype),
            ),
            np.ones(D, dtype), np.zeros(D, dtype),
        )
        for _ in range(blocks)
    ]
    return ToyNet(
        rng.normal((d_in, D), 1.0 / math.sqrt(d_in), dtype), np.zeros(D, dtype), blks,
        np.ones(D, dtype), np.zeros(D, dtype),
        rng.normal((D, n_class), 1.0 / math.sqrt(D), dtype), np.zeros(n_class, dtype),
    )


@dataclass
class ForwardCache:
    x: np.ndarray
    block_inputs: list
    block_caches: list
    final_ln: tuple
    features: np.ndarray


def forward(net: ToyNet, x: np.ndarray, return_cache: bool = False):
    if x.ndim != 2 or x.shape[1] != net.embed_W.shape[0]:
        raise DimensionError(f"input must be N x {net.embed_W.shape[0]}, got {x.shape}")
    x = x.astype(net.dtype, copy=False)
    hcur = x @ net.embed_W + net.embed_b
    inputs, caches = [], []
    for l, blk in enumerate(net.blocks):
        inputs.append(hcur)
        if isinstance(blk, DenseBlock):
            y, c = dense_block_forward(hcur, blk)
        else:
            y, c = mole_forward(hcur, blk, layer_index=l, return_cache=True)
        if not np.all(np.isfinite(y)):
            raise NumericError(f"non-finite activation in block {l}")
        caches.append(c)
        hcur = hcur + y
    feats, ln_cache = layer_norm_fwd(hcur, net.final_gamma, net.final_beta, LN_EPS)
    logits = feats @ net.head_W + net.head_b
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    if return_cache:
        return logits, ForwardCache(x, inputs, caches, ln_cache, feats)
    return logits


def backward(net: ToyNet, cache: ForwardCache | None, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for exactly the arrays in ``net.trainable()``."""
    if cache is None:
        raise UsageError("backward needs the cache from forward(..., return_cache=True)")
    dense = net.phase == "dense"
    grads = {"head.W": cache.features.T @ dlogits, "head.b": dlogits.sum(axis=0)}
    dfeat = dlogits @ net.head_W.T
    dh, dg, db = layer_norm_bwd(dfeat, cache.final_ln)
    if dense:
        grads["final_ln.gamma"], grads["final_ln.beta"] = dg, db
    for l in reversed(range(len(net.blocks))):
        blk = net.blocks[l]
        if isinstance(blk, DenseBlock):
            local, dx = dense_block_backward(dh, blk, cache.block_caches[l])
        else:
            local, dx = mole_backward(cache.block_inputs[l], blk, dh, cache.block_caches[l])
        grads.update({f"layer{l}.{k}": v for k, v in local.items()})
        dh = dh + dx
    if dense:
        grads["embed.W"] = cache.x.T @ dh
        grads["embed.b"] = dh.sum(axis=0)
    return grads


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        """Update ``params`` in place."""
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise DimensionError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            p -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def cosine_lr(epoch: float, base_lr: float, warmup_epochs: float, total_epochs: float) -> float:
    """Linear warm-up from 0 to ``base_lr``, then half-cosine decay to 0 at ``total_epochs``."""
    if warmup_epochs >= total_epochs:
        raise ConfigError(f"warmup_epochs ({warmup_epochs}) must be < total_epochs ({total_epochs})")
    if epoch < warmup_epochs:
        return base_lr * epoch / warmup_epochs
    if epoch >= total_epochs:
        return 0.0
    progress = (epoch - warmup_epochs) / (total_epochs - warmup_epochs)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --- phase conversion -------------------------------------------------------------------------


def partition_net(net: ToyNet, K: int, strategy: str = "balanced", seed: int = 0,
                  max_iters: int = 50, mode: str = "stacked") -> list[ExpertPartition]:
    if net.phase != "dense":
        raise ConfigError("partitioning needs a dense network")
    return [
        partition_ffn(b.ffn, K, strategy, seed=seed + 7919 * l, max_iters=max_iters, mode=mode)
        for l, b in enumerate(net.blocks)
    ]


def to_mole(net: ToyNet, parts: list[ExpertPartition], rank: int, rng: Rng, tau: float = 5.0) -> ToyNet:
    """MoEfy every block. The result computes the same function as ``net`` until trained."""
    if net.phase != "dense":
        raise ConfigError("to_mole needs a dense network")
    rng = rng.substream("lora")
    blocks = [
        build_mole(b.ffn, b.ln_gamma, b.ln_beta, p, rank, rng.substream(f"layer{l}"), tau)
        for l, (b, p) in enumerate(zip(net.blocks, parts))
    ]
    return ToyNet(net.embed_W.copy(), net.embed_b.copy(), blocks, net.final_gamma.copy(),
                  net.final_beta.copy(), net.head_W.copy(), net.head_b.copy())


def to_dense(net: ToyNet, restore_order: bool = True) -> ToyNet:
    """Reparameterize every MoLE block into a dense block (router dropped, i.e. alpha = 0)."""
    blocks = [
        DenseBlock(reparameterize(b, restore_order), b.ln_gamma.copy(), b.ln_beta.copy())
        if isinstance(b, MoleLayer) else b
        for b in net.blocks
    ]
    return ToyNet(net.embed_W.copy(), net.embed_b.copy(), blocks, net.final_gamma.copy(),
                  net.final_beta.copy(), net.head_W.copy(), net.head_b.copy())


def astype(net: ToyNet, dtype) -> ToyNet:
    tensors, meta = net_to_tensors(net)
    return net_from_tensors({k: v.astype(dtype) for k, v in tensors.items()}, meta)


# --- archive mapping --------------------------------------------------------------------------


def net_to_tensors(net: ToyNet, include_lora: bool = True) -> tuple[dict[str, np.ndarray], dict]:
    tensors = {k: v for k, v in net.arrays().items()}
    meta: dict = {
        "phase": net.phase,
        "dims": {"d_in": int(net.embed_W.shape[0]), "D": int(net.embed_W.shape[1]),
                 "blocks": len(net.blocks), "n_class": net.n_class},
    }
    if net.phase == "dense":
        meta["dims"]["H"] = int(net.blocks[0].ffn.H) if net.blocks else 0
    else:
        b0 = net.blocks[0]
        meta["dims"]["H"] = b0.partition.H
        meta.update(K=b0.K, rank=b0.lora.rank, tau=b0.router.tau, alpha=b0.router.alpha)
        meta["layers"] = [
            {"assignment": b.partition.assignment.tolist(), "permutation": b.partition.permutation.tolist()}
            for b in net.blocks
        ]
        if not include_lora:
            tensors = {k: v for k, v in tensors.items() if ".lora" not in k and ".router." not in k}
            meta.pop("rank")
            meta.pop("alpha")
    return tensors, meta


def _get(tensors, name):
    try:
        return np.array(tensors[name])
    except KeyError:
        raise ArchiveCorruptionError(f"archive is missing tensor {name!r}") from None


def net_from_tensors(tensors: dict[str, np.ndarray], meta: dict, rank: int | None = None,
                     rng: Rng | None = None, tau: float | None = None) -> ToyNet:
    """Rebuild a network from archive content.

    A MoEfied archive without LoRA tensors gets fresh LoRA factors of ``rank``
    (zero B) if ``rank`` is given, otherwise all-zero rank-1 factors.
    """
    phase = meta.get("phase")
    n_blocks = int(meta.get("dims", {}).get("blocks", 0))
    blocks: list = []
    if phase == "dense":
        for l in range(n_blocks):
            p = f"layer{l}."
            blocks.append(DenseBlock(
                DenseFFN(_get(tensors, p + "ffn.W_up"), _get(tensors, p + "ffn.b_up"),
                         _get(tensors, p + "ffn.W_down"), _get(tensors, p + "ffn.b_down")),
                _get(tensors, p + "ln.gamma"), _get(tensors, p + "ln.beta"),
            ))
    elif phase == "mole":
        K = int(meta.get("K", 0))
        layers = meta.get("layers")
        if not isinstance(layers, list) or len(layers) != n_blocks:
            raise ArchiveCorruptionError("MoLE archive lacks per-layer permutation metadata")
        for l in range(n_blocks):
            p = f"layer{l}."
            try:
                part = ExpertPartition(K, layers[l]["assignment"], layers[l]["permutation"])
            except (KeyError, TypeError) as exc:
                raise ArchiveCorruptionError(f"layer {l}: missing partition metadata ({exc})") from None
            experts = [
                Expert(_get(tensors, f"{p}expert{i}.E_up"), _get(tensors, f"{p}expert{i}.E_b"),
                       _get(tensors, f"{p}expert{i}.E_down"))
                for i in range(K)
            ]
            D, hk = experts[0].E_up.shape
            dtype = experts[0].E_up.dtype
            if f"{p}lora0.A_up" in tensors:
                lora = LoraFactors(*[
                    [_get(tensors, f"{p}lora{i}.{key}") for i in range(K)]
                    for key in ("A_up", "B_up", "A_down", "B_down")
                ])
                W_r = _get(tensors, f"{p}router.W_r")
            else:
                if rank is not None:
                    lora = LoraFactors.init(K, D, hk, rank, (rng or Rng(0)).substream(f"lora/layer{l}"), dtype)
                else:
                    lora = LoraFactors(*[[np.zeros(s, dtype) for _ in range(K)]
                                         for s in ((D, 1), (1, hk), (hk, 1), (1, D))])
                W_r = np.zeros((D, K), dtype)
            router = Router(W_r, float(tau if tau is not None else meta.get("tau", 5.0)),
                            float(meta.get("alpha", 1.0)))
            blocks.append(MoleLayer(experts, lora, router, _get(tensors, p + "ffn.b_down"),
                                    _get(tensors, p + "ln.gamma"), _get(tensors, p + "ln.beta"), part))
    else:
        raise ArchiveCorruptionError(f"archive has unknown phase {phase!r}")
    return ToyNet(
        _get(tensors, "embed.W"), _get(tensors, "embed.b"), blocks,
        _get(tensors, "final_ln.gamma"), _get(tensors, "final_ln.beta"),
        _get(tensors, "head.W"), _get(tensors, "head.b"),
    )
