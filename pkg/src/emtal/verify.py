"""Self-check suites behind ``emtal verify``.

Each check returns a :class:`CheckResult`; ``inject_fault`` perturbs the
analytic side of every check so the suite can be shown to fail.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import Rng
from .model import ToyNet, backward, forward, init_dense, partition_net, to_dense, to_mole
from .moefy import partition_balanced_kmeans, partition_contiguous
from .mole import Router, router_weights
from .qr import KnowledgeBank, TaskLossTracker, ema_update, objective, qr_loss
from .taskdata import build_label_space

SCOPES = ("all", "gradcheck", "equivalence", "ema", "algebra")


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * step)
    return g


def small_mole_net(seed: int = 0, D: int = 8, H: int = 16, K: int = 4, rank: int = 1, blocks: int = 2,
                   d_in: int = 5, n_class: int = 5, alpha: float = 0.7, dtype=np.float64,
                   randomize: bool = True) -> ToyNet:
    """A MoLE net with non-trivial LoRA factors and routers, for gradient and equivalence checks."""
    rng = Rng(seed, "verify")
    dense = init_dense(d_in, D, H, blocks, n_class, rng, dtype)
    for b in dense.blocks:
        b.ffn.b_up[:] = rng.normal(H, 0.1, dtype)
        b.ffn.b_down[:] = rng.normal(D, 0.1, dtype)
        b.ln_gamma[:] = 1.0 + rng.normal(D, 0.1, dtype)
        b.ln_beta[:] = rng.normal(D, 0.1, dtype)
    net = to_mole(dense, partition_net(dense, K, "balanced", seed=seed), rank, rng, tau=5.0)
    if randomize:
        for arr in net.trainable().values():
            arr[...] = rng.normal(arr.shape, 0.3, dtype)
    net.set_alpha(alpha)
    return net


def check_gradients(seed: int = 0, inject_fault: bool = False) -> list[CheckResult]:
    """Full-net gradcheck of L = sum_t CE_t + L_QR with the bank and task weights held fixed."""
    space = build_label_space([3, 2])
    net = small_mole_net(seed, n_class=space.n_class)
    rng = Rng(seed, "verify/data")
    x = rng.normal((6, net.embed_W.shape[0]))
    labels = np.array([0, 1, 2, 3, 4, 2])
    tasks = space.task_of(labels)
    bank = KnowledgeBank(space.n_class, 0.9)
    for c in range(space.n_class - 1):  # leave one class unseen
        ema_update(bank, c, rng.normal(space.n_class))
    tracker = TaskLossTracker(space.n_tasks)
    logits, cache = forward(net, x, return_cache=True)
    obj = objective(logits, labels, tasks, space.n_tasks, bank, tracker)
    grads = backward(net, cache, obj.grad)

    def loss():
        z = forward(net, x)
        return objective(z, labels, tasks, space.n_tasks, bank, tracker, update_tracker=False).total

    out = []
    for name, arr in net.trainable().items():
        g = grads[name] * (1.01 if inject_fault else 1.0)
        err = rel_err(g, numeric_grad(loss, arr))
        out.append(CheckResult(f"gradcheck {name}", err < 1e-4, err, 1e-4))
    return out


def check_equivalence(seed: int = 0, inject_fault: bool = False) -> list[CheckResult]:
    out = []
    x = Rng(seed, "verify/probe").normal((100, 5))
    for dtype, tol in ((np.float64, 1e-12), (np.float32, 1e-5)):
        fresh = small_mole_net(seed, dtype=dtype, randomize=False)
        dense = to_dense(fresh)
        a, b = forward(fresh, x), forward(dense, x)
        if inject_fault:
            a = a + 1e-3
        err = float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30))
        out.append(CheckResult(f"init identity ({np.dtype(dtype).name}, relative)", err < tol, err, tol))
    for dtype, tol in ((np.float64, 1e-12), (np.float32, 1e-5)):
        net = small_mole_net(seed, dtype=dtype, alpha=0.0)
        dense = to_dense(net)
        a, b = forward(net, x), forward(dense, x)
        if inject_fault:
            a = a + 1e-3
        err = float(np.max(np.abs(a - b)))
        out.append(CheckResult(f"reparam round trip ({np.dtype(dtype).name}, abs)", err < tol, err, tol))
    src = init_dense(5, 8, 16, 2, 5, Rng(seed, "verify/src"), np.float64)
    back = to_dense(to_mole(src, partition_net(src, 4, "balanced", seed=seed), 1, Rng(seed)))
    same = all(
        np.array_equal(v, back.arrays()[k]) and v.tobytes() == back.arrays()[k].tobytes()
        for k, v in src.arrays().items()
    ) and not inject_fault
    out.append(CheckResult("zero-LoRA reparam bit-identical", same, 0.0 if same else 1.0, 0.0))
    return out


def check_ema(seed: int = 0, inject_fault: bool = False) -> list[CheckResult]:
    rng = Rng(seed, "verify/ema")
    out = []
    worst = 0.0
    for m in (0.1, 0.5, 0.9, 0.99):
        bank = KnowledgeBank(4, m)
        z0, z = rng.normal(4), rng.normal(4)
        ema_update(bank, 1, z0)
        for n in range(1, 101):
            ema_update(bank, 1, z)
            expect = m**n * z0 + (1 - m**n) * z
            worst = max(worst, float(np.max(np.abs(bank.Z[1] - expect))))
    if inject_fault:
        worst += 1e-6
    out.append(CheckResult("EMA closed form", worst < 1e-12, worst, 1e-12))
    bank = KnowledgeBank(4, 0.9)
    logits = rng.normal((3, 4))
    labels = np.array([0, 1, 3])
    for lbl, z in zip(labels, logits):
        ema_update(bank, lbl, z)
    tracker = TaskLossTracker(1)
    tracker.observe({0: 0.3})
    val, _ = qr_loss(logits, labels, np.zeros(3, int), bank, tracker)
    val += 1.0 if inject_fault else 0.0
    out.append(CheckResult("QR loss zero at teacher", abs(val) < 1e-9, abs(val), 1e-9))
    return out


def check_algebra(seed: int = 0, inject_fault: bool = False) -> list[CheckResult]:
    rng = Rng(seed, "verify/router")
    out = []
    xn = rng.normal((10_000, 8), 3.0)
    worst = 0.0
    ones = True
    for alpha in (0.0, 0.3, 1.0):
        omega, _ = router_weights(xn, Router(rng.normal((8, 4), 2.0), 5.0, alpha))
        worst = max(worst, float(np.max(np.abs(omega.sum(axis=1) - 4))))
        if alpha == 0.0:
            ones = bool(np.all(omega == 1.0))
    if inject_fault:
        worst += 1.0
    out.append(CheckResult("router row sums = K", worst < 1e-5 and ones, worst, 1e-5))
    balanced = True
    for H, K in ((8, 2), (12, 3), (16, 4), (16, 16), (30, 5), (64, 8)):
        pts = rng.normal((H, 3))
        for part in (partition_balanced_kmeans(pts, K, 10, seed), partition_contiguous(H, K)):
            balanced &= bool(np.all(np.bincount(part.assignment, minlength=K) == H // K))
    out.append(CheckResult("balanced clusters", balanced and not inject_fault, 0.0, 0.0))
    return out


SUITES = {
    "gradcheck": check_gradients,
    "equivalence": check_equivalence,
    "ema": check_ema,
    "algebra": check_algebra,
}


def run(scope: str = "all", seed: int = 0, inject_fault: bool = False) -> list[CheckResult]:
    names = list(SUITES) if scope == "all" else [scope]
    results = []
    for name in names:
        results.extend(SUITES[name](seed, inject_fault))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'result':<6}  {'value':>10}  {'tol':>8}"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.value:>10.3e}  {r.tolerance:>8.1e}")
    return "\n".join(lines)
