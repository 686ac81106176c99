"""Dense FFN -> balanced expert partition -> expert set, and back again.

Hidden channel ``j`` of an FFN is the triple (column j of W_up, b_up[j], row j
of W_down). Grouping channels into K equal clusters and gathering them gives K
experts whose outputs sum to the dense FFN output, so the decomposition is
exact for any partition; clustering only decides *which* channels share an
expert.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .linalg import Rng, check_finite, gelu


@dataclass
class DenseFFN:
    W_up: np.ndarray  # D x H
    b_up: np.ndarray  # H
    W_down: np.ndarray  # H x D
    b_down: np.ndarray  # D

    def __post_init__(self):
        D, H = self.W_up.shape
        if self.b_up.shape != (H,) or self.W_down.shape != (H, D) or self.b_down.shape != (D,):
            raise DimensionError(
                f"inconsistent FFN shapes: W_up {self.W_up.shape}, b_up {self.b_up.shape}, "
                f"W_down {self.W_down.shape}, b_down {self.b_down.shape}"
            )

    @property
    def D(self) -> int:
        return self.W_up.shape[0]

    @property
    def H(self) -> int:
        return self.W_up.shape[1]

    def copy(self) -> "DenseFFN":
        return DenseFFN(self.W_up.copy(), self.b_up.copy(), self.W_down.copy(), self.b_down.copy())

    def astype(self, dtype) -> "DenseFFN":
        return DenseFFN(*(a.astype(dtype) for a in (self.W_up, self.b_up, self.W_down, self.b_down)))


def ffn_forward(xn: np.ndarray, ffn: DenseFFN) -> np.ndarray:
    """GELU(xn W_up + b_up) W_down + b_down on already-normalized input."""
    return gelu(xn @ ffn.W_up + ffn.b_up) @ ffn.W_down + ffn.b_down


@dataclass
class ExpertPartition:
    K: int
    assignment: np.ndarray  # H ints, column -> cluster
    permutation: np.ndarray  # H ints, cluster-major ordering of columns

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        self.permutation = np.asarray(self.permutation, dtype=np.int64)
        H = self.assignment.size
        if self.K < 1 or H % self.K:
            raise ConfigError(f"K={self.K} must divide H={H}")
        if self.permutation.shape != (H,) or not np.array_equal(np.sort(self.permutation), np.arange(H)):
            raise DimensionError("permutation is not a bijection on 0..H-1")
        counts = np.bincount(self.assignment, minlength=self.K)
        if counts.size != self.K or np.any(counts != H // self.K):
            raise ConfigError(f"unbalanced partition: cluster sizes {counts.tolist()}")
        if not np.array_equal(self.assignment[self.permutation], np.repeat(np.arange(self.K), H // self.K)):
            raise DimensionError("permutation does not group columns cluster by cluster")

    @property
    def H(self) -> int:
        return self.assignment.size

    @property
    def cluster_size(self) -> int:
        return self.H // self.K

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(self.H)
        return inv

    def members(self, i: int) -> np.ndarray:
        s = self.cluster_size
        return self.permutation[i * s : (i + 1) * s]

    @classmethod
    def from_assignment(cls, assignment, K: int) -> "ExpertPartition":
        assignment = np.asarray(assignment, dtype=np.int64)
        # stable sort keeps original column order inside each cluster
        return cls(K, assignment, np.argsort(assignment, kind="stable"))


@dataclass
class Expert:
    E_up: np.ndarray  # D x H/K
    E_b: np.ndarray  # H/K
    E_down: np.ndarray  # H/K x D


def _check_k(H: int, K: int):
    if K < 1 or H % K:
        raise ConfigError(f"K={K} must be a positive divisor of H={H}")


def stack_ffn(ffn: DenseFFN) -> np.ndarray:
    """(2D+1) x H matrix [W_up; b_up; W_down^T], one column per hidden channel."""
    return np.concatenate([ffn.W_up, ffn.b_up[None, :], ffn.W_down.T], axis=0)


def unstack_ffn(stacked: np.ndarray, b_down: np.ndarray) -> DenseFFN:
    rows = stacked.shape[0]
    if rows % 2 != 1:
        raise DimensionError(f"stacked matrix must have 2D+1 rows, got {rows}")
    D = (rows - 1) // 2
    return DenseFFN(
        stacked[:D].copy(), stacked[D].copy(), stacked[D + 1 :].T.copy(), np.asarray(b_down).copy()
    )


def kmeans_objective(points: np.ndarray, assignment: np.ndarray, K: int) -> float:
    """Within-cluster sum of squared Euclidean distances to the cluster means."""
    total = 0.0
    for c in range(K):
        pts = points[assignment == c]
        if len(pts):
            total += float(((pts - pts.mean(axis=0)) ** 2).sum())
    return total


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (points * points).sum(1)[:, None] - 2.0 * points @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(points: np.ndarray, K: int, rng: Rng) -> np.ndarray:
    n = len(points)
    centers = [points[rng.choice(n)]]
    d2 = _sq_dists(points, np.array(centers))[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.choice(n)
        centers.append(points[idx])
        d2 = np.minimum(d2, _sq_dists(points, points[idx : idx + 1])[:, 0])
    return np.array(centers)


def _regret_assign(dist: np.ndarray, cap: int) -> np.ndarray:
    """Capacity-constrained assignment, points with the largest best/second-best gap first.

    Regrets are recomputed over the clusters still open whenever one fills up.
    """
    n, K = dist.shape
    assign = np.full(n, -1, dtype=np.int64)
    counts = np.zeros(K, dtype=np.int64)
    open_ = np.ones(K, dtype=bool)
    pending = np.arange(n)
    while pending.size:
        d = dist[np.ix_(pending, np.flatnonzero(open_))]
        cols = np.flatnonzero(open_)
        if d.shape[1] == 1:
            assign[pending] = cols[0]
            counts[cols[0]] += pending.size
            break
        part = np.partition(d, 1, axis=1)
        regret = part[:, 1] - part[:, 0]
        # ties broken by column index for determinism
        order = np.lexsort((pending, -regret))
        for p in order:
            c = cols[int(np.argmin(d[p]))]
            assign[pending[p]] = c
            counts[c] += 1
            if counts[c] == cap:
                open_[c] = False
                break
        pending = np.flatnonzero(assign < 0)
    return assign


def _swap_improve(dist: np.ndarray, assign: np.ndarray, max_swaps: int) -> np.ndarray:
    """Pairwise exchanges between clusters while any swap lowers the assignment cost."""
    assign = assign.copy()
    idx = np.arange(len(assign))
    for _ in range(max_swaps):
        own = dist[idx, assign]
        cross = dist[:, assign]  # cross[p, q] = d(p, cluster of q)
        gain = own[:, None] + own[None, :] - cross - cross.T
        p, q = np.unravel_index(int(np.argmax(gain)), gain.shape)
        if gain[p, q] <= 1e-12 * max(1.0, float(own.sum())):
            break
        assign[p], assign[q] = assign[q], assign[p]
    return assign


def _centroids(points: np.ndarray, assign: np.ndarray, K: int) -> np.ndarray:
    return np.stack([points[assign == c].mean(axis=0) for c in range(K)])


def partition_balanced_kmeans(
    points: np.ndarray,
    K: int,
    max_iters: int = 50,
    seed: int = 0,
    history: list | None = None,
    n_init: int = 4,
) -> ExpertPartition:
    """Balanced k-means over the rows of ``points`` (one row per hidden channel).

    Each iteration assigns channels to centroids under the exact capacity H/K
    (regret-ordered greedy, then pairwise swap refinement) and recomputes the
    centroids. A new assignment is only accepted if it does not raise the cost
    against the current centroids, which keeps the objective non-increasing.
    The best of ``n_init`` k-means++ restarts is returned. If ``history`` is
    given, the per-iteration objectives of the returned run are appended.
    """
    points = np.asarray(points, dtype=np.float64)
    check_finite(points, "clustering input")
    H = len(points)
    _check_k(H, K)
    if max_iters < 1:
        raise ConfigError("max_iters must be >= 1")
    if K == 1:
        return ExpertPartition.from_assignment(np.zeros(H, dtype=np.int64), 1)
    if K == H:
        return ExpertPartition.from_assignment(np.arange(H), K)

    best, best_obj, best_hist = None, np.inf, []
    for restart in range(max(1, n_init)):
        hist: list = []
        assign = _lloyd_balanced(points, K, max_iters, Rng(seed, f"kmeans/{restart}"), hist)
        if hist[-1] < best_obj:
            best, best_obj, best_hist = assign, hist[-1], hist
    if history is not None:
        history.extend(best_hist)
    return ExpertPartition.from_assignment(best, K)


def _lloyd_balanced(points: np.ndarray, K: int, max_iters: int, rng: Rng, history: list) -> np.ndarray:
    H = len(points)
    cap = H // K
    idx = np.arange(H)
    centers = _kmeanspp(points, K, rng)
    dist = _sq_dists(points, centers)
    assign = _swap_improve(dist, _regret_assign(dist, cap), max_swaps=4 * H)
    centers = _centroids(points, assign, K)
    history.append(kmeans_objective(points, assign, K))
    for _ in range(max_iters - 1):
        dist = _sq_dists(points, centers)
        cand = _swap_improve(dist, _regret_assign(dist, cap), max_swaps=4 * H)
        if dist[idx, cand].sum() > dist[idx, assign].sum():
            cand = _swap_improve(dist, assign, max_swaps=4 * H)
        changed = not np.array_equal(cand, assign)
        assign = cand
        centers = _centroids(points, assign, K)
        history.append(kmeans_objective(points, assign, K))
        if not changed:
            break
    polished = _exact_swaps(points, assign, K, max_swaps=4 * H)
    if not np.array_equal(polished, assign):
        assign = polished
        history.append(kmeans_objective(points, assign, K))
    return assign


def _exact_swaps(points: np.ndarray, assign: np.ndarray, K: int, max_swaps: int) -> np.ndarray:
    """Best-improvement pairwise swaps on the true objective (centroids move with the swap).

    With cluster size n, swapping a (cluster p) and b (cluster q) changes the
    objective by -2 (m_p - m_q).(x_b - x_a) - 2 ||x_b - x_a||^2 / n.
    """
    assign = assign.copy()
    H = len(points)
    n = H // K
    gram = points @ points.T
    diag = np.diag(gram)
    pair_sq = diag[:, None] + diag[None, :] - 2 * gram  # ||x_a - x_b||^2
    scale = max(float(diag.sum()), 1e-300)
    for _ in range(max_swaps):
        proj = points @ _centroids(points, assign, K).T  # proj[i, c] = x_i . m_c
        pa = proj[:, assign]  # pa[i, j] = x_i . m_{c(j)}
        # (m_{c(a)} - m_{c(b)}) . (x_b - x_a), indexed [a, b]
        cross = pa.T - np.diag(pa)[:, None] - np.diag(pa)[None, :] + pa
        delta = -2 * cross - 2 * pair_sq / n
        delta[assign[:, None] == assign[None, :]] = np.inf
        a, b = np.unravel_index(np.argmin(delta), delta.shape)
        if not delta[a, b] < -1e-12 * scale:
            break
        assign[a], assign[b] = assign[b], assign[a]
    return assign


def partition_contiguous(H: int, K: int) -> ExpertPartition:
    """Cluster i owns columns [i*H/K, (i+1)*H/K); the permutation is the identity."""
    _check_k(H, K)
    return ExpertPartition(K, np.repeat(np.arange(K), H // K), np.arange(H))


def cluster_features(ffn: DenseFFN, mode: str = "stacked") -> np.ndarray:
    """Per-channel feature rows used for clustering: full stacked columns or W_up columns only."""
    if mode == "stacked":
        return stack_ffn(ffn).T
    if mode == "up":
        return ffn.W_up.T
    raise ConfigError(f"unknown clustering mode {mode!r} (expected 'stacked' or 'up')")


def partition_ffn(
    ffn: DenseFFN, K: int, strategy: str = "balanced", seed: int = 0, max_iters: int = 50, mode: str = "stacked"
) -> ExpertPartition:
    if strategy == "balanced":
        return partition_balanced_kmeans(cluster_features(ffn, mode), K, max_iters, seed)
    if strategy == "contiguous":
        return partition_contiguous(ffn.H, K)
    raise ConfigError(f"unknown partition strategy {strategy!r}")


def extract_experts(ffn: DenseFFN, part: ExpertPartition) -> list[Expert]:
    if part.H != ffn.H:
        raise DimensionError(f"partition covers H={part.H} channels, FFN has H={ffn.H}")
    experts = []
    for i in range(part.K):
        cols = part.members(i)
        experts.append(Expert(ffn.W_up[:, cols].copy(), ffn.b_up[cols].copy(), ffn.W_down[cols, :].copy()))
    return experts


def assemble_experts(
    E_up: list[np.ndarray], E_b: list[np.ndarray], E_down: list[np.ndarray], b_down: np.ndarray,
    part: ExpertPartition, restore_order: bool = True,
) -> DenseFFN:
    """Concatenate expert blocks in cluster order; optionally undo the channel permutation."""
    W_up = np.concatenate(E_up, axis=1)
    b_up = np.concatenate(E_b)
    W_down = np.concatenate(E_down, axis=0)
    if restore_order:
        inv = part.inverse
        W_up, b_up, W_down = W_up[:, inv], b_up[inv], W_down[inv, :]
    return DenseFFN(W_up, b_up, W_down, np.array(b_down, copy=True))


def reassemble(experts: list[Expert], b_down: np.ndarray, part: ExpertPartition) -> DenseFFN:
    return assemble_experts(
        [e.E_up for e in experts], [e.E_b for e in experts], [e.E_down for e in experts], b_down, part
    )
