"""Quality-retaining optimization.

An EMA knowledge bank keeps one logit row per class. Each sample is pulled
toward its class row by a KL term weighted with the reciprocal of its task's
current cross-entropy, so tasks that have already converged (low loss) lean on
the bank while tasks still learning lean on the labels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .linalg import log_softmax_rows, softmax_rows

KL_EPS = 1e-12


def _check_labels(labels: np.ndarray, n_class: int):
    if labels.size and (labels.min() < 0 or labels.max() >= n_class):
        raise DataError(f"labels must lie in [0, {n_class}), got range [{labels.min()}, {labels.max()}]")


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"{n} logit rows but {labels.shape} labels")
    _check_labels(labels, c)
    if n == 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax_rows(logits)
    loss = -float(logp[np.arange(n), labels].astype(np.float64).mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


@dataclass
class KnowledgeBank:
    """Per-class EMA of logits; rows stay unset until their class is first seen."""

    n_class: int
    momentum: float = 0.9
    Z: np.ndarray = None
    initialized: np.ndarray = None

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError(f"bank momentum must lie in (0, 1), got {self.momentum}")
        if self.Z is None:
            self.Z = np.zeros((self.n_class, self.n_class))
        if self.initialized is None:
            self.initialized = np.zeros(self.n_class, dtype=bool)
        if self.Z.shape != (self.n_class, self.n_class) or self.initialized.shape != (self.n_class,):
            raise DimensionError("knowledge bank arrays do not match n_class")

    def teacher(self, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Detached copies of the bank rows for ``labels`` and their init flags."""
        return self.Z[labels].copy(), self.initialized[labels].copy()


def ema_update(bank: KnowledgeBank, label: int, z: np.ndarray) -> None:
    label = int(label)
    if not 0 <= label < bank.n_class:
        raise DataError(f"label {label} outside [0, {bank.n_class})")
    if bank.initialized[label]:
        bank.Z[label] = bank.momentum * bank.Z[label] + (1.0 - bank.momentum) * z
    else:
        bank.Z[label] = z
        bank.initialized[label] = True


def ema_update_batch(bank: KnowledgeBank, labels: np.ndarray, logits: np.ndarray) -> None:
    """Sequential updates in batch order (the EMA is order-sensitive)."""
    for label, z in zip(labels, logits):
        ema_update(bank, label, z)


@dataclass
class TaskLossTracker:
    """Source of the per-task weights 1 / max(L_CE,t, floor).

    In ``"batch"`` mode the weight uses the current batch's task CE; in
    ``"ema"`` mode a running average with the given momentum.
    """

    n_tasks: int
    floor: float = 0.05
    mode: str = "batch"
    momentum: float = 0.9
    current: dict = field(default_factory=dict)
    running: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("batch", "ema"):
            raise ConfigError(f"tracker mode must be 'batch' or 'ema', got {self.mode!r}")
        if not self.floor > 0:
            raise ConfigError("weight clamp floor must be > 0")

    def observe(self, task_ce: dict[int, float]) -> None:
        self.current = dict(task_ce)
        for t, v in task_ce.items():
            prev = self.running.get(t)
            self.running[t] = v if prev is None else self.momentum * prev + (1.0 - self.momentum) * v

    def loss(self, t: int) -> float | None:
        src = self.current if self.mode == "batch" else self.running
        return src.get(t)

    def weight(self, t: int) -> float:
        v = self.loss(t)
        if v is None:
            return 0.0
        return 1.0 / max(v, self.floor)


def per_task_ce(logits, labels, task_ids, n_tasks: int) -> tuple[dict[int, float], np.ndarray]:
    """Mean CE of each task present in the batch and the gradient of their sum."""
    grad = np.zeros_like(logits)
    losses = {}
    for t in range(n_tasks):
        mask = task_ids == t
        if not mask.any():
            continue
        loss, g = cross_entropy(logits[mask], labels[mask])
        losses[t] = loss
        grad[mask] = g
    return losses, grad


def qr_loss(
    logits: np.ndarray, labels: np.ndarray, task_ids: np.ndarray, bank: KnowledgeBank, tracker: TaskLossTracker
) -> tuple[float, np.ndarray]:
    """sum_t w_t * sum_{s in task t} KL(softmax(z_s) || softmax(Z[label_s])).

    Bank rows and task weights are constants; the gradient flows through the
    student logits only. Samples whose class row is still unset contribute 0.
    """
    labels = np.asarray(labels, dtype=np.int64)
    task_ids = np.asarray(task_ids, dtype=np.int64)
    n, c = logits.shape
    if c != bank.n_class or labels.shape != (n,) or task_ids.shape != (n,):
        raise DimensionError("qr_loss: logits, labels, task ids and bank disagree in shape")
    _check_labels(labels, c)
    z = logits.astype(np.float64)
    teacher, seen = bank.teacher(labels)
    w = np.array([tracker.weight(int(t)) for t in task_ids]) * seen
    p = softmax_rows(z)
    q = softmax_rows(teacher)
    # per-row KL with the same eps smoothing as linalg.kl_divergence
    logratio = np.log(p + KL_EPS) - np.log(q + KL_EPS)
    kl = (p * logratio).sum(axis=1)
    loss = float((w * kl).sum())
    dkl_dp = logratio + p / (p + KL_EPS)
    dz = p * (dkl_dp - (p * dkl_dp).sum(axis=1, keepdims=True))
    return loss, (w[:, None] * dz).astype(logits.dtype)


def total_loss(task_ce, qr_value: float) -> float:
    """Plain sum of the per-task CE losses and the QR term."""
    vals = list(task_ce.values()) if isinstance(task_ce, dict) else list(task_ce)
    return float(sum(vals) + qr_value)


@dataclass
class Objective:
    total: float
    task_ce: dict
    qr: float
    grad: np.ndarray


def objective(
    logits, labels, task_ids, n_tasks: int, bank: KnowledgeBank | None, tracker: TaskLossTracker | None,
    use_qr: bool = True, update_tracker: bool = True,
) -> Objective:
    """Composite training loss L = sum_t CE_t + L_QR and its gradient w.r.t. the logits.

    With ``update_tracker=False`` the tracker's current weights are used as-is,
    which is what a finite-difference check needs.
    """
    labels = np.asarray(labels, dtype=np.int64)
    task_ids = np.asarray(task_ids, dtype=np.int64)
    task_ce, grad = per_task_ce(logits, labels, task_ids, n_tasks)
    qr_value = 0.0
    if use_qr and bank is not None:
        if update_tracker:
            tracker.observe(task_ce)
        qr_value, g_qr = qr_loss(logits, labels, task_ids, bank, tracker)
        grad = grad + g_qr
    return Objective(total_loss(task_ce, qr_value), task_ce, qr_value, grad)
