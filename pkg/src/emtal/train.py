"""Training loops: dense pretraining / full fine-tuning and EMTAL fine-tuning.

Per step: forward -> composite loss (CE per task + QR) -> backward -> bank
update with this step's logits -> AdamW step. The learning rate follows the
warm-up + cosine schedule at fractional-epoch resolution; the router fading
coefficient is set once per epoch.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .linalg import Rng
from .model import AdamW, ToyNet, astype, backward, cosine_lr, forward, init_dense, partition_net, to_mole
from .mole import fading_alpha
from .qr import KnowledgeBank, TaskLossTracker, ema_update_batch, objective
from .taskdata import TaskDataset, UnifiedLabelSpace, batch_iter


def task_accuracy(logits: np.ndarray, data: TaskDataset, space: UnifiedLabelSpace) -> dict[int, float]:
    """Task-aware top-1: each sample's argmax is taken over its own task's classes."""
    out = {}
    for t in range(space.n_tasks):
        mask = data.task_ids == t
        if not mask.any():
            continue
        lo = space.offsets[t]
        pred = logits[mask, lo : lo + space.class_counts[t]].argmax(axis=1) + lo
        out[t] = float((pred == data.labels[mask]).mean())
    return out


def predict(net: ToyNet, data: TaskDataset, batch_size: int = 512) -> np.ndarray:
    chunks = [forward(net, data.features[i : i + batch_size]) for i in range(0, len(data), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0, net.n_class), net.dtype)


def evaluate(net: ToyNet, data: TaskDataset, space: UnifiedLabelSpace) -> tuple[dict[int, float], float]:
    acc = task_accuracy(predict(net, data), data, space)
    return acc, float(np.mean(list(acc.values())))


def metric_columns(n_tasks: int) -> list[str]:
    """Fixed CSV column order."""
    cols = ["epoch", "lr", "alpha"]
    cols += [f"ce_task{t}" for t in range(n_tasks)]
    cols += [f"acc_task{t}" for t in range(n_tasks)]
    cols += ["qr_loss", "mean_acc"]
    cols += [f"test_acc_task{t}" for t in range(n_tasks)]
    cols += ["test_mean_acc"]
    return cols


@dataclass
class History:
    n_tasks: int
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=metric_columns(self.n_tasks), lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


@dataclass
class TrainSettings:
    epochs: int
    lr: float
    warmup_epochs: int = 0
    batch_size: int = 64
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    use_qr: bool = False
    qr_momentum: float = 0.9
    qr_clamp: float = 0.05
    qr_after_epoch: int = 0
    qr_ce_mode: str = "batch"
    fading: tuple | None = None  # (start_epoch, end_epoch)
    seed: int = 0

    @classmethod
    def finetune(cls, cfg: dict, use_qr: bool | None = None, fading: bool = True) -> "TrainSettings":
        opt, qr = cfg["optimizer"], cfg["qr"]
        return cls(
            epochs=opt["epochs"], lr=opt["lr"], warmup_epochs=opt["warmup_epochs"], batch_size=opt["batch_size"],
            betas=tuple(opt["betas"]), eps=opt["eps"], weight_decay=opt["weight_decay"],
            use_qr=qr["enabled"] if use_qr is None else use_qr, qr_momentum=qr["momentum"],
            qr_clamp=qr["weight_clamp"], qr_after_epoch=qr["enabled_after_epoch"], qr_ce_mode=qr["ce_mode"],
            fading=(cfg["fading"]["start_epoch"], cfg["fading"]["end_epoch"]) if fading else None,
            seed=cfg["seed"],
        )

    @classmethod
    def pretraining(cls, cfg: dict) -> "TrainSettings":
        pre = cfg["pretrain"]
        return cls(epochs=pre["epochs"], lr=pre["lr"], warmup_epochs=pre["warmup_epochs"],
                   batch_size=pre["batch_size"], weight_decay=pre["weight_decay"], seed=cfg["seed"])


@dataclass
class TrainResult:
    net: ToyNet
    history: History
    bank: KnowledgeBank | None
    final_alpha: float


def train(net: ToyNet, data: TaskDataset, space: UnifiedLabelSpace, st: TrainSettings,
          test: TaskDataset | None = None, shuffle_stream: str = "finetune") -> TrainResult:
    """Train ``net`` in place on the merged multi-task set."""
    params = net.trainable()
    opt = AdamW(st.lr, st.betas, st.eps, st.weight_decay)
    bank = KnowledgeBank(space.n_class, st.qr_momentum) if st.use_qr else None
    tracker = TaskLossTracker(space.n_tasks, st.qr_clamp, st.qr_ce_mode, st.qr_momentum) if st.use_qr else None
    hist = History(space.n_tasks)
    shuffle_seed = int(Rng(st.seed, f"shuffle/{shuffle_stream}").integers(0, 2**62))
    steps = max(1, -(-len(data) // st.batch_size))
    alpha = 1.0
    for epoch in range(st.epochs):
        if st.fading is not None and net.phase == "mole":
            alpha = fading_alpha(epoch, *st.fading)
            net.set_alpha(alpha)
        ce_sum = np.zeros(space.n_tasks)
        ce_cnt = np.zeros(space.n_tasks)
        qr_sum = 0.0
        for step, batch in enumerate(batch_iter(data, st.batch_size, shuffle_seed, epoch)):
            lr = cosine_lr(epoch + step / steps, st.lr, st.warmup_epochs, st.epochs)
            logits, cache = forward(net, batch.x, return_cache=True)
            qr_on = st.use_qr and epoch >= st.qr_after_epoch
            obj = objective(logits, batch.labels, batch.task_ids, space.n_tasks, bank, tracker, use_qr=qr_on)
            grads = backward(net, cache, obj.grad)
            if bank is not None:
                ema_update_batch(bank, batch.labels, logits)
            opt.step(params, grads, lr)
            for t, v in obj.task_ce.items():
                ce_sum[t] += v
                ce_cnt[t] += 1
            qr_sum += obj.qr
        row: dict = {"epoch": epoch, "lr": cosine_lr(epoch, st.lr, st.warmup_epochs, st.epochs), "alpha": alpha}
        for t in range(space.n_tasks):
            row[f"ce_task{t}"] = float(ce_sum[t] / max(ce_cnt[t], 1))
        acc, mean_acc = evaluate(net, data, space)
        for t in range(space.n_tasks):
            row[f"acc_task{t}"] = acc.get(t, float("nan"))
        row["qr_loss"] = qr_sum / steps
        row["mean_acc"] = mean_acc
        if test is not None and len(test):
            tacc, tmean = evaluate(net, test, space)
        else:
            tacc, tmean = {}, float("nan")
        for t in range(space.n_tasks):
            row[f"test_acc_task{t}"] = tacc.get(t, float("nan"))
        row["test_mean_acc"] = tmean
        hist.rows.append(row)
    final_alpha = fading_alpha(st.epochs, *st.fading) if (st.fading and net.phase == "mole") else alpha
    net.set_alpha(final_alpha)
    return TrainResult(net, hist, bank, final_alpha)


def pretrain(cfg: dict, data: TaskDataset, space: UnifiedLabelSpace, test: TaskDataset | None = None) -> TrainResult:
    m = cfg["model"]
    dtype = np.float32 if cfg["precision"] == "f32" else np.float64
    net = init_dense(m["d_in"], m["D"], m["H"], m["blocks"], space.n_class, Rng(cfg["seed"]), dtype)
    return train(net, data, space, TrainSettings.pretraining(cfg), test, shuffle_stream="pretrain")


def moefy(net: ToyNet, cfg: dict, K: int | None = None, strategy: str | None = None):
    return partition_net(net, K or cfg["K"], strategy or cfg["strategy"], seed=cfg["seed"],
                         max_iters=cfg["kmeans_iters"], mode=cfg["cluster_mode"])


def emtal_finetune(dense: ToyNet, cfg: dict, data: TaskDataset, space: UnifiedLabelSpace,
                   test: TaskDataset | None = None) -> TrainResult:
    """MoEfy a pretrained dense net, then train LoRA + routers + head with QR and router fading."""
    parts = moefy(dense, cfg)
    net = to_mole(dense, parts, cfg["rank"], Rng(cfg["seed"]), cfg["tau"])
    return train(net, data, space, TrainSettings.finetune(cfg), test)


def union_finetune(dense: ToyNet, cfg: dict, data: TaskDataset, space: UnifiedLabelSpace,
                   test: TaskDataset | None = None) -> TrainResult:
    """Baseline: full fine-tuning of every dense parameter with plain CE."""
    net = astype(dense, dense.dtype)
    return train(net, data, space, TrainSettings.finetune(cfg, use_qr=False, fading=False), test)
