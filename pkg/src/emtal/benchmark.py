"""Desk-scale comparison on the synthetic multi-task benchmark.

One dense net is pretrained on the merged tasks per seed; union full
fine-tuning, EMTAL-4 and QR-only are then fine-tuned from copies of it.
"""
from __future__ import annotations

import argparse
from dataclasses import dataclass

import numpy as np

from . import config
from .model import astype
from .taskdata import SyntheticSpec, generate_synthetic
from .train import emtal_finetune, pretrain, union_finetune

METHODS = ("union", "EMTAL-4", "QR-only")


@dataclass
class SeedResult:
    seed: int
    pretrained: float
    test_acc: dict[str, float]  # final-epoch mean test accuracy over tasks


def run_seed(seed: int, raw: dict | None = None) -> SeedResult:
    raw = dict(raw or {})
    base = config.resolve({**raw, "seed": seed})
    d = base["data"]
    spec = SyntheticSpec(d["tasks"], d_in=d["d_in"], mean_scale=d["mean_scale"], seed=seed)
    train_set, test_set = generate_synthetic(spec)
    space = spec.label_space
    pre = pretrain(base, train_set, space, test_set)
    acc = {}
    res = union_finetune(astype(pre.net, pre.net.dtype), base, train_set, space, test_set)
    acc["union"] = res.history.rows[-1]["test_mean_acc"]
    for preset in ("EMTAL-4", "QR-only"):
        cfg = config.resolve({**raw, "seed": seed}, preset=preset)
        res = emtal_finetune(astype(pre.net, pre.net.dtype), cfg, train_set, space, test_set)
        acc[preset] = res.history.rows[-1]["test_mean_acc"]
    return SeedResult(seed, pre.history.rows[-1]["test_mean_acc"], acc)


def run(seeds=(0, 1, 2), raw: dict | None = None) -> tuple[list[SeedResult], dict[str, float]]:
    results = [run_seed(s, raw) for s in seeds]
    means = {m: float(np.mean([r.test_acc[m] for r in results])) for m in METHODS}
    return results, means


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description="EMTAL vs union fine-tuning on synthetic tasks")
    p.add_argument("--seeds", default="0,1,2")
    args = p.parse_args(argv)
    results, means = run([int(s) for s in args.seeds.split(",")])
    for r in results:
        print(f"seed {r.seed}: pretrained {r.pretrained:.4f} " + " ".join(f"{m} {r.test_acc[m]:.4f}" for m in METHODS))
    print("mean: " + " ".join(f"{m} {means[m]:.4f}" for m in METHODS))


if __name__ == "__main__":
    main()
