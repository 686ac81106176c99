"""``emtal`` command line: pretrain, moefy, train, reparam, verify, analyze.

Exit codes: 0 ok, 1 I/O or corrupt archive, 2 configuration/usage,
3 numeric failure, 4 failed verification.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfgmod
from . import verify as verifymod
from .analysis import compare_partitions
from .archive import read_archive, write_archive
from .errors import ConfigError, EmtalError, NumericError
from .linalg import Rng
from .model import ToyNet, forward, net_from_tensors, net_to_tensors, to_dense, to_mole
from .taskdata import (SyntheticSpec, TaskDataset, UnifiedLabelSpace, build_label_space, generate_synthetic,
                       load_csv, samples_to_dataset)
from .train import TrainSettings, moefy, pretrain, train

PROBE_N = 256


def _atomic_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


def _resolve(args) -> dict:
    raw = cfgmod.load(args.config) if getattr(args, "config", None) else {}
    return cfgmod.resolve(raw, seed=args.seed, K=getattr(args, "k", None), rank=getattr(args, "rank", None),
                          strategy=getattr(args, "strategy", None), preset=getattr(args, "preset", None))


def _echo_config(cfg: dict, out: Path) -> None:
    _atomic_text(_sidecar(out, ".config.json"), cfgmod.dumps(cfg))


def _dtype(cfg: dict):
    return np.float32 if cfg["precision"] == "f32" else np.float64


def load_data(cfg: dict) -> tuple[TaskDataset, TaskDataset, UnifiedLabelSpace]:
    """Synthetic tasks from the config, or per-task CSV files when ``data.csv`` is set."""
    d = cfg["data"]
    dtype = _dtype(cfg)
    if d["csv"]:
        space = build_label_space([t["classes"] for t in d["tasks"]])
        splits = []
        for split in ("train", "test"):
            paths = d["csv"].get(split) or []
            if len(paths) not in (0, space.n_tasks):
                raise ConfigError(f"config field 'data.csv.{split}': need one file per task ({space.n_tasks})")
            samples = [s for t, p in enumerate(paths) for s in load_csv(p, t, space, dtype)]
            splits.append(samples_to_dataset(samples, d["d_in"], dtype))
        if splits[0].features.shape[1] != cfg["model"]["d_in"]:
            raise ConfigError(f"config field 'model.d_in': data has {splits[0].features.shape[1]} features")
        return splits[0], splits[1], space
    spec = SyntheticSpec(d["tasks"], d_in=d["d_in"], mean_scale=d["mean_scale"], seed=cfg["seed"])
    if spec.d_in != cfg["model"]["d_in"]:
        raise ConfigError("config field 'data.d_in': must equal model.d_in")
    train_set, test_set = generate_synthetic(spec, dtype)
    return train_set, test_set, spec.label_space


def _load_net(path, **kw) -> tuple[ToyNet, dict]:
    tensors, meta = read_archive(path)
    return net_from_tensors(tensors, meta, **kw), meta


def _check_finite(net: ToyNet, what: str) -> None:
    for name, arr in net.arrays().items():
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"{what}: non-finite values in {name}")


def cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    _echo_config(cfg, out)
    data, test, space = load_data(cfg)
    res = pretrain(cfg, data, space, test)
    _check_finite(res.net, "pretraining diverged")
    write_archive(out, *net_to_tensors(res.net))
    _atomic_text(_sidecar(out, ".metrics.csv"), res.history.to_csv())
    print(f"pretrained: test mean acc {res.history.rows[-1]['test_mean_acc']:.4f} -> {out}")
    return 0


def cmd_moefy(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    _echo_config(cfg, out)
    net, _ = _load_net(args.archive)
    if net.phase != "dense":
        raise ConfigError(f"moefy needs a dense checkpoint, got phase {net.phase!r}")
    parts = moefy(net, cfg)
    mole = to_mole(net, parts, 1, Rng(cfg["seed"]), cfg["tau"])
    write_archive(out, *net_to_tensors(mole, include_lora=False))
    print(f"moefied: {len(parts)} layers x {cfg['K']} experts ({cfg['strategy']}) -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    _echo_config(cfg, out)
    tensors, meta = read_archive(args.archive)
    if meta.get("phase") != "mole":
        raise ConfigError("train needs a moefied archive (run `emtal moefy` first)")
    if int(meta.get("K", -1)) != cfg["K"]:
        raise ConfigError(f"config field 'K': archive has K={meta.get('K')}, config says {cfg['K']}")
    tensors = {k: v for k, v in tensors.items() if ".lora" not in k and ".router." not in k}
    meta = {k: v for k, v in meta.items() if k not in ("rank", "alpha")}
    net = net_from_tensors(tensors, meta, rank=cfg["rank"], rng=Rng(cfg["seed"]), tau=cfg["tau"])
    data, test, space = load_data(cfg)
    if space.n_class != net.n_class:
        raise ConfigError(f"config field 'data.tasks': {space.n_class} classes, archive head has {net.n_class}")
    res = train(net, data, space, TrainSettings.finetune(cfg), test)
    _check_finite(res.net, "training diverged")
    write_archive(out, *net_to_tensors(res.net))
    _atomic_text(_sidecar(out, ".metrics.csv"), res.history.to_csv())
    print(f"trained: alpha {res.final_alpha:g}, test mean acc {res.history.rows[-1]['test_mean_acc']:.4f} -> {out}")
    return 0


def cmd_reparam(args) -> int:
    out = Path(args.out)
    seed = args.seed if args.seed is not None else 0
    _echo_config({"seed": seed, "input": str(args.archive), "probe_n": PROBE_N}, out)
    tensors, meta = read_archive(args.archive)
    net = net_from_tensors(tensors, meta)
    if net.phase != "mole":
        raise ConfigError("reparam needs a MoLE archive")
    alpha = float(meta.get("alpha", 0.0))
    if alpha != 0.0:
        raise ConfigError(f"router fading incomplete: alpha={alpha}; reparameterization is exact only at alpha=0")
    dense = to_dense(net)
    base = to_dense(net_from_tensors({k: v for k, v in tensors.items() if ".lora" not in k and ".router." not in k},
                                     {k: v for k, v in meta.items() if k not in ("rank", "alpha")}))
    bit_identical = all(v.tobytes() == base.arrays()[k].tobytes() for k, v in dense.arrays().items())
    probe = Rng(seed, "probe").normal((PROBE_N, net.embed_W.shape[0]), dtype=net.dtype)
    dlogit = float(np.max(np.abs(forward(net, probe).astype(np.float64) - forward(dense, probe))))
    if not np.isfinite(dlogit):
        raise NumericError("non-finite logits on probe batch")
    write_archive(out, *net_to_tensors(dense))
    report = {"max_abs_dlogit": dlogit, "bit_identical": bit_identical, "probe_n": PROBE_N, "seed": seed}
    _atomic_text(_sidecar(out, ".report.json"), json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"reparameterized: max |dlogit| {dlogit:.3e}, bit-identical {bit_identical} -> {out}")
    return 0


def cmd_verify(args) -> int:
    results = verifymod.run(args.scope, seed=args.seed or 0, inject_fault=args.inject_fault)
    print(verifymod.format_table(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 4 if failed else 0


def cmd_analyze(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    _echo_config(cfg, out)
    tensors, meta = read_archive(args.archive)
    if meta.get("phase") == "mole":
        tensors = {k: v for k, v in tensors.items() if ".lora" not in k and ".router." not in k}
        meta = {k: v for k, v in meta.items() if k not in ("rank", "alpha")}
    net = net_from_tensors(tensors, meta)
    if net.phase == "mole":
        net = to_dense(net)
    ks = [int(v) for v in args.ks.split(",")] if args.ks else [cfg["rank"]]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "expert", "strategy", "k", "ratio", "singular_values"])
    for l, blk in enumerate(net.blocks):
        for rep in compare_partitions(blk.ffn, cfg["K"], ks, seed=cfg["seed"] + 7919 * l, layer=l,
                                      target=args.target, mode=cfg["cluster_mode"], max_iters=cfg["kmeans_iters"]):
            for e in rep.experts:
                sv = ";".join(repr(float(s)) for s in e.singular_values)
                for k in ks:
                    w.writerow([l, e.expert, rep.strategy, k, repr(e.ratios[k]), sv])
            print(f"layer {l} {rep.strategy:>10}: " + ", ".join(f"k={k} {rep.mean_ratio(k):.4f}" for k in ks))
    _atomic_text(out, buf.getvalue())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emtal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True, archive=True):
        if archive:
            sp.add_argument("archive", help="input archive")
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--preset", choices=sorted(cfgmod.PRESETS))
        if out:
            sp.add_argument("--out", required=True)
        return sp

    common(sub.add_parser("pretrain", help="train the dense toy network"), archive=False).set_defaults(fn=cmd_pretrain)
    sp = common(sub.add_parser("moefy", help="split dense FFNs into experts"))
    sp.add_argument("--k", type=int)
    sp.add_argument("--strategy", choices=["balanced", "contiguous"])
    sp.set_defaults(fn=cmd_moefy)
    sp = common(sub.add_parser("train", help="MoLE fine-tuning with QR and router fading"))
    sp.add_argument("--k", type=int)
    sp.add_argument("--rank", type=int)
    sp.set_defaults(fn=cmd_train)
    sp = sub.add_parser("reparam", help="fold LoRA into dense FFNs (requires alpha = 0)")
    sp.add_argument("archive")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_reparam)
    sp = sub.add_parser("verify", help="run built-in invariant checks")
    sp.add_argument("--scope", choices=verifymod.SCOPES, default="all")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(fn=cmd_verify)
    sp = common(sub.add_parser("analyze", help="expert spectra: balanced vs contiguous"))
    sp.add_argument("--k", type=int, help="number of experts")
    sp.add_argument("--ks", help="comma-separated Ky Fan orders (default: rank)")
    sp.add_argument("--target", choices=["up", "stacked"], default="up")
    sp.set_defaults(fn=cmd_analyze)
    return p


def _threads() -> int | None:
    raw = os.environ.get("EMTAL_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"EMTAL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"EMTAL_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=_threads()):
            return args.fn(args)
    except EmtalError as exc:
        print(f"emtal {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"emtal {args.command}: numeric error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"emtal {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
