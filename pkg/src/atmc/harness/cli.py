"""Command line: ``atmc {train,eval,sweep,plot}``."""

from __future__ import annotations

import argparse
import json
import logging
import struct
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..attacks import FAMILIES, AttackConfig
from ..baselines import KINDS, PipelineSpec, _arch, pretrain, rank_fraction_for_ratio, run_pipeline, storage_bits
from ..trainer import TrainConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_dataset
from .metrics import evaluate, metrics_row, read_csv, rows_to_csv

log = logging.getLogger("atmc")

ATMC_KINDS = ("atmc", "atmc_uniform_pq")


class UsageError(Exception):
    pass


def _common(p):
    p.add_argument("--dataset", default="synth8", help="mnist | synth8 | synth28 (mnist reads $ATMC_DATA_DIR or --data-dir)")
    p.add_argument("--data-dir", default=None, help="directory holding the MNIST IDX files")
    p.add_argument("--arch", default=None, help="lenet | convnet-small | mlp-small (default: by dataset)")
    p.add_argument("--pipeline", default="atmc", choices=KINDS)
    p.add_argument("--k", type=int, default=None, help="global nonzero budget (default: dense)")
    p.add_argument("--bits", type=int, default=32, help="bits per nonzero, 1..32")
    p.add_argument("--rho", type=float, default=1e-2, help="ADMM penalty")
    p.add_argument("--attack", default="pgd", choices=FAMILIES)
    p.add_argument("--delta", type=float, default=76.0, help="attack budget on the 0-255 pixel scale")
    p.add_argument("--steps", type=int, default=16, help="attack iterations")
    p.add_argument("--wrm-gamma", type=float, default=1.3)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--mirror-period", type=int, default=1)
    p.add_argument("--warmup-epochs", type=int, default=0, help="clean epochs before adversarial training starts")
    p.add_argument("--ramp-epochs", type=int, default=0, help="epochs over which the attack budget ramps up")
    p.add_argument("--n-test", type=int, default=None, help="evaluate on the first N test images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output path")
    p.add_argument("--timing", action="store_true", help="add a wall_time column to CSV output")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="atmc",
        description="Adversarially trained model compression.",
        epilog="common flags: --dataset --data-dir --arch --pipeline --k --bits --rho --attack --delta "
               "--steps --wrm-gamma --epochs --batch-size --lr --momentum --mirror-period --warmup-epochs "
               "--ramp-epochs --n-test "
               "--seed --out --timing; eval adds --checkpoint, sweep adds --k-list --bits-list, "
               "plot takes --csv",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one pipeline; writes a checkpoint and a metrics row")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint under an attack")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("sweep", help="pipeline x k-list x bits-list, one CSV row each")
    _common(p)
    p.add_argument("--k-list", type=int, nargs="+", required=True)
    p.add_argument("--bits-list", type=int, nargs="+", default=[8, 32])

    p = sub.add_parser("plot", help="TA/ATA against compression ratio from a sweep CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    return parser


def _default_arch(dataset):
    return {"mnist": "lenet", "synth28": "convnet-small", "synth8": "mlp-small"}.get(dataset, "lenet")


def _validate(args):
    if args.command == "plot":
        return
    if args.dataset not in ("mnist", "synth8", "synth28"):
        raise UsageError(f"unknown dataset {args.dataset!r}")
    args.arch = args.arch or _default_arch(args.dataset)
    side = 8 if args.dataset == "synth8" else 28
    if args.arch in ("lenet", "convnet-small") and side != 28:
        raise UsageError(f"--arch {args.arch} needs 28x28 inputs; --dataset {args.dataset} is {side}x{side}")
    if args.attack == "none" and args.delta != 0:
        raise UsageError("--attack none requires --delta 0")
    if args.delta < 0 or args.steps < 1 or args.epochs < 0:
        raise UsageError("--delta must be >= 0, --steps >= 1, --epochs >= 0")
    if args.warmup_epochs < 0 or args.ramp_epochs < 0:
        raise UsageError("--warmup-epochs and --ramp-epochs must be >= 0")
    bits = getattr(args, "bits_list", None) or [args.bits]
    for b in bits:
        if not 1 <= b <= 32:
            raise UsageError(f"bits {b} outside [1, 32]")
        if b < 32 and args.pipeline not in ATMC_KINDS and args.command != "eval":
            raise UsageError(f"--pipeline {args.pipeline} is unquantized; bits {b} needs atmc or atmc_uniform_pq")
    if args.pipeline == "atmc_uniform_pq" and 32 in bits and args.command != "eval":
        raise UsageError("atmc_uniform_pq quantizes after training; give bits < 32")
    ks = getattr(args, "k_list", None) or ([args.k] if args.k is not None else [])
    for k in ks:
        if k < 1:
            raise UsageError(f"k={k} must be >= 1")
    if args.command == "sweep" and args.pipeline == "da":
        raise UsageError("--pipeline da has no budget to sweep")
    if args.command == "eval" and not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint {args.checkpoint} not found")


def _attack(args):
    if args.attack == "none":
        return AttackConfig()
    return AttackConfig.from_255(args.attack, args.delta, args.steps, wrm_gamma=args.wrm_gamma)


def _spec(args, data, k, bits, attack):
    arch = _arch(PipelineSpec("da", arch=args.arch), data)
    total = arch.n_weights()
    if k is not None and k > total:
        raise UsageError(f"--k {k} exceeds the {total} weights of {arch.name}")
    ratio = 1.0 if k is None else k / total
    if args.pipeline == "alr":
        ratio = rank_fraction_for_ratio(arch, ratio)
    train = TrainConfig(batch_size=args.batch_size, lr=args.lr, momentum=args.momentum)
    return PipelineSpec(
        kind=args.pipeline, ratio=ratio, bits=bits, attack=attack, epochs=args.epochs,
        arch=args.arch, seed=args.seed, train=train, rho=args.rho, mirror_period=args.mirror_period,
        warmup_epochs=args.warmup_epochs, ramp_epochs=args.ramp_epochs,
    )


def _k_for(spec, arch):
    return None if spec.ratio >= 1 else spec.budget(arch)


def _row(args, spec, model, data, attack, ckpt_bytes, wall):
    bits = storage_bits(spec)
    ta, ata = evaluate(model, data, attack, limit=args.n_test)
    return metrics_row(spec.kind, model, data, bits, ta, ata, attack, args.seed, ratio=spec.ratio,
                       k=_k_for(spec, model.arch), checkpoint_bytes=ckpt_bytes, wall_time=wall)


def cmd_train(args, data):
    attack = _attack(args)
    spec = _spec(args, data, args.k, args.bits, attack)
    t0 = time.time()
    model = run_pipeline(spec, data)
    out = Path(args.out or "atmc_run")
    out.mkdir(parents=True, exist_ok=True)
    nbytes = save_checkpoint(model, out / "model.atmc", storage_bits(spec))
    row = _row(args, spec, model, data, attack, nbytes, time.time() - t0)
    (out / "metrics.csv").write_text(rows_to_csv([row], args.timing))
    print(f"TA={row.ta:.4f} ATA={row.ata:.4f} size_bits={row.size_bits} ratio={row.compression_ratio:.5f}")


def checkpoint_bits(path):
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack_from(">I", raw, 6)
    header = json.loads(raw[10:10 + hlen])
    bits = [m["b"] for l in header["layers"] for m in l["matrices"].values()]
    return max(bits) if bits else 32


def cmd_eval(args, data):
    model = load_checkpoint(args.checkpoint)
    attack = _attack(args)
    bits = checkpoint_bits(args.checkpoint)
    ta, ata = evaluate(model, data, attack, limit=args.n_test)
    row = metrics_row("eval", model, data, bits, ta, ata, attack, args.seed,
                      checkpoint_bytes=Path(args.checkpoint).stat().st_size)
    text = rows_to_csv([row], args.timing)
    if args.out:
        Path(args.out).write_text(text)
    print(f"TA={ta:.4f} ATA={ata:.4f}")


def cmd_sweep(args, data):
    attack = _attack(args)
    rows = []
    pretrained = None
    if args.pipeline in ("nap", "ap", "al0", "alr"):
        base = _spec(args, data, None, 32, attack)
        pretrained = pretrain(base, data, adversarial=args.pipeline != "nap")
    tmp = Path(args.out or "sweep.csv").with_suffix(".ckpt")
    for k in args.k_list:
        for bits in args.bits_list:
            spec = _spec(args, data, k, bits, attack)
            t0 = time.time()
            model = run_pipeline(spec, data, pretrained)
            nbytes = save_checkpoint(model, tmp, storage_bits(spec))
            rows.append(_row(args, spec, model, data, attack, nbytes, time.time() - t0))
            log.info("k=%d bits=%d TA=%.4f ATA=%.4f", k, bits, rows[-1].ta, rows[-1].ata)
    tmp.unlink(missing_ok=True)
    Path(args.out or "sweep.csv").write_text(rows_to_csv(rows, args.timing))
    print(f"wrote {len(rows)} rows to {args.out or 'sweep.csv'}")


def cmd_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_csv(args.csv)
    if not rows:
        raise UsageError(f"{args.csv} has no rows")
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5), sharex=True)
    groups = {}
    for r in rows:
        groups.setdefault((r["pipeline"], r["bits"]), []).append(r)
    for (pipe, bits), rs in sorted(groups.items()):
        rs.sort(key=lambda r: float(r["compression_ratio"]))
        cr = [float(r["compression_ratio"]) for r in rs]
        for ax, key in zip(axes, ("ta", "ata")):
            ax.plot(cr, [float(r[key]) for r in rs], marker="o", label=f"{pipe}-{bits}b")
    for ax, title in zip(axes, ("benign accuracy", "attacked accuracy")):
        ax.set_xscale("log")
        ax.set_xlabel("compression ratio")
        ax.set_title(title)
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    old_dtype = T.get_default_dtype()
    try:
        _validate(args)
        if args.command == "plot":
            cmd_plot(args)
            return 0
        T.set_default_dtype(np.float32)
        data = load_dataset(args.dataset, seed=args.seed, data_dir=args.data_dir)
        {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}[args.command](args, data)
    except (UsageError, FileNotFoundError, ValueError) as exc:
        print(f"atmc: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    finally:
        T.set_default_dtype(old_dtype)
    return 0


if __name__ == "__main__":
    sys.exit(main())
