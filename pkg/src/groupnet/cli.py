"""Command-line entry points: ``groupnet {train,eval,bench,inspect,export}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .analysis import format_report, model_report, write_report
from .arch.model import build_model
from .arch.spec import SpecError, load_spec, resolve_spec_path
from .bench import bench_layer
from .checkpoint import MAGIC_PACKED, CheckpointError, read_container
from .data import POLICIES, DataFormatError, load_dataset
from .export import export_packed, load_packed
from .quant import QuantSpec
from .train import (
    FitConfig,
    MissingPretrainError,
    NonFiniteGradientError,
    evaluate,
    fit,
    load_checkpoint,
)

log = logging.getLogger("groupnet")

CONTRACT_ERRORS = (
    SpecError,
    CheckpointError,
    DataFormatError,
    NonFiniteGradientError,
    MissingPretrainError,
    FileNotFoundError,
    KeyError,
    ValueError,
    OSError,
)


def _spec_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--spec", required=required, help="spec YAML path or built-in spec name")
    p.add_argument("--bases", type=int, help="override the base count M")
    p.add_argument("--abits", type=int, help="override the activation bitwidth k (32 = quantizers off)")
    p.add_argument("--beta", type=float, help="override the activation clip bound")
    p.add_argument("--variant", choices=("v1", "v2", "v3", "layerwise", "custom"))
    p.add_argument("--partition", type=lambda s: [int(v) for v in s.split(",")],
                   help="comma-separated group sizes for --variant custom")


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset directory (default: $GROUPNET_DATA/<dataset>)")
    p.add_argument("--dataset", choices=("mnist", "cifar10"), help="default: the model spec's dataset field")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groupnet", description="Binary-weight group-expanded networks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoints plus metrics.csv")
    _spec_args(p, required=False)
    _data_args(p)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--resume", help="checkpoint to resume from (spec and optimizer state come from it)")
    p.add_argument("--init", help="checkpoint to initialize weights from (required for 1-bit activations)")
    p.add_argument("--train-limit", type=int, help="use only the first N training images")
    p.add_argument("--test-limit", type=int, help="use only the first N test images")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint or packed export on the test split")
    p.add_argument("checkpoint")
    _data_args(p)
    p.add_argument("--engine", choices=("float", "packed"), default="float")
    p.add_argument("--test-limit", type=int)

    p = sub.add_parser("bench", help="time packed kernels against the reference on the model spec's layer shapes")
    _spec_args(p)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--batch", type=int, default=1)

    p = sub.add_parser("inspect", help="print the complexity report and partition-space size")
    _spec_args(p)
    p.add_argument("--json", dest="json_out", help="also write the machine-readable report here")

    p = sub.add_parser("export", help="convert a checkpoint to a packed inference-only model")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    return parser


def _load_spec(args):
    overrides = dict(bases=args.bases, k=args.abits, beta=args.beta, variant=args.variant, partition=args.partition)
    return load_spec(resolve_spec_path(args.spec), **overrides)


def _datasets(args, spec_source: dict):
    name = args.dataset or spec_source.get("dataset")
    if not name:
        raise ValueError("no dataset given (--dataset) and the model spec names none")
    train, test = load_dataset(name, args.data)
    return name, train, test


def _limit(data, n):
    return data.subset(n) if n else data


def cmd_train(args) -> int:
    if args.resume:
        model, _, _ = load_checkpoint(args.resume)
        spec = model.spec
    else:
        if not args.spec:
            raise ValueError("--spec is required unless --resume is given")
        spec = _load_spec(args)
        if spec.quant.binary and not args.init:
            raise MissingPretrainError("1-bit activations need --init with a full-precision pretrain checkpoint")
        model = build_model(spec, seed=args.seed)
    name, train, test = _datasets(args, spec.to_dict())
    train, test = _limit(train, args.train_limit), _limit(test, args.test_limit)
    cfg = FitConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, patience=args.patience,
                    seed=args.seed, augment=POLICIES[name], out_dir=args.out, init_checkpoint=args.init,
                    resume=args.resume)
    state, best = fit(model, train, test, cfg)
    summary = {
        "spec_digest": spec.digest(),
        "epochs": state.epoch,
        "final_test_top1": state.acc_history[-1] if state.acc_history else None,
        "best_test_top1": max(state.acc_history) if state.acc_history else None,
        "final_train_loss": state.loss_history[-1] if state.loss_history else None,
        "best_checkpoint": str(best) if best else None,
    }
    Path(args.out, "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def _load_any(path):
    box = read_container(path)
    if box.magic == MAGIC_PACKED:
        return load_packed(path)
    return load_checkpoint(path)[0]


def cmd_eval(args) -> int:
    model = _load_any(args.checkpoint)
    _, _, test = _datasets(args, model.spec.to_dict())
    test = _limit(test, args.test_limit)
    acc = evaluate(model, test, engine=args.engine)
    print(f"test_top1 {acc:.4f} ({len(test)} images)")
    return 0


def cmd_bench(args) -> int:
    spec = _load_spec(args)
    q = spec.quant
    if q.full_precision:
        q = QuantSpec(1, q.beta)
    m = spec.bases
    seen = set()
    print(f"{'layer shape':<40} {'k':>2} {'ref ms':>10} {'packed ms':>10} {'measured':>9} {'predicted':>9}")
    for block in spec.blocks:
        for ls in block.layers:
            if ls.kind != "conv" or ls.geom in seen:
                continue
            seen.add(ls.geom)
            r = bench_layer(ls.geom, q, bases=1, batch=args.batch, repeats=args.repeats)
            g = ls.geom
            shape = f"{g.in_channels}x{g.in_h}x{g.in_w} -> {g.out_channels}x{g.out_h}x{g.out_w} k{g.kernel_h}"
            pred = "n/a" if r.predicted_sigma is None else f"{r.predicted_sigma:.2f}x"
            print(f"{shape:<40} {q.k:>2} {r.reference_seconds * 1e3:>10.2f} {r.packed_seconds * 1e3:>10.2f} "
                  f"{r.measured_speedup:>8.1f}x {pred:>9}")
    print(f"predicted sigma is per base (M=1); a group of M={m} bases costs M times the packed time")
    return 0


def cmd_inspect(args) -> int:
    spec = _load_spec(args)
    report = model_report(spec)
    print(format_report(report))
    if args.json_out:
        write_report(args.json_out, report)
    return 0


def cmd_export(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    export_packed(model, args.out)
    n = len(model.binary_names) if not model.spec.quant.full_precision else 0
    print(f"wrote {args.out} ({n} packed binary weights)")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "inspect": cmd_inspect, "export": cmd_export}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except CONTRACT_ERRORS as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"groupnet {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
