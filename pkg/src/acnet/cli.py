"""Command-line driver: train -> fuse -> verify -> analyze.

Exit status: 0 on success, 1 on bad flags, missing files or failed
preconditions, 2 when ``verify`` finds the models differ.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from acnet import analysis, fusion
from acnet.blocks import TOY_SPEC, Ablation, ModelSpec, build_model
from acnet.data import AugmentConfig, Dataset, cifar10_dir, gen_synthetic
from acnet.serialize import load_model, save_model
from acnet.train import TrainConfig, fit, staircase

log = logging.getLogger("acnet")

EXIT_OK, EXIT_FAIL, EXIT_MISMATCH = 0, 1, 2
ACB_MODES = {"on": "acb", "off": "plain", "shifted": "acb-shifted"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_FAIL)


def load_data(source: str, n_train: int, n_eval: int, data_seed: int) -> tuple[Dataset | None, Dataset]:
    """Resolve a ``--data`` value to (train, eval) datasets."""
    kind, _, arg = source.partition(":")
    if kind == "synthetic":
        if arg:
            return None, Dataset.load(arg)
        return gen_synthetic(n_train, seed=data_seed), gen_synthetic(n_eval, seed=data_seed + 1)
    if kind == "npz":
        return None, Dataset.load(arg)
    if kind == "cifar10":
        return cifar10_dir(arg)
    raise UsageError(f"unknown data source {source!r}; use synthetic, npz:<file> or cifar10:<dir>")


def _load_for_analysis(path):
    model = load_model(path)
    return model if model.is_fused else fusion.fuse_model(model)


def cmd_train(args) -> int:
    text = TOY_SPEC if args.spec is None else open(args.spec).read()
    spec = ModelSpec.parse(text).with_blocks(ACB_MODES[args.acb])
    ablation = Ablation(not args.no_horizontal, not args.no_vertical, not args.no_bn_in_branch)
    dtype = np.float32 if args.precision == "float32" else np.float64
    train, evaluation = load_data(args.data, args.n_train, args.n_eval, args.data_seed)
    if train is None:
        train, evaluation = evaluation, None
    if args.eval_data:
        evaluation = load_data(args.eval_data, 0, args.n_eval, args.data_seed)[1]
    model = build_model(spec, ablation, seed=args.seed, dtype=dtype)
    config = TrainConfig(schedule=staircase(args.epochs), epochs=args.epochs, seed=args.seed,
                         batch_size=args.batch_size,
                         augment=AugmentConfig(pad=args.pad, flip_prob=args.flip_prob))
    rows = fit(model, train, config, evaluation)
    save_model(model, args.out)
    log_path = args.log_csv or f"{args.out}.log.csv"
    analysis.write_csv(log_path, rows, ["epoch", "lr", "train_loss", "eval_acc"])
    print(f"saved {args.out} ({model.count_params()} parameters); log {log_path}")
    if rows:
        print(f"final eval_acc={rows[-1]['eval_acc']:.2f}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    model = load_model(args.inp)
    fused = fusion.fuse_model(model)
    save_model(fused, args.out)
    print(fusion.format_report(fusion.fusion_report(model, fused)))
    print(f"saved {args.out} ({fused.count_params()} parameters, was {model.count_params()})")
    return EXIT_OK


def cmd_verify(args) -> int:
    report = fusion.verify_equivalence(load_model(args.a), load_model(args.b), args.n, args.seed,
                                       args.precision, args.tolerance)
    print(report)
    print(" ".join(f"{k}={v}" for k, v in report.as_dict().items()))
    return EXIT_OK if report.passed else EXIT_MISMATCH


def cmd_magnitude(args) -> int:
    mm = analysis.magnitude_matrix(_load_for_analysis(args.model))
    print(f"average kernel magnitude over {mm.layer_count} layers")
    for row in mm.a:
        print("  " + "  ".join(f"{v:.3f}" for v in row))
    if args.out_csv:
        names = [f"a{r}{c}" for r in range(3) for c in range(3)]
        analysis.write_csv(args.out_csv, [dict(zip(names, mm.as_row()), layer_count=mm.layer_count)],
                           names + ["layer_count"])
    return EXIT_OK


def _parse_grid(text):
    if text is None:
        return None
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_prune_sweep(args) -> int:
    model = _load_for_analysis(args.model)
    sets = [s.strip() for s in args.sets.split(",") if s.strip()]
    for name in sets:
        if name not in analysis.LOCATION_SETS:
            raise UsageError(f"unknown location set {name!r}")
    _, evaluation = load_data(args.data, 0, args.n_eval, args.data_seed)
    rows = analysis.sparsity_sweep(model, sets, _parse_grid(args.grid), list(range(args.seeds)),
                                   evaluation)
    analysis.write_csv(args.out_csv, rows, ["set", "sparsity", "mean_acc", "std_acc"])
    for r in rows:
        print(f"{r['set']:<9} {r['sparsity']:.3f}  {r['mean_acc']:6.2f} +- {r['std_acc']:.2f}")
    return EXIT_OK


def cmd_distort(args) -> int:
    model = load_model(args.model)
    _, evaluation = load_data(args.data, 0, args.n_eval, args.data_seed)
    table = analysis.distortion_eval(model, evaluation)
    rows = [{"transform": k, "accuracy": v} for k, v in table.items()]
    analysis.write_csv(args.out_csv, rows, ["transform", "accuracy"])
    for r in rows:
        print(f"{r['transform']:<9} {r['accuracy']:6.2f}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    data = gen_synthetic(args.n, seed=args.seed, size=args.size, classes=args.classes,
                         noise=args.noise)
    data.save(args.out)
    print(f"wrote {len(data)} images of {data.images.shape[1:]} to {args.out}")
    return EXIT_OK


def _data_flags(p, n_train=True):
    p.add_argument("--data", default="synthetic",
                   help="synthetic | synthetic:<file.npz> | npz:<file.npz> | cifar10:<dir>")
    if n_train:
        p.add_argument("--n-train", type=int, default=4000)
    p.add_argument("--n-eval", type=int, default=1000)
    p.add_argument("--data-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="acnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a plain or ACB model")
    p.add_argument("--spec", help="model description file (default: built-in toy network)")
    _data_flags(p)
    p.add_argument("--eval-data")
    p.add_argument("--acb", choices=sorted(ACB_MODES), default="on")
    p.add_argument("--no-horizontal", action="store_true")
    p.add_argument("--no-vertical", action="store_true")
    p.add_argument("--no-bn-in-branch", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--pad", type=int, default=2)
    p.add_argument("--flip-prob", type=float, default=0.5)
    p.add_argument("--precision", choices=["float32", "float64"], default="float32")
    p.add_argument("--out", required=True)
    p.add_argument("--log-csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="fold BN and asymmetric branches into plain convs")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("verify", help="check two models give the same eval outputs")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=["float32", "float64"],
                   help="evaluation precision (default: coarser of the two stored models)")
    p.add_argument("--tolerance", type=float)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("analyze-magnitude", help="average kernel magnitude matrix")
    p.add_argument("--model", required=True)
    p.add_argument("--out-csv")
    p.set_defaults(func=cmd_magnitude)

    p = sub.add_parser("prune-sweep", help="accuracy under location-restricted pruning")
    p.add_argument("--model", required=True)
    p.add_argument("--sets", default="corner,skeleton,global")
    p.add_argument("--grid", help="comma-separated sparsities in [0, 1] (default: 5%% steps to each set's cap)")
    p.add_argument("--seeds", type=int, default=5)
    _data_flags(p, n_train=False)
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=cmd_prune_sweep)

    p = sub.add_parser("distort-eval", help="accuracy on rotated / flipped inputs")
    p.add_argument("--model", required=True)
    _data_flags(p, n_train=False)
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=cmd_distort)

    p = sub.add_parser("gen-data", help="write a synthetic dataset (.npz)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, UsageError) as exc:
        print(f"acnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
