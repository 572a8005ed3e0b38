"""Command line front end.

Every subcommand writes its artifacts plus a ``run.json`` into an output
directory (``--out``, defaulting to ``$SHAPEBIAS_OUT`` or ``./runs``).
``shapebias --replay DIR/run.json --out NEW`` re-executes a recorded run.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackConfig
from .data import (
    NO_AUGMENTATION,
    AugmentationSpec,
    LabeledDataset,
    load_cifar10_binary,
    load_image_dir,
    make_synthetic_corpus,
)
from .distortions import DistortionSpec, make_distorted_dataset, parse_distortion
from .errors import ConfigurationError, ShapeBiasError
from .evaluation import (
    ROBUSTNESS_ATTACK,
    EvalReport,
    bias_summary,
    evaluate_transforms,
    robust_correct,
)
from .model import NetworkConfig, build_network, load_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate_accuracy, train

log = logging.getLogger("shapebias")

OUT_ENV = "SHAPEBIAS_OUT"
EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

DEFAULT_SWEEP = (
    [f"sat:{p}" for p in ("0.25", "0.5", "1", "2", "4", "8", "16", "64", "1024")]
    + ["patch:2", "patch:4", "patch:8"]
    + ["fourier:low:0.3", "fourier:high:0.3", "fourier:rand:0.5"]
)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument helpers


def fraction(text: str) -> float:
    """Parse ``8/255``, ``0.4`` or ``1e-3`` into a float."""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"not a number or fraction: {text!r}") from exc


def parse_stages(text: str) -> tuple[tuple[int, int], ...]:
    """``16x2,32x2,64x2`` -> ((16, 2), (32, 2), (64, 2))."""
    try:
        stages = tuple(tuple(int(v) for v in part.split("x")) for part in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad stage list {text!r}; expected e.g. 16x2,32x2") from exc
    if any(len(s) != 2 for s in stages):
        raise argparse.ArgumentTypeError(f"bad stage list {text!r}; expected e.g. 16x2,32x2")
    return stages


def load_dataset(spec: str, limit: int | None = None) -> LabeledDataset:
    """Resolve a dataset string.

    ``synthetic:n=2000,seed=1[,consistency=0.9]`` builds the synthetic corpus,
    ``cifar10:DIR`` / ``cifar10-test:DIR`` read the binary batches and any
    other value is an image directory with ``labels.csv``.
    """
    if spec.startswith("synthetic:"):
        opts = {}
        for item in filter(None, spec.split(":", 1)[1].split(",")):
            key, _, value = item.partition("=")
            opts[key.strip()] = value.strip()
        unknown = set(opts) - {"n", "seed", "consistency"}
        if unknown or "n" not in opts:
            raise ConfigurationError(f"bad synthetic dataset spec {spec!r}; use synthetic:n=N[,seed=S][,consistency=C]")
        ds = make_synthetic_corpus(int(opts["n"]), seed=int(opts.get("seed", 0)),
                                   shape_consistency=float(opts.get("consistency", 1.0)))
    elif spec.startswith("cifar10:") or spec.startswith("cifar10-test:"):
        kind, directory = spec.split(":", 1)
        train_set, test_set = load_cifar10_binary(directory)
        ds = test_set if kind == "cifar10-test" else train_set
    else:
        ds = load_image_dir(spec)
    return ds.head(limit) if limit is not None else ds


def _attack_from_args(args) -> AttackConfig | None:
    if args.adversary == "none":
        return None
    if args.adversary == "fgsm":
        return AttackConfig.fgsm(args.eps, seed=args.seed)
    norm = "linf" if args.adversary == "pgd-linf" else "l2"
    return AttackConfig(norm=norm, epsilon=args.eps, step_size=args.step, iterations=args.iters,
                        random_start=not args.no_random_start, seed=args.seed)


def _write_run_json(out: Path, command: str, argv: list[str], resolved: dict) -> None:
    record = {
        "tool": "shapebias",
        "version": __version__,
        "command": command,
        "argv": argv,
        "resolved": resolved,
    }
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args, out: Path) -> dict:
    from .plotting import plot_training_log

    data = load_dataset(args.data, args.limit)
    net_cfg = NetworkConfig(input_size=(3,) + data.images.shape[1:3], stages=args.stages,
                            class_count=data.class_count, seed=args.seed)
    aug = NO_AUGMENTATION if args.no_augment else AugmentationSpec(
        crop_size=data.images.shape[1:3], per_image_standardize=args.standardize, seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                      momentum=args.momentum, weight_decay=args.weight_decay, schedule=args.schedule,
                      adversary=_attack_from_args(args), underfit_target_accuracy=args.underfit_target,
                      seed=args.seed, augmentation=aug, grad_clip=args.grad_clip or None,
                      clean_warmup_epochs=args.clean_warmup, epsilon_warmup_epochs=args.eps_warmup)
    net, train_log = train(build_network(net_cfg), data, cfg,
                           progress=lambda r: log.info("epoch %d loss %.4f val_acc %s", r["epoch"], r["loss"], r["val_acc"]))
    model_id = args.model_id or cfg.mode
    save_checkpoint(net, out / "model.ckpt", {"model_id": model_id, "train": cfg.to_dict(), "data": args.data})
    train_log.write_csv(out / "train_log.csv")
    if train_log.records:
        plot_training_log(train_log.records, out / "train_log.png", title=model_id)
    print(f"trained {model_id}: {len(train_log.records)} epochs -> {out / 'model.ckpt'}")
    return {"network": net_cfg.to_dict(), "train": cfg.to_dict(), "model_id": model_id}


def cmd_distort(args, out: Path) -> dict:
    data = load_dataset(args.data, args.limit)
    spec = parse_distortion(args.op, seed=args.seed)
    make_distorted_dataset(data, spec, out)
    print(f"wrote {len(data)} images ({spec.name} {spec.param_label}) to {out}")
    return {"spec": spec.to_dict()}


def _model_id(path: str, meta: dict) -> str:
    return meta.get("model_id") or Path(path).parent.name or Path(path).stem


def cmd_evaluate(args, out: Path) -> dict:
    from .plotting import plot_transform_curves

    data = load_dataset(args.data, args.limit)
    specs = [parse_distortion(op, seed=args.seed) for op in (args.op or DEFAULT_SWEEP)]
    reports = []
    for path in args.model:
        net, meta = load_checkpoint(path)
        reports.append(evaluate_transforms(net, _model_id(path, meta), data, specs))
    report = bias_summary(reports)
    report.write_csv(out / "eval.csv")
    plot_transform_curves(report, out / "eval.png")
    print(f"wrote {len(report)} rows to {out / 'eval.csv'}")
    return {"specs": [s.to_dict() for s in specs]}


def cmd_robustness(args, out: Path) -> dict:
    from .plotting import plot_robustness

    data = load_dataset(args.data, args.limit)
    cfg = AttackConfig("linf", args.eps, args.step, args.iters, True, args.seed)
    rows = []
    with open(out / "robustness.csv", "w", encoding="utf-8") as fh:
        fh.write("model,n,clean_acc,robust_acc\n")
        for path in args.model:
            net, meta = load_checkpoint(path)
            clean = evaluate_accuracy(net, data)
            robust = float(robust_correct(net, data, cfg).mean())
            rows.append((_model_id(path, meta), clean, robust))
            fh.write(f"{rows[-1][0]},{len(data)},{clean!r},{robust!r}\n")
            print(f"{rows[-1][0]}: clean {clean:.4f} robust {robust:.4f}")
    plot_robustness(rows, out / "robustness.png")
    return {"attack": cfg.to_dict()}


def cmd_saliency(args, out: Path) -> dict:
    from .saliency import grad_map, map_distance, render_map, render_montage, smoothgrad_map

    data = load_dataset(args.data, args.limit)
    nets = []
    for path in args.model:
        net, meta = load_checkpoint(path)
        nets.append((_model_id(path, meta), net))
    indices = args.indices if args.indices is not None else list(range(min(4, len(data))))
    rows = []
    for i in indices:
        image, label = data.images[i], int(data.labels[i])
        maps = []
        for model_id, net in nets:
            if args.method == "grad":
                m = grad_map(net, image, label, model_id)
            else:
                m = smoothgrad_map(net, image, label, args.n, args.sigma, args.seed, model_id)
            render_map(m, out / f"{i:05d}_{model_id}_{args.method}.png")
            maps.append(m)
        render_montage(image, maps, out / f"{i:05d}_montage.png")
        for (model_id, _), m in zip(nets[1:], maps[1:]):
            rows.append((i, label, nets[0][0], model_id, map_distance(maps[0], m, args.metric)))
    with open(out / "saliency_distance.csv", "w", encoding="utf-8") as fh:
        fh.write(f"index,class,model_a,model_b,{args.metric}\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]},{r[2]},{r[3]},{r[4]!r}\n")
    print(f"wrote maps for {len(indices)} images and {len(nets)} models to {out}")
    return {"indices": list(indices)}


def cmd_report(args, out: Path) -> dict:
    from .plotting import plot_transform_curves

    report = bias_summary([EvalReport.read_csv(p) for p in args.inputs])
    report.write_csv(out / "report.csv")
    plot_transform_curves(report, out / "report.png")
    print(f"merged {len(args.inputs)} files into {len(report)} rows at {out / 'report.csv'}")
    return {}


def cmd_grid(args, out: Path) -> dict:
    from .grid import load_grid_config, plan_grid, run_grid

    cfg = load_grid_config(args.config) if args.config else load_grid_config(None)
    plan = plan_grid(cfg)
    if args.dry_run:
        for i, entry in enumerate(plan, start=1):
            print(f"{i:2d} {entry['name']:<14} {entry['description']}")
        return {"grid": cfg, "plan": plan, "dry_run": True}
    run_grid(cfg, plan, out)
    return {"grid": cfg, "plan": plan}


COMMANDS = {
    "train": cmd_train,
    "distort": cmd_distort,
    "saliency": cmd_saliency,
    "evaluate": cmd_evaluate,
    "robustness": cmd_robustness,
    "report": cmd_report,
    "grid": cmd_grid,
}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command> or ./runs/<command>)")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS threads; 1 gives bit-exact reruns")
    common.add_argument("--seed", type=int, default=0, help="master seed")
    common.add_argument("-v", "--verbose", action="store_true")

    data_opts = argparse.ArgumentParser(add_help=False)
    data_opts.add_argument("--data", required=True,
                           help="image directory, cifar10:DIR, cifar10-test:DIR or synthetic:n=N,seed=S")
    data_opts.add_argument("--limit", type=int, default=None, help="use only the first N images")

    parser = argparse.ArgumentParser(prog="shapebias", description="Shape/texture bias experiments at desk scale.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--replay", metavar="RUN_JSON", help="re-execute the command recorded in a run.json")
    parser.add_argument("--out", dest="replay_out", metavar="DIR", help="output directory for --replay")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("train", parents=[common, data_opts], help="train a network (standard, adversarial or underfit)")
    p.add_argument("--model-id", default=None)
    p.add_argument("--stages", type=parse_stages, default=((16, 2), (32, 2), (64, 2)), help="e.g. 16x2,32x2,64x2")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--schedule", choices=["cosine", "constant"], default="cosine")
    p.add_argument("--grad-clip", type=float, default=1.0, help="joint gradient-norm cap; 0 disables")
    p.add_argument("--no-augment", action="store_true", help="disable pad/crop/flip")
    p.add_argument("--standardize", action="store_true", help="per-image standardization")
    p.add_argument("--adversary", choices=["none", "pgd-linf", "pgd-l2", "fgsm"], default="none")
    p.add_argument("--eps", type=fraction, default=8 / 255, help="budget, e.g. 8/255")
    p.add_argument("--step", type=fraction, default=2 / 255, help="PGD step size, e.g. 2/255")
    p.add_argument("--iters", type=int, default=20, help="PGD iterations")
    p.add_argument("--no-random-start", action="store_true")
    p.add_argument("--clean-warmup", type=int, default=0, metavar="EPOCHS",
                   help="adversarial mode: train on clean inputs for this many epochs first")
    p.add_argument("--eps-warmup", type=int, default=0, metavar="EPOCHS",
                   help="grow the attack budget linearly from 0 over this many epochs")
    p.add_argument("--underfit-target", type=float, default=None, help="stop once validation accuracy reaches this")

    p = sub.add_parser("distort", parents=[common, data_opts], help="write a distorted copy of a dataset")
    p.add_argument("--op", required=True, help="sat:<p>, patch:<k>, fourier:low|high|rand:<v> or identity")

    p = sub.add_parser("saliency", parents=[common, data_opts], help="render Grad or SmoothGrad maps")
    p.add_argument("--model", action="append", required=True, help="checkpoint; repeat to compare models")
    p.add_argument("--indices", type=lambda s: [int(v) for v in s.split(",")], default=None, help="e.g. 0,5,9")
    p.add_argument("--method", choices=["grad", "smoothgrad"], default="smoothgrad")
    p.add_argument("--n", type=int, default=100, help="SmoothGrad samples")
    p.add_argument("--sigma", type=float, default=0.1, help="noise scale relative to the image range")
    p.add_argument("--metric", choices=["mean_abs", "rms"], default="mean_abs")

    p = sub.add_parser("evaluate", parents=[common, data_opts], help="accuracy on correct images over distortions")
    p.add_argument("--model", action="append", required=True, help="checkpoint; may repeat")
    p.add_argument("--op", action="append", default=None, help="distortion; may repeat (default: full sweep)")

    p = sub.add_parser("robustness", parents=[common, data_opts], help="clean and PGD-40 accuracy")
    p.add_argument("--model", action="append", required=True, help="checkpoint; may repeat")
    p.add_argument("--eps", type=fraction, default=ROBUSTNESS_ATTACK.epsilon)
    p.add_argument("--step", type=fraction, default=ROBUSTNESS_ATTACK.step_size)
    p.add_argument("--iters", type=int, default=ROBUSTNESS_ATTACK.iterations)

    p = sub.add_parser("report", parents=[common], help="merge evaluation CSVs and plot them")
    p.add_argument("inputs", nargs="+", help="eval.csv files")

    p = sub.add_parser("grid", parents=[common], help="run (or list with --dry-run) the 11-model grid")
    p.add_argument("--config", default=None, help="grid JSON config")
    p.add_argument("--dry-run", action="store_true", help="print the planned models and exit")
    return parser


def _resolve_out(args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUT_ENV, "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.replay:
        if args.command:
            parser.error("--replay takes no subcommand")
        record = json.loads(Path(args.replay).read_text())
        replay_argv = list(record["argv"])
        if args.replay_out:
            replay_argv += ["--out", args.replay_out]
        return _run(replay_argv)
    if args.replay_out:
        parser.error("--out belongs after the subcommand (or with --replay)")
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    dry = getattr(args, "dry_run", False)
    out = None if dry else _resolve_out(args)
    recorded = [a for a in _strip_out(argv)]

    def body():
        resolved = COMMANDS[args.command](args, out)
        if out is not None:
            _write_run_json(out, args.command, recorded, resolved)

    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            body()
    else:
        body()
    return EXIT_OK


def _strip_out(argv: list[str]) -> list[str]:
    """argv without ``--out`` so a replay can redirect its outputs."""
    result, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        result.append(a)
    return result


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return _run(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except (ConfigurationError, UsageError) as exc:
        print(f"shapebias: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ShapeBiasError, OSError, ValueError) as exc:
        print(f"shapebias: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
