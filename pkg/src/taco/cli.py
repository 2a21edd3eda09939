"""Operator surface: data generation, training, evaluation, alignment
inspection, and grid sweeps.

Every command takes a ``--seed`` and derives all randomness from it through
named substreams, so reruns with identical flags reproduce identical output
bytes (the training history's wall-clock column being the one physical
exception). An optional config file supplies world/noise/training/eval
constants as ``key = value`` lines; command-line flags win over the file.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .alignment import write_lattice_csv, ctc_forward, decode_argmax, taco_forward
from .errors import (
    DataError,
    DegenerateLatticeError,
    GenerationError,
    NumericError,
    StructuralError,
)
from .evaluation import EvalConfig, alignment_accuracy, evaluate_policies, write_metrics
from .navworld import (
    DartNoise,
    WorldConfig,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .policy import load_checkpoint, save_checkpoint
from .seeding import derive_seed
from .training import ALGORITHMS, TrainConfig, train, write_history_csv

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures through our exit codes
        raise UsageError(message)


def load_config_file(path) -> dict:
    """Flat ``key = value`` lines; values parse as JSON, else raw strings."""
    cfg: dict = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        val = val.strip()
        try:
            cfg[key.strip()] = json.loads(val)
        except json.JSONDecodeError:
            cfg[key.strip()] = val
    return cfg


def _section(cfg: dict, prefix: str) -> dict:
    return {
        key[len(prefix) + 1 :]: val
        for key, val in cfg.items()
        if key.startswith(prefix + ".")
    }


def _world_config(cfg: dict) -> WorldConfig:
    fields = _section(cfg, "world")
    if "centers" in fields:
        fields["centers"] = tuple(tuple(c) for c in fields["centers"])
    return WorldConfig(**fields)


def _noise_config(cfg: dict) -> DartNoise:
    fields = _section(cfg, "noise")
    if "std_schedule" in fields:
        fields["std_schedule"] = tuple(fields["std_schedule"])
    return DartNoise(**fields)


def _train_config(cfg: dict, args) -> TrainConfig:
    fields = _section(cfg, "train")
    fields.pop("algorithm", None)  # the flag is mandatory and authoritative
    if "hidden_sizes" in fields:
        fields["hidden_sizes"] = tuple(fields["hidden_sizes"])
    for flag in ("epochs", "batch_size", "learning_rate"):
        value = getattr(args, flag, None)
        if value is not None:
            fields[flag] = value
    return TrainConfig(algorithm=args.algo, rng_seed=args.seed, **fields)


def _eval_config(cfg: dict, args) -> EvalConfig:
    fields = _section(cfg, "eval")
    fields.pop("l_test", None)
    fields.pop("n_tasks", None)
    return EvalConfig(
        n_tasks=args.n_tasks, l_test=args.l_test, rng_seed=args.seed, **fields
    )


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.length < 1:
        raise UsageError("--length must be at least 1")
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    cfg = load_config_file(args.config) if args.config else {}
    world_cfg = _world_config(cfg)
    noise = _noise_config(cfg)
    dataset = generate_dataset(world_cfg, noise, args.n, args.length, args.seed)
    save_dataset(dataset, args.out, world_cfg, noise, args.length, args.seed)
    mean_t = float(np.mean([item.trajectory.T for item in dataset.items]))
    print(f"wrote {args.n} demos (L={args.length}, mean T={mean_t:.1f}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config_file(args.config) if args.config else {}
    dataset, header = load_dataset(args.data)
    train_cfg = _train_config(cfg, args)
    report = train(train_cfg, dataset)
    save_checkpoint(
        args.out,
        report.library,
        report.classifier,
        meta={
            "algorithm": report.algorithm,
            "n_demos": len(dataset),
            "L_train": header.get("L"),
            "train_seed": args.seed,
            "skipped": report.skipped,
        },
    )
    history_path = args.history or f"{args.out}.history.csv"
    write_history_csv(report, history_path)
    print(
        f"trained {report.algorithm} for {len(report.history)} epochs "
        f"(final loss {report.losses[-1]:.4f}, skipped {report.skipped}) -> {args.out}"
    )
    return EXIT_OK


def _pick_alignment_model(library, classifier, meta):
    algorithm = meta.get("algorithm", "")
    if isinstance(algorithm, str) and algorithm.startswith("ctc-bc") and classifier:
        return classifier
    return library


def cmd_eval(args) -> int:
    cfg = load_config_file(args.config) if args.config else {}
    library, classifier, meta = load_checkpoint(args.checkpoint)
    world_cfg = _world_config(cfg)
    eval_cfg = _eval_config(cfg, args)
    metrics = evaluate_policies(library, eval_cfg, world_cfg)
    alignment_pct = None
    n_excluded = 0
    if args.heldout:
        heldout, header = load_dataset(args.heldout)
        if (header["d_s"], header["d_a"], header["K"]) != (
            meta["d_s"],
            meta["d_a"],
            meta["K"],
        ):
            raise DataError(
                "checkpoint and held-out dataset disagree on dimensions "
                f"({meta['d_s']},{meta['d_a']},{meta['K']}) vs "
                f"({header['d_s']},{header['d_a']},{header['K']})"
            )
        model = _pick_alignment_model(library, classifier, meta)
        alignment_pct, n_excluded = alignment_accuracy(model, heldout)
    report = write_metrics(
        f"{args.out}.json",
        f"{args.out}.csv",
        algorithm=meta.get("algorithm", "unknown"),
        n_demos=meta.get("n_demos"),
        l_train=meta.get("L_train"),
        l_test=args.l_test,
        task_acc=metrics["task_accuracy"],
        subtask_acc=metrics["subtask_accuracy"],
        alignment_pct=alignment_pct,
        n_excluded=n_excluded,
        seed=args.seed,
    )
    print(json.dumps(report))
    return EXIT_OK


def cmd_align(args) -> int:
    library, classifier, meta = load_checkpoint(args.checkpoint)
    dataset, _header = load_dataset(args.data)
    if not 0 <= args.index < len(dataset):
        raise DataError(f"--index {args.index} out of range [0, {len(dataset)})")
    item = dataset.items[args.index]
    model = _pick_alignment_model(library, classifier, meta)
    if model is classifier:
        lattice = ctc_forward(classifier, item.trajectory, item.sketch)
    else:
        lattice = taco_forward(library, item.trajectory, item.sketch)
    write_lattice_csv(lattice, args.out)
    decoded = decode_argmax(lattice)
    print("decoded:", " ".join(str(int(k)) for k in decoded))
    if item.alignment is not None:
        agreement = 100.0 * float(np.mean(decoded == item.alignment))
        print(f"ground-truth agreement: {agreement:.1f}%")
    print(f"lattice -> {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config_file(args.config) if args.config else {}
    world_cfg = _world_config(cfg)
    noise = _noise_config(cfg)
    sizes = [int(s) for s in args.sizes.split(",") if s]
    algos = [a for a in args.algos.split(",") if a]
    seeds = [int(s) for s in args.seeds.split(",") if s]
    for algo in algos:
        if algo not in ALGORITHMS:
            raise UsageError(f"unknown algorithm {algo!r} in --algos")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for seed in seeds:
        heldout = generate_dataset(
            world_cfg, noise, args.n_heldout, args.l_train, derive_seed(seed, "heldout")
        )
        for size in sizes:
            data_seed = derive_seed(seed, "data", size)
            dataset = generate_dataset(world_cfg, noise, size, args.l_train, data_seed)
            data_path = out_dir / f"data_n{size}_seed{seed}.jsonl"
            save_dataset(dataset, data_path, world_cfg, noise, args.l_train, data_seed)
            for algo in algos:
                row = {
                    "algorithm": algo,
                    "n_demos": size,
                    "seed": seed,
                    "task_accuracy": "",
                    "subtask_accuracy": "",
                    "alignment_accuracy_pct": "",
                    "error": "",
                }
                try:
                    fields = _section(cfg, "train")
                    fields.pop("algorithm", None)
                    if "hidden_sizes" in fields:
                        fields["hidden_sizes"] = tuple(fields["hidden_sizes"])
                    train_cfg = TrainConfig(
                        algorithm=algo, rng_seed=derive_seed(seed, "train", algo, size),
                        **fields,
                    )
                    report = train(train_cfg, dataset)
                    ckpt = out_dir / f"ckpt_{algo}_n{size}_seed{seed}.json"
                    save_checkpoint(
                        ckpt,
                        report.library,
                        report.classifier,
                        meta={
                            "algorithm": algo,
                            "n_demos": size,
                            "L_train": args.l_train,
                            "train_seed": seed,
                            "skipped": report.skipped,
                        },
                    )
                    eval_cfg = EvalConfig(
                        n_tasks=args.n_tasks,
                        l_test=args.l_test,
                        rng_seed=derive_seed(seed, "eval", algo, size),
                    )
                    metrics = evaluate_policies(report.library, eval_cfg, world_cfg)
                    model = (
                        report.classifier
                        if algo.startswith("ctc-bc") and report.classifier
                        else report.library
                    )
                    pct, _excluded = alignment_accuracy(model, heldout)
                    row.update(
                        task_accuracy=repr(metrics["task_accuracy"]),
                        subtask_accuracy=repr(metrics["subtask_accuracy"]),
                        alignment_accuracy_pct=repr(pct),
                    )
                except (StructuralError, DataError, NumericError, GenerationError) as exc:
                    row["error"] = f"{type(exc).__name__}: {exc}"
                rows.append(row)
                print(
                    f"sweep cell algo={algo} n={size} seed={seed}: "
                    + (row["error"] or f"task={row['task_accuracy']}")
                )

    csv_path = out_dir / "sweep.csv"
    header = [
        "algorithm",
        "n_demos",
        "seed",
        "task_accuracy",
        "subtask_accuracy",
        "alignment_accuracy_pct",
        "error",
    ]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(row[h]) for h in header))
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"sweep table -> {csv_path}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="taco", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a demonstration dataset")
    p.add_argument("--n", type=int, required=True, help="number of demonstrations")
    p.add_argument("--length", type=int, required=True, help="sketch length")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train sub-policies on a dataset")
    p.add_argument("--algo", required=True, choices=ALGORITHMS)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint JSON path")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.add_argument("--history", default=None, help="history CSV path")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--l-test", dest="l_test", type=int, default=4)
    p.add_argument("--n-tasks", dest="n_tasks", type=int, default=100)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--heldout", default=None, help="dataset for alignment accuracy")
    p.add_argument("--out", required=True, help="report path prefix")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("align", help="dump one trajectory's lattice and decode")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True, help="lattice CSV path")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("sweep", help="run a (algorithm x dataset size) grid")
    p.add_argument("--sizes", required=True, help="comma-separated dataset sizes")
    p.add_argument("--algos", required=True, help="comma-separated algorithms")
    p.add_argument("--seeds", required=True, help="comma-separated seeds")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--l-train", dest="l_train", type=int, default=3)
    p.add_argument("--l-test", dest="l_test", type=int, default=4)
    p.add_argument("--n-tasks", dest="n_tasks", type=int, default=100)
    p.add_argument("--n-heldout", dest="n_heldout", type=int, default=100)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StructuralError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GenerationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, DegenerateLatticeError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
