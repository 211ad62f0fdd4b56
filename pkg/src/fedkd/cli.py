"""Command-line experiment runner.

Subcommands cover the whole lifecycle: ``gen-data`` writes synthetic
datasets, ``partition`` inspects client splits, ``pretrain-teacher`` trains
and checkpoints a frozen teacher, ``run`` executes multi-trial federated
training from a JSON config, ``evaluate`` scores a checkpoint, and
``report`` summarizes metrics directories (mean and sample std of the
final-round accuracy per algorithm).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import io as fio
from .data import (
    Dataset,
    PartitionSpec,
    generate_train_test,
    load_dataset,
    partition,
    partition_stats,
    save_dataset_csv,
)
from .federation import evaluate, run_federation
from .nn import ArchDescriptor
from .teachers import (
    ClientTeacherSet,
    ModelTeacher,
    Teacher,
    build_client_teacher_sets,
    finetune_teacher_locally,
    pretrain_teacher,
    teacher_from_logits_table,
)

__all__ = ["main", "entry"]


def _save_dataset(dataset: Dataset, path: str, fmt: str) -> None:
    if fmt == "csv":
        save_dataset_csv(dataset, path)
    else:
        fio.write_dataset(dataset, path)


def cmd_gen_data(args) -> int:
    train, test = generate_train_test(
        n_classes=args.classes,
        train_per_class=args.train_per_class,
        test_per_class=args.test_per_class,
        input_dim=args.dim,
        class_separation=args.separation,
        seed=args.seed,
    )
    _save_dataset(train, args.out_train, args.format)
    _save_dataset(test, args.out_test, args.format)
    print(f"wrote {train.n} train examples to {args.out_train}")
    print(f"wrote {test.n} test examples to {args.out_test}")
    return 0


def cmd_partition(args) -> int:
    dataset = load_dataset(args.dataset, args.format)
    spec = PartitionSpec(
        kind=args.kind,
        n_clients=args.clients,
        seed=args.seed,
        alpha=args.alpha,
        classes_per_client=args.classes_per_client,
    )
    assignment = partition(dataset, spec)
    stats = partition_stats(dataset, assignment)
    payload = {
        "kind": spec.kind,
        "n_clients": spec.n_clients,
        "seed": spec.seed,
        "per_client": [ix.tolist() for ix in assignment.per_client],
        "sizes": stats.sizes.tolist(),
        "class_histograms": stats.class_histograms.tolist(),
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    print(f"wrote partition of {dataset.n} examples across {spec.n_clients} clients to {args.out}")
    return 0


def cmd_pretrain_teacher(args) -> int:
    dataset = load_dataset(args.dataset, args.format)
    hidden = tuple(int(h) for h in args.hidden.split(",")) if args.hidden else ()
    arch = ArchDescriptor(
        input_dim=dataset.input_dim,
        hidden_dims=hidden,
        num_classes=dataset.num_classes,
        norm=args.norm,
        groups=args.groups,
    )
    teacher = pretrain_teacher(
        dataset, arch, epochs=args.epochs, lr=args.lr, seed=args.seed, batch_size=args.batch_size
    )
    fio.write_checkpoint(teacher.params, args.out)
    print(f"teacher train accuracy {teacher.train_accuracy:.6f}, checkpoint at {args.out}")
    return 0


def _load_run_datasets(setup: fio.RunSetup) -> tuple[Dataset, Dataset]:
    refs = setup.dataset
    if refs.synthetic is not None:
        syn = refs.synthetic
        return generate_train_test(
            n_classes=syn.n_classes,
            train_per_class=syn.train_per_class,
            test_per_class=syn.test_per_class,
            input_dim=syn.input_dim,
            class_separation=syn.class_separation,
            seed=syn.seed,
        )
    return (
        load_dataset(refs.train_path, refs.format),
        load_dataset(refs.test_path, refs.format),
    )


def _build_pool_teacher(src: fio.TeacherSource, train: Dataset, trial: int) -> Teacher:
    if src.kind == "pretrain":
        arch = ArchDescriptor(
            input_dim=train.input_dim,
            hidden_dims=src.hidden_dims,
            num_classes=train.num_classes,
            norm=src.norm,
            groups=src.groups,
        )
        return pretrain_teacher(
            train, arch, epochs=src.epochs, lr=src.lr, seed=src.seed + trial,
            batch_size=src.batch_size,
        )
    if src.kind == "checkpoint":
        return ModelTeacher(fio.read_checkpoint(src.path), kind="pretrained")
    table = fio.read_logits_table(src.path)
    if table.num_classes != train.num_classes:
        raise fio.ConfigError(
            f"logits table {src.path} has {table.num_classes} classes, "
            f"dataset has {train.num_classes}"
        )
    return teacher_from_logits_table(table)


def _build_teacher_sets(
    setup: fio.RunSetup, train: Dataset, assignment, trial: int
) -> ClientTeacherSet | None:
    ts = setup.teachers
    if ts is None:
        return None
    pool = [_build_pool_teacher(src, train, trial) for src in ts.pool]
    n_clients = setup.federation.n_clients
    policy = "uniform" if ts.assignment == "uniform" else "random_choice"
    sets = build_client_teacher_sets(policy, n_clients, pool, seed=ts.seed + trial)
    if ts.finetune is None:
        return sets
    tuned: list[list[Teacher]] = []
    for client_id, teachers in enumerate(sets.per_client):
        slice_ds = train.subset(assignment.per_client[client_id])
        client_teachers = []
        for teacher in teachers:
            if not isinstance(teacher, ModelTeacher):
                raise fio.ConfigError(
                    "teachers.finetune: only model-backed teachers can be fine-tuned"
                )
            ft_seed = int(
                np.random.SeedSequence([ts.seed + trial, 3, client_id]).generate_state(1)[0]
            )
            client_teachers.append(
                finetune_teacher_locally(
                    teacher,
                    slice_ds,
                    epochs=ts.finetune.epochs,
                    lr=ts.finetune.lr,
                    seed=ft_seed,
                    batch_size=ts.finetune.batch_size,
                )
            )
        tuned.append(client_teachers)
    return ClientTeacherSet(tuned)


def cmd_run(args) -> int:
    setup = fio.load_run_config(args.config)
    if args.seed is not None:
        setup.federation = replace(setup.federation, seed=args.seed)
        setup.resolved["seed"] = args.seed
    if args.trials < 1:
        print("error: --trials must be >= 1", file=sys.stderr)
        return 1

    out_dir = args.out
    metrics_paths = [os.path.join(out_dir, f"metrics_trial{k}.csv") for k in range(args.trials)]
    ckpt_paths = [os.path.join(out_dir, f"checkpoint_trial{k}.ffck") for k in range(args.trials)]
    existing = [p for p in metrics_paths + ckpt_paths if os.path.exists(p)]
    if existing and not args.overwrite:
        print(
            f"error: {existing[0]} already exists; pass --overwrite to replace run outputs",
            file=sys.stderr,
        )
        return 1
    os.makedirs(out_dir, exist_ok=True)
    for p in existing:
        os.remove(p)

    train, test = _load_run_datasets(setup)
    base_cfg = setup.federation
    arch = replace(setup.arch, input_dim=train.input_dim, num_classes=train.num_classes)

    with open(os.path.join(out_dir, "resolved_config.json"), "w", encoding="utf-8") as fh:
        json.dump(setup.resolved, fh, indent=2)
        fh.write("\n")

    for k in range(args.trials):
        trial_seed = base_cfg.seed + k
        cfg = replace(base_cfg, seed=trial_seed)
        spec = replace(setup.partition, seed=setup.partition.seed + k)
        assignment = partition(train, spec)
        teacher_sets = _build_teacher_sets(setup, train, assignment, k)
        metrics, final = run_federation(cfg, train, test, assignment, teacher_sets, arch)
        for row in metrics:
            fio.append_metrics(row, metrics_paths[k], algorithm=cfg.algorithm, seed=trial_seed)
        fio.write_checkpoint(final, ckpt_paths[k])
        last = metrics[-1]
        print(
            f"trial {k} (seed {trial_seed}): final accuracy {last.accuracy:.6f} "
            f"after round {last.round_index}"
        )
    return 0


def cmd_evaluate(args) -> int:
    params = fio.read_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset, args.format)
    if dataset.input_dim != params.arch.input_dim:
        raise ValueError(
            f"dataset has {dataset.input_dim} features, checkpoint expects "
            f"{params.arch.input_dim}"
        )
    print(f"{evaluate(params, dataset):.6f}")
    return 0


def _final_accuracies(metrics_dir: str) -> dict[str, list[float]]:
    groups: dict[str, list[float]] = {}
    names = sorted(os.listdir(metrics_dir))
    for name in names:
        if not name.endswith(".csv") or name == "summary.csv":
            continue
        path = os.path.join(metrics_dir, name)
        with open(path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            continue
        last = rows[-1]
        groups.setdefault(last["algorithm"], []).append(float(last["accuracy"]))
    return groups


def cmd_report(args) -> int:
    if not os.path.isdir(args.metrics_dir):
        print(f"error: {args.metrics_dir} is not a directory", file=sys.stderr)
        return 1
    groups = _final_accuracies(args.metrics_dir)
    if not groups:
        print(f"error: no metrics files in {args.metrics_dir}", file=sys.stderr)
        return 1
    out_path = args.out or os.path.join(args.metrics_dir, "summary.csv")
    lines = ["algorithm,trials,mean_accuracy,std_accuracy"]
    for algorithm in sorted(groups):
        accs = np.asarray(groups[algorithm], dtype=np.float64)
        std = float(accs.std(ddof=1)) if accs.size > 1 else 0.0
        lines.append(f"{algorithm},{accs.size},{accs.mean():.6f},{std:.6f}")
    body = "\n".join(lines)
    print(body)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(body + "\n")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedkd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic train/test dataset pair")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--train-per-class", type=int, default=200)
    p.add_argument("--test-per-class", type=int, default=100)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["csv", "binary"], default="csv")
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("partition", help="split a dataset across clients and report stats")
    p.add_argument("--dataset", required=True)
    p.add_argument("--format", choices=["csv", "binary"], default="csv")
    p.add_argument("--kind", choices=["iid", "dirichlet", "class_split"], required=True)
    p.add_argument("--clients", type=int, required=True)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--classes-per-client", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("pretrain-teacher", help="train a frozen teacher on a full dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--format", choices=["csv", "binary"], default="csv")
    p.add_argument("--hidden", default="64", help="comma-separated hidden widths")
    p.add_argument("--norm", choices=["none", "group"], default="group")
    p.add_argument("--groups", type=int, default=8)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_teacher)

    p = sub.add_parser("run", help="run federated training trials from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="print a checkpoint's accuracy on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--format", choices=["csv", "binary"], default="csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="summarize metrics files (mean/std of final accuracy)")
    p.add_argument("metrics_dir")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError, fio.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    raise SystemExit(main())
