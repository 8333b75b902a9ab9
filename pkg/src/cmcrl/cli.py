"""Command-line entry point: ``cmcrl <subcommand> [options]``.

Every run command writes its effective configuration to ``config.ini`` in its
output directory. Failures exit nonzero after printing a single line of the
form ``cmcrl: error: <Kind>: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, manifest_diff, read_manifest
from .cluster import pseudo_label
from .config import (
    PRESETS,
    apply_overrides,
    config_from_flat,
    flat_items,
    load_config,
    read_entries,
    save_config,
)
from .data import ConfigurationError, IngestionError, export_corpus, load_corpus, make_synthetic, split
from .metrics import EvaluationError, ari, cacc, cluster_composition
from .model import encode, parameter_checksum
from .train import evaluate, finetune, load_head, load_state, pretrain, save_head, write_epoch_csv

OUTPUT_ENV = "CMCRL_OUTPUT_ROOT"

EXIT_CODES = {
    "UsageError": 2,
    "ConfigurationError": 2,
    "IngestionError": 3,
    "CheckpointError": 4,
    "EvaluationError": 5,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _run_options(p: argparse.ArgumentParser, checkpoint: bool = False, head: bool = False) -> None:
    p.add_argument("--data", required=True, help="folder-per-class image corpus")
    p.add_argument("--config", help="config file with [section] key = value entries")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named bundle of overrides applied before --config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--layers", help="layer set, e.g. 1,2,3,4 or 4")
    p.add_argument("--epochs", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default: $%s or output.root, then the command name)" % OUTPUT_ENV)
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="encoder checkpoint directory")
    if head:
        p.add_argument("--head", required=True, help="linear head checkpoint directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmcrl", description="Clustering-guided multi-layer contrastive representation learning.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-synthetic", help="write a synthetic folder-per-class texture corpus")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("pretrain", help="cluster-guided contrastive pre-training on the pretrain split")
    _run_options(p)
    p.add_argument("--resume", help="encoder checkpoint to continue from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train a linear head on the frozen encoder")
    _run_options(p, checkpoint=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="score encoder + head on the test split")
    _run_options(p, checkpoint=True, head=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cluster-report", help="per-cluster composition of the pretrain split")
    _run_options(p, checkpoint=True)
    p.set_defaults(func=cmd_cluster_report)
    return parser


def _explicit_entries(args) -> dict:
    """Config entries the user supplied (preset, file, then flags)."""
    entries = dict(PRESETS[args.preset]) if args.preset else {}
    if args.config:
        entries.update(read_entries(args.config))
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        entries[key.strip()] = value.strip()
    for flag, key in (("layers", "model.layer_set"), ("epochs", "train.epochs"),
                      ("iters", "train.iters"), ("seed", "train.seed")):
        value = getattr(args, flag)
        if value is not None:
            entries[key] = str(value)
    return {("model.layer_set" if k == "model.layers" else k): v for k, v in entries.items()}


def _checkpoint_config(args, explicit: dict):
    """Config stored with a checkpoint, refined by the user's non-architecture entries.

    Explicitly set ``model.*`` keys must agree with the checkpoint.
    """
    ckpt = Path(args.checkpoint)
    if not ckpt.is_dir():
        raise CheckpointError(f"checkpoint directory not found: {ckpt}")
    manifest = read_manifest(ckpt / "manifest.txt")
    if manifest.get("kind") != "encoder":
        raise CheckpointError(f"{ckpt} is not an encoder checkpoint")
    requested = apply_overrides(config_from_flat(manifest), explicit)
    wanted = {k: v for k, v in flat_items(requested).items() if k.startswith("model.") and k in explicit}
    diffs = manifest_diff(wanted, manifest)
    if diffs:
        raise CheckpointError("config does not match checkpoint: " + "; ".join(diffs))
    return requested


def _out_dir(args, config, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUTPUT_ENV) or config.output.root) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _splits(args, config):
    corpus = load_corpus(args.data, config.data.image_size)
    return split(corpus, config.data.split_spec())


def cmd_make_synthetic(args) -> str:
    ds = make_synthetic(args.classes, args.per_class, args.size, args.seed)
    out = export_corpus(ds, args.out, force=args.force)
    return f"N={len(ds)} K={ds.num_classes} out={out}"


def cmd_pretrain(args) -> str:
    explicit = _explicit_entries(args)
    if args.resume:
        args.checkpoint = args.resume
        config = _checkpoint_config(args, explicit)
        state = load_state(args.resume, config)
    else:
        config = load_config(overrides=explicit)
        state = None
    out = _out_dir(args, config, "pretrain")
    save_config(config, out / "config.ini")
    pre, _, _ = _splits(args, config)
    state = pretrain(pre, config, state=state, checkpoint_dir=out / "checkpoint")
    write_epoch_csv(state.history, out / "epochs.csv")
    last = state.history[-1]
    return (f"epochs={state.epoch} m={last['m']} loss={last['loss']:.4f} cacc={last['cacc']:.4f} "
            f"checkpoint={out / 'checkpoint' / 'final'}")


def cmd_finetune(args) -> str:
    config = _checkpoint_config(args, _explicit_entries(args))
    out = _out_dir(args, config, "finetune")
    save_config(config, out / "config.ini")
    _, ft, _ = _splits(args, config)
    state = load_state(args.checkpoint, config)
    t = config.train
    head, curve = finetune(state.model, ft, t.finetune_epochs, t.finetune_lr, t.finetune_batch_size,
                           t.finetune_momentum, seed=t.seed)
    save_head(head, out / "head", ft.class_names, {"encoder.checksum": parameter_checksum(state.model)})
    with open(out / "curve.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "loss", "train_acc"])
        w.writeheader()
        w.writerows(curve)
    return f"epochs={len(curve)} train_acc={curve[-1]['train_acc']:.4f} head={out / 'head'}"


def cmd_evaluate(args) -> str:
    config = _checkpoint_config(args, _explicit_entries(args))
    state = load_state(args.checkpoint, config)
    head = load_head(args.head)
    recorded = read_manifest(Path(args.head) / "manifest.txt").get("encoder.checksum")
    if recorded is not None and recorded != parameter_checksum(state.model):
        raise CheckpointError(f"head {args.head} was trained on a different encoder than {args.checkpoint}")
    out = _out_dir(args, config, "evaluate")
    save_config(config, out / "config.ini")
    _, _, test = _splits(args, config)
    report = evaluate(state.model, head, test, state.history)
    report.write(out)
    return " ".join(f"{k}={v:.4f}" for k, v in report.scalars().items())


def cmd_cluster_report(args) -> str:
    config = _checkpoint_config(args, _explicit_entries(args))
    state = load_state(args.checkpoint, config)
    out = _out_dir(args, config, "cluster-report")
    save_config(config, out / "config.ini")
    pre, _, _ = _splits(args, config)
    assignment = pseudo_label(encode(state.model, pre.images), config.cluster, config.model.layer_set)
    if assignment.m == 0:
        raise EvaluationError("no clusters found; every sample is noise")
    rows = cluster_composition(pre.labels, assignment.pseudo_labels, pre.class_names)
    with open(out / "clusters.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    summary = {"m": assignment.m, "n_clustered": assignment.n_clustered, "n_noise": len(pre) - assignment.n_clustered,
               "cacc": cacc(pre.labels, assignment.pseudo_labels), "ari": ari(pre.labels, assignment.pseudo_labels)}
    (out / "summary.txt").write_text("".join(f"{k} = {v}\n" for k, v in summary.items()))
    if config.output.plots:
        plot_composition(rows, pre.class_names, out / "clusters.png")
    return f"m={summary['m']} cacc={summary['cacc']:.4f} ari={summary['ari']:.4f} report={out / 'clusters.csv'}"


def plot_composition(rows: list, class_names: list, path) -> None:
    """Stacked bar per cluster, one colour per ground-truth class."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(rows) + 2), 3.5))
    x = np.arange(len(rows))
    bottom = np.zeros(len(rows))
    for name in class_names:
        counts = np.array([r.get(f"n_{name}", 0) for r in rows], dtype=float)
        ax.bar(x, counts, bottom=bottom, label=name)
        bottom += counts
    ax.set_xticks(x, [str(r["cluster"]) for r in rows])
    ax.set_xlabel("cluster")
    ax.set_ylabel("images")
    ax.legend(fontsize="small", frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        print(args.func(args))
        return 0
    except (UsageError, ConfigurationError, IngestionError, CheckpointError, EvaluationError) as exc:
        return _fail(type(exc).__name__, exc, EXIT_CODES[type(exc).__name__])
    except OSError as exc:
        return _fail("IOError", exc, 6)


def _fail(kind: str, exc: Exception, code: int) -> int:
    message = " ".join(str(exc).split())
    print(f"cmcrl: error: {kind}: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
