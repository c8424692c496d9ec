"""Command-line entry point: ``fgcprune {train,eval,analyze,export-dataset}``.

Exit codes: 0 success, 1 user error (bad flags, config, files), 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .data import write_idx
from .errors import FGCError, NumericError
from .fgc import NEIGHBOR_SOURCES
from .trainer import Trainer, analyze, evaluate, load_datasets, train

EXIT_OK = 0
EXIT_USER = 1
EXIT_NUMERIC = 2

log = logging.getLogger("fgcprune")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def _omega(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated layer indices, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fgcprune", description="Dynamic channel pruning with feature-gate coupling.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    t = sub.add_parser("train", help="train a gated network, write log and checkpoint")
    t.add_argument("--config", help="TOML or JSON run config")
    t.add_argument("--seed", type=int, help="run seed (parameter init, sampling, shuffling)")
    t.add_argument("--out", default="run", help="output directory (default: %(default)s)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--eta", type=float, help="contrastive loss weight")
    t.add_argument("--rho", type=float, help="sparsity loss weight")
    t.add_argument("--k", type=int, help="neighbors per instance")
    t.add_argument("--tau", type=float, help="softmax temperature")
    t.add_argument("--omega", type=_omega, help="coupled layer indices, e.g. 1,2")
    t.add_argument("--neighbor-source", choices=NEIGHBOR_SOURCES)
    t.add_argument("--shared-layer", type=int)

    e = sub.add_parser("eval", help="hard-gate error and pruning ratio of a checkpoint")
    e.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.fgc)")
    e.add_argument("--config", help="config whose dataset block replaces the checkpoint's")
    e.add_argument("--seed", type=int, help="accepted for symmetry; evaluation is deterministic")
    e.add_argument("--out", default="run")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--force-open", action="store_true", help="evaluate with every gate open")

    a = sub.add_parser("analyze", help="NMI, execution frequencies, gate rankings, embeddings")
    a.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.fgc)")
    a.add_argument("--config", help="config whose dataset block replaces the checkpoint's")
    a.add_argument("--seed", type=int, default=0, help="k-means and query-sampling seed")
    a.add_argument("--out", default="run")
    a.add_argument("--split", choices=("train", "test"), default="test")
    a.add_argument("--queries", type=int, default=5)
    a.add_argument("--layers", type=_omega, help="layers to analyze (default: coupled layers)")

    x = sub.add_parser("export-dataset", help="write the configured dataset as IDX files")
    x.add_argument("--config")
    x.add_argument("--seed", type=int, help="dataset generation seed")
    x.add_argument("--out", default="data")
    return p


_TRAIN_OVERRIDES = {
    "seed": "seed", "epochs": "epochs", "batch_size": "batch_size", "eta": "eta", "rho": "rho",
    "k": "k", "tau": "tau", "omega": "omega", "neighbor_source": "neighbor_source",
    "shared_layer": "shared_layer",
}


def _base_config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _event(out: Path, record: dict) -> None:
    with open(out / "log.ndjson", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    config = _base_config(args.config)
    for flag, fieldname in _TRAIN_OVERRIDES.items():
        value = getattr(args, flag)
        if value is not None:
            setattr(config, fieldname, value)
    if args.lr is not None:
        config.optimizer.lr = args.lr
    config.validate()
    datasets = load_datasets(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is None:
        (out / "log.ndjson").write_text("")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    _event(out, {"event": "start", "command": "train", "config_hash": config.digest(),
                 "resume_epoch": resume.epoch if resume else None})
    result = train(config, out, resume, datasets)
    final = result.records[-1]["eval"] if result.records else None
    _event(out, {"event": "end", "command": "train", "epochs": result.trainer.epoch, "eval": final})
    print(json.dumps({"out": str(out), "epochs": result.trainer.epoch, "eval": final}, sort_keys=True))
    return EXIT_OK


def _restore(args):
    out = Path(args.out)
    path = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.fgc"
    ckpt = load_checkpoint(path)
    config = RunConfig.from_dict(ckpt.config)
    if args.config:
        config.dataset = load_config(args.config).dataset
    train_set, test_set = load_datasets(config)
    trainer = Trainer.from_checkpoint(ckpt, config, (train_set, test_set))
    dataset = train_set if args.split == "train" else test_set
    return out, path, trainer, dataset


def cmd_eval(args) -> int:
    out, path, trainer, dataset = _restore(args)
    metrics = evaluate(trainer.net, dataset, trainer.config.eval_batch_size, args.force_open)
    record = {"event": "eval", "checkpoint": str(path), "split": args.split,
              "epoch": trainer.epoch, **metrics}
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    _event(out, record)
    print(json.dumps(record, sort_keys=True))
    return EXIT_OK


def cmd_analyze(args) -> int:
    out, path, trainer, dataset = _restore(args)
    bundle = analyze(trainer.net, dataset, out, args.layers, args.queries, args.seed)
    _event(out, {"event": "analyze", "checkpoint": str(path), "split": args.split,
                 "nmi": bundle["nmi"], "pruning_ratio": bundle["pruning"]["pruning_ratio"]})
    print(json.dumps({"nmi": bundle["nmi"], "pruning": bundle["pruning"]}, sort_keys=True))
    return EXIT_OK


def cmd_export(args) -> int:
    config = _base_config(args.config)
    if args.seed is not None:
        config.dataset.seed = args.seed
    train_set, test_set = load_datasets(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for ds, prefix in ((train_set, "train"), (test_set, "t10k")):
        img, lab = out / f"{prefix}-images-idx3-ubyte", out / f"{prefix}-labels-idx1-ubyte"
        write_idx(ds, img, lab)
        files[prefix] = [str(img), str(lab)]
    _event(out, {"event": "export-dataset", "files": files, "n_train": len(train_set),
                 "n_test": len(test_set)})
    print(json.dumps(files, sort_keys=True))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze, "export-dataset": cmd_export}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"fgcprune: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FGCError, OSError) as exc:
        print(f"fgcprune: error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
