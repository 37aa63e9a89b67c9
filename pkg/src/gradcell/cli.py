"""Command-line entry point: ``gradcell <subcommand>``.

Exit codes: 0 success, 1 validation error, 2 numerical failure,
3 gradient-equivalence failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import memory
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .dac import verification_config, verify_gradient_equivalence
from .downstream import (Dataset, EvalReport, TaskSpec, classification_report, fine_tune,
                         load_downstream, predict, regression_report, split_indices)
from .encoder import EncoderConfig
from .errors import GradcellError, NumericalError, ReplayError
from .preprocess import (BinSpec, ingest_count_matrix, load_profiles, profiles_from_counts,
                         read_labels, read_table, save_profiles)
from .trainer import pretrain

log = logging.getLogger("gradcell")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_EQUIVALENCE = 0, 1, 2, 3


def _seed(arg):
    if arg is not None:
        return arg
    env = os.environ.get("GRADCELL_SEED")
    return int(env) if env else None


def _floats(text):
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text):
    return tuple(int(x) for x in text.split(",") if x.strip())


def cmd_preprocess(args):
    matrix = ingest_count_matrix(args.input, args.format)
    spec = BinSpec(_floats(args.bins)) if args.bins else BinSpec()
    labels = read_labels(args.labels, matrix.n_cells) if args.labels else None
    profiles = profiles_from_counts(matrix, labels, args.max_len)
    save_profiles(args.output, profiles, matrix.n_genes, spec)
    log.info("wrote %d profiles over %d genes to %s", len(profiles), matrix.n_genes, args.output)
    return EXIT_OK


def _run_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    seed = _seed(getattr(args, "seed", None))
    if seed is not None:
        cfg.train.seed = seed
    return cfg


def cmd_pretrain(args):
    cfg = _run_config(args)
    profiles, n_genes, spec = load_profiles(args.data)
    if n_genes != cfg.encoder.n_genes:
        log.error("corpus has %d genes but config n_genes = %d", n_genes, cfg.encoder.n_genes)
        return EXIT_INVALID
    if spec.edges != cfg.encoder.bin_edges:
        log.error("corpus bin edges %s differ from config bin_edges %s", spec.edges,
                  cfg.encoder.bin_edges)
        return EXIT_INVALID
    records = pretrain(profiles, cfg, args.out, resume=args.resume, stop_after=args.stop_after)
    if records:
        log.info("finished step %d, loss %.6f", records[-1]["step"], records[-1]["loss"])
    return EXIT_OK


def cmd_verify(args):
    if args.config:
        enc = load_config(args.config).encoder
        enc = EncoderConfig(**{**enc.to_dict(), "precision": "float64"})
    else:
        enc = verification_config()
    hook = (lambda s: s.derive("desync")) if args.break_replay else None
    seed = _seed(args.seed) or 0
    try:
        report = verify_gradient_equivalence(enc, args.batch, _ints(args.chunks), seed,
                                             tau=args.tau, threshold=args.threshold,
                                             replay_hook=hook)
    except ReplayError as exc:
        log.error("replay check failed: %s", exc)
        return EXIT_EQUIVALENCE
    for line in report.lines():
        print(line)
    if report.pairwise_max_rel_diff > args.pairwise_threshold:
        log.error("schedules disagree by %.3e", report.pairwise_max_rel_diff)
        return EXIT_EQUIVALENCE
    return EXIT_OK if report.passed else EXIT_EQUIVALENCE


def cmd_memplan(args):
    if args.model_preset == "reference":
        model, enc = memory.reference_preset()
    else:
        enc = load_config(args.config).encoder if args.config else EncoderConfig()
        model = memory.engine_memory_model(enc)
    budget = memory.parse_bytes(args.budget) if args.budget else model.budget_bytes
    if args.seq_len:
        print(f"{'seq_len':>8} {'max_mini_batch':>15} {'est_GiB':>9}")
        for length in _ints(args.seq_len):
            mb = memory.max_mini_batch_for_budget(model, budget, length, enc)
            est = memory.memory_estimator(model, length, max(mb, 1), enc) / memory.GIB
            print(f"{length:>8d} {mb:>15d} {est:>9.3f}")
        return EXIT_OK
    minis = _ints(args.mini_batch) if args.mini_batch else (1, 2, 4, 8, 16, 32, 64, 128, 256)
    print(f"{'mini_batch':>10} {'max_len':>8} {'tokens':>8} {'est_GiB':>9}")
    for mb in minis:
        length = memory.max_len_for_budget(model, budget, mb, enc)
        est = memory.memory_estimator(model, max(length, 1), mb, enc) / memory.GIB
        print(f"{mb:>10d} {length:>8d} {mb * length:>8d} {est:>9.3f}")
    return EXIT_OK


def _dataset(args, task_kind):
    if args.data.endswith(".jsonl"):
        profiles, _, _ = load_profiles(args.data)
    else:
        matrix = ingest_count_matrix(args.data, args.format)
        profiles = profiles_from_counts(matrix)
    labels = read_labels(args.labels, len(profiles))
    if task_kind == "drug_line":
        labels = [float(x) for x in labels]
    groups = read_labels(args.groups, len(profiles)) if args.groups else None
    drug = read_table(args.drug_features, rows=len(profiles)).astype(np.float64) \
        if args.drug_features else None
    return Dataset(profiles, labels, groups, drug)


def _write_predictions(path, idx, y_true, y_pred):
    with open(path, "w") as fh:
        fh.write("cell_index\ty_true\ty_pred\n")
        for i, a, b in zip(idx, y_true, y_pred):
            fh.write(f"{i}\t{a}\t{b}\n")


def cmd_finetune(args):
    encoder, _, _ = load_checkpoint(args.checkpoint)
    seed = _seed(args.seed) or 0
    ds = _dataset(args, args.task)
    classes = tuple(sorted(set(ds.labels))) if args.task != "drug_line" else ()
    task = TaskSpec(kind=args.task, class_names=classes, freeze_encoder=not args.unfreeze,
                    epochs=args.epochs, lr=args.lr, split=_floats(args.split), seed=seed,
                    hidden=_ints(args.hidden))
    if args.task == "drug_line" and ds.drug_features is not None:
        w = ds.drug_features.shape[1]
        task.drug_width = w
        task.fusion_widths = (task.cell_widths[-1] + w,) + tuple(task.fusion_widths[1:])
    model, report, te, preds = fine_tune(task, ds, encoder)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.ckpt")
    (out / "report.txt").write_text(report.to_text())
    if task.is_regression:
        _write_predictions(out / "predictions.tsv", te, np.asarray(ds.labels)[te], preds)
    else:
        names = np.asarray(task.class_names)
        _write_predictions(out / "predictions.tsv", te, np.asarray(ds.labels)[te], names[preds])
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _read_predictions(path):
    idx, yt, yp = [], [], []
    with open(path) as fh:
        next(fh)
        for line in fh:
            if line.strip():
                i, a, b = line.rstrip("\n").split("\t")
                idx.append(int(i))
                yt.append(a)
                yp.append(b)
    return idx, yt, yp


def cmd_eval(args):
    if args.predictions:
        _, yt, yp = _read_predictions(args.predictions)
        if args.task == "drug_line":
            report = regression_report([float(x) for x in yt], [float(x) for x in yp])
        else:
            report = classification_report(yt, yp)
    else:
        model = load_downstream(args.checkpoint)
        ds = _dataset(args, model.task.kind)
        _, _, te = split_indices(len(ds.profiles), model.task.split, model.task.seed, ds.groups)
        preds = predict(model, ds.profiles, te, ds.drug_features)
        if model.task.is_regression:
            report = regression_report(np.asarray(ds.labels)[te], preds)
        else:
            names = np.asarray(model.task.class_names)
            report = classification_report(np.asarray(ds.labels)[te], names[preds])
    if args.out:
        Path(args.out).write_text(report.to_text())
    sys.stdout.write(report.to_text())
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors (exit 1), not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="gradcell", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", help="normalise and sparsify a count matrix")
    s.add_argument("--input", required=True)
    s.add_argument("--format", default="mtx", choices=("mtx", "dense"))
    s.add_argument("--output", required=True)
    s.add_argument("--bins", default="", help="comma-separated bin edges")
    s.add_argument("--labels", help="cell_index<TAB>label sidecar")
    s.add_argument("--max-len", type=int, default=None)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("pretrain", help="run the pre-training loop")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.add_argument("--seed", type=int)
    s.add_argument("--stop-after", type=int, default=None)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("verify", help="check DAC gradients against end-to-end gradients")
    s.add_argument("--config")
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--chunks", default="1,2,4,8,16")
    s.add_argument("--seed", type=int)
    s.add_argument("--tau", type=float, default=0.05)
    s.add_argument("--threshold", type=float, default=1e-6)
    s.add_argument("--pairwise-threshold", type=float, default=1e-9)
    s.add_argument("--break-replay", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("memplan", help="max sequence length / mini-batch under a memory budget")
    s.add_argument("--budget", default="40GB")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--mini-batch")
    g.add_argument("--seq-len")
    s.add_argument("--model-preset", default="reference", choices=("reference", "engine"))
    s.add_argument("--config")
    s.set_defaults(func=cmd_memplan)

    for name, func in (("finetune", cmd_finetune), ("eval", cmd_eval)):
        s = sub.add_parser(name)
        s.add_argument("--task", default="annotation", choices=("annotation", "drug_sc", "drug_line"))
        s.add_argument("--checkpoint")
        s.add_argument("--data")
        s.add_argument("--format", default="mtx", choices=("mtx", "dense"))
        s.add_argument("--labels")
        s.add_argument("--groups")
        s.add_argument("--drug-features")
        s.add_argument("--split", default="0.8,0.1,0.1")
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        if name == "finetune":
            s.add_argument("--epochs", type=int, default=30)
            s.add_argument("--lr", type=float, default=1e-3)
            s.add_argument("--hidden", default="128")
            s.add_argument("--unfreeze", action="store_true")
        else:
            s.add_argument("--predictions")
        s.set_defaults(func=func)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "finetune" and (not args.checkpoint or not args.data or not args.labels
                                       or not args.out):
        parser.error("finetune needs --checkpoint, --data, --labels and --out")
    if args.command == "eval" and not args.predictions and not (args.checkpoint and args.data
                                                               and args.labels):
        parser.error("eval needs --predictions, or --checkpoint with --data and --labels")
    try:
        return args.func(args)
    except NumericalError as exc:
        log.error("%s", exc)
        return EXIT_NUMERICAL
    except ReplayError as exc:
        log.error("%s", exc)
        return EXIT_EQUIVALENCE
    except (GradcellError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
