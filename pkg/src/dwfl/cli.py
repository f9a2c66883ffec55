"""Command line entry point: ``dwfl {run,synth,inspect,activations}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_dataset, load_model, read_weights, save_dataset
from .config import ExperimentConfig, load_config, serialize_config
from .encoding import write_fasta
from .errors import DWFLError
from .experiment import StageError, export_activations, load_data, run_experiment, split_for
from .federation import AggregationStrategy
from .synthetic import generate_synthetic_records

logger = logging.getLogger("dwfl")


def _common_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=default, help="experiment config file")
    parser.add_argument("--out", metavar="DIR", default=default, help="output directory")
    parser.add_argument("--seed-override", metavar="N", type=int, default=default,
                        help="run a single seed instead of the configured list")
    parser.add_argument("--strategy", metavar="TAG", action="append", default=default,
                        help="aggregation strategy (repeatable); overrides the config list")
    parser.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dwfl", description="Dynamic weighted federated learning simulator")
    _common_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every strategy x seed and write metric tables")
    _common_flags(p, suppress=True)

    p = sub.add_parser("synth", help="write the configured synthetic corpus as FASTA + manifest")
    _common_flags(p, suppress=True)

    p = sub.add_parser("inspect", help="summarize a checkpoint, round log or metric table")
    _common_flags(p, suppress=True)
    p.add_argument("paths", nargs="+", metavar="PATH")

    p = sub.add_parser("activations", help="export penultimate-layer activations to CSV")
    _common_flags(p, suppress=True)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--subset", choices=("all", "test"), default="all",
                   help="rows to export; 'test' uses the split of the first seed")
    p.add_argument("--dataset", metavar="PATH", help="encoded dataset cache to use instead of the config")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    exp = config.experiment
    if args.out:
        exp = dataclasses.replace(exp, output_dir=args.out)
    if args.seed_override is not None:
        exp = dataclasses.replace(exp, seeds=(args.seed_override,))
    if args.strategy:
        exp = dataclasses.replace(exp, strategies=tuple(AggregationStrategy.parse(s).value for s in args.strategy))
    return config.replace(experiment=exp)


def cmd_run(args) -> int:
    config = _resolve_config(args)
    result = run_experiment(config)
    out = Path(config.experiment.output_dir)
    (out / "config.ini").write_text(serialize_config(config))
    print(f"{'strategy':<10} {'accuracy':>9} {'f1_weig':>9} {'f1_macro':>9} {'auc':>9} {'train_s':>9}")
    for strategy, rep in result.reports.items():
        print(f"{strategy:<10} {rep.accuracy:9.4f} {rep.f1_weighted:9.4f} {rep.f1_macro:9.4f} "
              f"{rep.roc_auc_macro_ovr:9.4f} {rep.train_seconds:9.4f}")
    print(f"artifacts written to {out}")
    return 0


def cmd_synth(args) -> int:
    config = _resolve_config(args)
    spec = config.synthetic
    out = Path(config.experiment.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = generate_synthetic_records(spec)
    manifest = []
    for name in spec.class_names():
        fasta = out / f"{name}.fasta"
        write_fasta(fasta, [r for r in records if r.host_label == name])
        manifest.append(f"{name}\t{fasta.name}")
    (out / "manifest.tsv").write_text("\n".join(manifest) + "\n")
    from .encoding import one_hot_encode

    save_dataset(out / "dataset.dwfl", one_hot_encode(records, spec.alphabet))
    print(f"wrote {len(records)} sequences in {len(manifest)} FASTA files to {out}")
    return 0


def _inspect_one(path: Path) -> None:
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic.startswith(b"DWFLWGT"):
        header, weights = read_weights(path)
        print(f"{path}: weight checkpoint, input_dim={header['input_dim']} "
              f"num_classes={header['num_classes']} parameters={weights.parameter_count()}")
        print(f"  sha256 {weights.checksum()}")
        if header.get("metadata"):
            print(f"  metadata {json.dumps(header['metadata'], sort_keys=True)}")
        for e in weights.entries:
            print(f"  layer {e.layer_index:2d} {e.role:<16} {str(e.shape):<14}")
    elif magic.startswith(b"DWFLDAT"):
        ds = load_dataset(path)
        print(f"{path}: encoded dataset, {len(ds)} rows x {ds.input_dim} features, "
              f"seq_len={ds.seq_len}, alphabet={''.join(ds.alphabet.symbols)!r}")
        for name, count in zip(ds.class_names, ds.class_counts()):
            print(f"  {name:<20} {count}")
    elif path.suffix == ".jsonl":
        for line in path.read_text().splitlines():
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "client":
                beta = "failed" if rec["beta"] is None else f"{rec['beta']:.4f}"
                print(f"  round {rec['round']} client {rec['client_id']}: val_acc={rec['val_accuracy']:.4f} "
                      f"beta={beta} n={rec['n_samples']}")
            elif kind == "round":
                print(f"round {rec['round']} [{rec['strategy']}] failed={rec['n_failed']} "
                      f"checksum={rec['checksum'][:16]}")
            else:
                print(f"  {kind}: {json.dumps(rec, sort_keys=True)}")
    else:
        print(path.read_text(), end="")


def cmd_inspect(args) -> int:
    for p in args.paths:
        path = Path(p)
        if not path.is_file():
            raise FileNotFoundError(f"no such file: {path}")
        _inspect_one(path)
    return 0


def cmd_activations(args) -> int:
    config = _resolve_config(args)
    ds = load_dataset(args.dataset) if args.dataset else load_data(config)
    model = load_model(args.checkpoint, expect_input_dim=ds.input_dim, expect_num_classes=ds.n_classes)
    if args.subset == "test":
        ds = split_for(config, ds, config.experiment.seeds[0]).test
    out = Path(config.experiment.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dest = out / f"activations_{Path(args.checkpoint).stem}.csv"
    export_activations(model, ds, dest)
    print(f"wrote {len(ds)} rows to {dest}")
    return 0


COMMANDS = {"run": cmd_run, "synth": cmd_synth, "inspect": cmd_inspect, "activations": cmd_activations}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose or 0, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except StageError as exc:
        print(f"dwfl {args.command}: error in stage '{exc.stage}': {exc.cause}", file=sys.stderr)
        return 2
    except (DWFLError, OSError) as exc:
        print(f"dwfl {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
