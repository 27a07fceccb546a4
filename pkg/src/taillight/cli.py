"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .dataset import DatasetError, class_counts_from_config, generate_dataset, read_dataset, scene_from_config
from .imageio import MalformedImageError
from .preprocess import make_chunks
from .states import CLASS_CODES, UnknownClassError
from .temporal import predicted_class
from .training import DivergenceError, StageOrderError, chunk_index, infer_logits, prepare_split, stage_path, \
    train_progressive

log = logging.getLogger("taillight")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ERRORS = (DatasetError, CheckpointError, StageOrderError, MalformedImageError, UnknownClassError, OSError)
NUMERIC_ERRORS = (DivergenceError, NonFiniteError, FloatingPointError)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, *extra: str) -> None:
    p.add_argument("--config", type=Path, help="key = value config file (defaults built in)")
    p.add_argument("--seed", type=int, help="override the config seed")
    if "split-l" in extra:
        p.add_argument("--split-l", type=int, help="stage whose output feeds spatial attention")
    if "dataset" in extra:
        p.add_argument("--dataset", type=Path, required=True, help="dataset root (with manifest.csv)")
    if "checkpoint" in extra:
        p.add_argument("--checkpoint", type=Path, help="checkpoint file")
    p.add_argument("--out", type=Path, help="output path")


def build_parser() -> Parser:
    parser = Parser(prog="taillight", description="Taillight state recognition with spatial and temporal attention.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=Parser)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    _common(p)

    p = sub.add_parser("train", help="run the progressive schedule (or one stage)")
    _common(p, "dataset", "split-l", "checkpoint")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), help="train only this stage (needs the previous one)")

    p = sub.add_parser("eval", help="accuracy report for a checkpoint")
    _common(p, "dataset", "checkpoint")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--stride", type=int, help="chunk stride (default: eval_stride from the checkpoint config)")

    p = sub.add_parser("infer", help="per-chunk predictions for one sequence or a whole split")
    _common(p, "dataset", "checkpoint")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--sequence", help="sequence path relative to the dataset root")
    p.add_argument("--stride", type=int)

    p = sub.add_parser("export-attn", help="write attention maps for one chunk")
    _common(p, "dataset", "checkpoint")
    p.add_argument("--sequence", help="sequence path relative to the dataset root (default: first test sequence)")
    p.add_argument("--start", type=int, default=0, help="first frame of the chunk")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--probes", type=int, default=24, help="probes per check")

    p = sub.add_parser("ablate", help="layer-split sweep or stage comparison")
    _common(p, "dataset", "split-l")
    p.add_argument("--what", choices=("layers", "stages"), default="stages")
    p.add_argument("--seeds", type=int, default=1, help="seeds for the stage comparison")
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "split_l", None) is not None:
        over["split_l"] = args.split_l
    return cfg.replace(**over) if over else cfg


def _need(args, name: str) -> Path:
    value = getattr(args, name)
    if value is None:
        raise UsageError(f"{args.command}: --{name.replace('_', '-')} is required")
    return value


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _need(args, "out")
    scene = scene_from_config(cfg.data)
    m = generate_dataset(out, class_counts_from_config(cfg.data), scene, cfg.train.seed,
                         length=cfg.data.seq_length, window_length=cfg.train.window)
    print(f"wrote {len(m.records)} sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _need(args, "out")
    dataset = read_dataset(args.dataset)
    stages = (args.stage,) if args.stage else (1, 2, 3)
    prev = load_checkpoint(args.checkpoint) if args.checkpoint else None
    if prev is None and stages[0] > 1 and not stage_path(out, stages[0] - 1).exists():
        raise StageOrderError(f"stage {stages[0]} needs a stage {stages[0] - 1} checkpoint "
                              f"(pass --checkpoint or put {stage_path(out, stages[0] - 1).name} in --out)")
    ckpt, metrics = train_progressive(cfg, dataset, out, stages, prev=prev)
    print(f"stage {ckpt.stage} checkpoint: {stage_path(out, ckpt.stage)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate
    ckpt = load_checkpoint(_need(args, "checkpoint"))
    report = evaluate(ckpt, read_dataset(args.dataset), args.split, args.stride)
    print(report.format())
    if args.out:
        report.write_csv(args.out)
    return EXIT_OK


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(_need(args, "checkpoint"))
    from .evaluation import as_tensors
    cfg = ckpt.config
    dataset = read_dataset(args.dataset)
    seqs = prepare_split(dataset, args.split, cfg)
    if args.sequence:
        seqs = [s for s in seqs if s.source_id == args.sequence]
        if not seqs:
            raise DatasetError(f"no sequence {args.sequence!r} in split {args.split}")
    index = chunk_index(seqs, cfg.train.window, args.stride or cfg.train.eval_stride)
    logits = infer_logits(as_tensors(ckpt.params), cfg, ckpt.stage, seqs, index)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("sequence", "start", "label", "predicted") + CLASS_CODES)
        for (i, s), row in zip(index, logits):
            w.writerow([seqs[i].source_id, s, seqs[i].label.code, CLASS_CODES[int(predicted_class(row))]]
                       + [f"{v:.6g}" for v in row])
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def cmd_export_attn(args) -> int:
    from .evaluation import export_attention
    ckpt = load_checkpoint(_need(args, "checkpoint"))
    out = _need(args, "out")
    cfg = ckpt.config
    dataset = read_dataset(args.dataset)
    records = dataset.split("test") or dataset.split("train")
    if args.sequence:
        records = [r for r in dataset.manifest.records if r.path == args.sequence]
    if not records:
        raise DatasetError(f"sequence {args.sequence!r} not found in {args.dataset}")
    seq = dataset.sequence(records[0])
    chunks = [c for c in make_chunks(seq, cfg.train.window, 1, cfg.train.align_mode, cfg.train.max_shift,
                                     cfg.model.backbone.input_side) if c.origin[1] == args.start]
    if not chunks:
        raise DatasetError(f"no {cfg.train.window}-frame chunk starts at frame {args.start} of {seq.source_id}")
    trace = export_attention(ckpt, chunks[0], out)
    print(f"{seq.source_id}@{args.start}: label {seq.label.code}, predicted {CLASS_CODES[trace.predicted]}; "
          f"maps in {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_results, run_suite
    cfg = _config(args)
    results = run_suite(cfg, probes=args.probes, seed=cfg.train.seed)
    print(format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_ablate(args) -> int:
    from .evaluation import evaluate, layer_ablation, write_stage_comparison
    cfg = _config(args)
    out = _need(args, "out")
    dataset = read_dataset(args.dataset)
    if args.what == "layers":
        rows = layer_ablation(cfg, dataset, out)
        for r in rows:
            print(f"split_l={r['split_l']} grid={r['grid']}x{r['grid']}: chunk {r['chunk_accuracy']:.2f}%")
        return EXIT_OK
    train = prepare_split(dataset, "train", cfg)
    test = prepare_split(dataset, "test", cfg)
    results: dict[int, list[float]] = {1: [], 2: [], 3: []}
    for k in range(args.seeds):
        run_cfg = cfg.replace(seed=cfg.train.seed + k)
        run_dir = Path(out) / f"seed{run_cfg.train.seed}"
        train_progressive(run_cfg, dataset, run_dir, train_seqs=train, test_seqs=test)
        for stage in (1, 2, 3):
            rep = evaluate(load_checkpoint(stage_path(run_dir, stage)), dataset, seqs=test)
            results[stage].append(rep.chunk_accuracy)
    write_stage_comparison(Path(out) / "stage_comparison.csv", results)
    for stage, accs in results.items():
        print(f"stage {stage}: median chunk accuracy {np.median(accs):.2f}%")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
    "export-attn": cmd_export_attn, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
