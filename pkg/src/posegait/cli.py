"""Command-line interface: ``posegait prepare | train | eval | presets``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ConfigError, config_help, load_config, run_preset_names
from .core import LayoutError, SkeletonSequence, build_graph, validate_sequence
from .engine import (
    CheckpointError,
    Trainer,
    TrainingError,
    evaluate,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .evaluation import (
    EvaluationError,
    format_table,
    load_registry,
    rank_k,
    read_embeddings,
    registry_check,
    registry_report,
    rows_to_csv,
    write_embeddings,
)
from .ingest import SUFFIX, FormatError, build_index, read_index, reorder_keypoints, write_index, write_sequence
from .protocols import ProtocolError, get_protocol
from .sampling import SamplerError
from .synthetic import DEFAULT_CONDITIONS, generate_dataset
from .transforms import Pipeline, preset_names

log = logging.getLogger("posegait")

USAGE_ERRORS = (ConfigError, FormatError, LayoutError, ProtocolError, EvaluationError, SamplerError, CheckpointError)


class UsageError(Exception):
    pass


def _parse_mapping(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"--reorder expects comma-separated integers, got {text!r}") from None


def _ensure_writable(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to output directory {out}: {exc.strerror or exc}") from None


def cmd_prepare(args: argparse.Namespace) -> int:
    out = Path(args.out)
    _ensure_writable(out)
    if args.synthetic:
        subjects, views, frames = args.synthetic
        if min(subjects, views, frames) < 1:
            raise UsageError("--synthetic S V T needs positive integers")
        conditions = DEFAULT_CONDITIONS[: args.conditions] if args.conditions <= 6 else tuple(
            f"nm-{i + 1:02d}" for i in range(args.conditions)
        )
        index = generate_dataset(out, subjects, views, frames, args.seed, conditions, args.layout, args.protocol)
        print(f"wrote {len(index)} sequences ({subjects} subjects, {views} views) to {out}")
        return 0
    if not args.source:
        raise UsageError("prepare needs --synthetic S V T or --source DIR")
    src = Path(args.source)
    files = sorted(src.glob("*/*/*/*.npy"))
    if not files:
        raise UsageError(f"no subject/condition/view/*.npy arrays under {src}")
    graph = build_graph(args.layout)
    mapping = _parse_mapping(args.reorder) if args.reorder else None
    for f in files:
        subject, condition, view = f.relative_to(src).parts[:3]
        try:
            data = np.load(f)
        except (OSError, ValueError) as exc:
            raise UsageError(f"{f}: cannot read array ({exc})") from None
        seq = SkeletonSequence(data, subject, condition, view, graph.layout_id)
        if mapping is not None:
            seq = reorder_keypoints(seq, mapping)
        problems = validate_sequence(seq, graph)
        if problems:
            raise UsageError(f"{f}: " + "; ".join(problems))
        dest = out / subject / condition / view
        dest.mkdir(parents=True, exist_ok=True)
        write_sequence(seq, dest / (f.stem + SUFFIX))
    index = build_index(out, args.protocol, graph.layout_id)
    write_index(index)
    print(f"wrote {len(index)} sequences to {out}")
    return 0


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(r for r in rows if int(r["step"]) < step)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    _ensure_writable(cfg.output_dir)
    trainer = Trainer(cfg)
    if args.resume:
        load_checkpoint(args.resume, trainer)
        _truncate_log(cfg.log_path, trainer.step)
        print(f"resumed from {args.resume} at step {trainer.step}")
    (cfg.output_dir / "effective.yaml").write_text(cfg.dump())
    records = trainer.fit(args.steps, cfg.log_path, cfg.checkpoint_every)
    save_checkpoint(trainer, cfg.checkpoint_path)
    if records:
        print(f"step {trainer.step}: final loss {records[-1]['loss']:.6f}")
    print(f"log: {cfg.log_path}\ncheckpoint: {cfg.checkpoint_path}")
    return 0


def _rank_rows(result) -> list[list[str]]:
    pct = result.percent()
    return [["rank"] + [f"rank-{k}" for k in pct], ["accuracy (%)"] + [f"{v:.2f}" for v in pct.values()]]


def cmd_eval(args: argparse.Namespace) -> int:
    status = 0
    did_something = False
    out = Path(args.out) if args.out else None
    if out is not None:
        _ensure_writable(out)
    if args.gallery or args.probe:
        if not (args.gallery and args.probe):
            raise UsageError("--gallery and --probe must be given together")
        ranks = tuple(args.ranks)
        result = rank_k(read_embeddings(args.gallery), read_embeddings(args.probe), ranks, not args.include_same_view)
        rows = _rank_rows(result)
        print(format_table(rows))
        if out is not None:
            (out / "ranks.csv").write_text(rows_to_csv(rows))
        did_something = True
    if args.checkpoint:
        if not args.index:
            raise UsageError("--checkpoint requires --index")
        model, cfg = model_from_checkpoint(args.checkpoint)
        protocol = get_protocol(args.protocol) if args.protocol else cfg.protocol
        index = read_index(args.index, protocol)
        pipeline = Pipeline(cfg.transforms.without_augmentation(), build_graph(index.layout_id))
        emb, result, grid = evaluate(model, index, pipeline)
        rows = _rank_rows(result)
        print(format_table(rows))
        if result.n_dropped:
            print(f"{result.n_dropped} probe(s) without cross-view gallery were not scored")
        if grid is not None:
            print()
            print(grid.to_text())
        if out is not None:
            (out / "ranks.csv").write_text(rows_to_csv(rows))
            if grid is not None:
                (out / "grid.csv").write_text(grid.to_csv())
            write_embeddings(emb, out / "embeddings.pem")
        did_something = True
    if args.check_registry:
        findings = registry_check(load_registry(args.registry))
        print(registry_report(findings))
        flagged = [f for f in findings if not f.ok]
        print(f"{len(findings) - len(flagged)}/{len(findings)} checks passed")
        if flagged:
            status = 1
        did_something = True
    if not did_something:
        raise UsageError("nothing to do: give --checkpoint/--index, --gallery/--probe or --check-registry")
    return status


def cmd_presets(args: argparse.Namespace) -> int:
    print("run configs (pass the name to `posegait train`):")
    for name in run_preset_names():
        print(f"  {name}")
    print("transform presets (value of the `transforms` key):")
    for name in preset_names():
        print(f"  {name}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posegait", description="Pose-based gait recognition toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="write a PSG1 dataset tree and its index")
    p.add_argument("out", help="output directory")
    p.add_argument("--synthetic", nargs=3, type=int, metavar=("S", "V", "T"), help="generate S subjects x V views x T frames")
    p.add_argument("--conditions", type=int, default=6, help="walks per subject and view (synthetic)")
    p.add_argument("--source", help="tree of subject/condition/view/*.npy arrays (T x V x C)")
    p.add_argument("--reorder", help="keypoint permutation applied to source data, e.g. 0,2,1,...")
    p.add_argument("--layout", default="coco17", help="keypoint layout id")
    p.add_argument("--protocol", default="synthetic", help="protocol recorded in the index")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser(
        "train",
        help="train a model from a run config",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config keys:\n" + config_help() + "\n\nenvironment: POSEGAIT_DATA and POSEGAIT_OUTPUT override data.index and output.dir",
    )
    p.add_argument("config", help="YAML run config or bundled run config name")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--steps", type=int, help="train at most this many more steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank-k evaluation and registry checks")
    p.add_argument("--checkpoint")
    p.add_argument("--index", help="index file or dataset directory")
    p.add_argument("--protocol", help="override the protocol stored in the checkpoint config")
    p.add_argument("--gallery", help="PEM1 embedding file")
    p.add_argument("--probe", help="PEM1 embedding file")
    p.add_argument("--ranks", type=int, nargs="+", default=[1, 5, 10])
    p.add_argument("--include-same-view", action="store_true", help="do not exclude identical-view gallery entries")
    p.add_argument("--out", help="directory for CSV reports and exported embeddings")
    p.add_argument("--check-registry", action="store_true", help="verify the published-results registry")
    p.add_argument("--registry", help="registry YAML (default: the bundled transcription)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("presets", help="list bundled run configs and transform presets")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
