# BSD 3-Clause License
#
# Copyright (c) 2025, Spill-Tea
#
# Redistribution and use in source and binary forms, with or without
# modification, are permitted provided that the following conditions are met:
#
# 1. Redistributions of source code must retain the above copyright notice, this
#    list of conditions and the following disclaimer.
#
# 2. Redistributions in binary form must reproduce the above copyright notice,
#    this list of conditions and the following disclaimer in the documentation
#    and/or other materials provided with the distribution.
#
# 3. Neither the name of the copyright holder nor the names of its
#    contributors may be used to endorse or promote products derived from
#    this software without specific prior written permission.
#
# THIS SOFTWARE IS PROVIDED BY THE COPYRIGHT HOLDERS AND CONTRIBUTORS "AS IS"
# AND ANY EXPRESS OR IMPLIED WARRANTIES, INCLUDING, BUT NOT LIMITED TO, THE
# IMPLIED WARRANTIES OF MERCHANTABILITY AND FITNESS FOR A PARTICULAR PURPOSE ARE
# DISCLAIMED. IN NO EVENT SHALL THE COPYRIGHT HOLDER OR CONTRIBUTORS BE LIABLE
# FOR ANY DIRECT, INDIRECT, INCIDENTAL, SPECIAL, EXEMPLARY, OR CONSEQUENTIAL
# DAMAGES (INCLUDING, BUT NOT LIMITED TO, PROCUREMENT OF SUBSTITUTE GOODS OR
# SERVICES; LOSS OF USE, DATA, OR PROFITS; OR BUSINESS INTERRUPTION) HOWEVER
# CAUSED AND ON ANY THEORY OF LIABILITY, WHETHER IN CONTRACT, STRICT LIABILITY,
# OR TORT (INCLUDING NEGLIGENCE OR OTHERWISE) ARISING IN ANY WAY OUT OF THE USE
# OF THIS SOFTWARE, EVEN IF ADVISED OF THE POSSIBILITY OF SUCH DAMAGE.

"""Command line interface.

.. code-block:: text

    atroseg synth --out data --count 200 --size 64 --seed 0
    atroseg train --config run.cfg --data data --out runs/demo
    atroseg eval --model runs/demo/stage1.ckpt runs/demo/stage2.ckpt --data data
    atroseg predict --model runs/demo/stage1.ckpt --image x.pgm --out mask.pgm
    atroseg gradcheck --seed 0
    atroseg report runs/demo/stages.csv

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error,
3 training divergence.
"""

import argparse
import csv
import logging
import os
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Optional, TextIO

import numpy as np

from . import __version__, config, data, gradcheck, pipeline, segnet
from .errors import (
    EXIT_OK,
    EXIT_USAGE,
    EXIT_VERIFICATION,
    AtrosegError,
    ContractError,
)
from .metrics import MetricsReport, evaluate_many


__all__ = ["build_parser", "main"]

logger = logging.getLogger(__name__)

THREADS_ENV: str = "ATROSEG_THREADS"
LOG_FORMAT: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def worker_count() -> int:
    """Worker pool size from ``ATROSEG_THREADS``, defaulting to the CPU count.

    Raises:
        ContractError: the variable is set but not a positive integer.

    """
    raw: Optional[str] = os.environ.get(THREADS_ENV)
    if raw is None or not raw.strip():
        return os.cpu_count() or 1
    try:
        value: int = int(raw)
    except ValueError as e:
        raise ContractError(f"{THREADS_ENV} must be an integer, got {raw!r}") from e
    if value < 1:
        raise ContractError(f"{THREADS_ENV} must be positive, got {value}")

    return value


def _sample_id(index: int, count: int) -> str:
    return f"case{index:0{max(3, len(str(count)))}d}"


def cmd_synth(args: argparse.Namespace, out: TextIO) -> int:
    """Write ``--count`` phantoms and their manifest to ``--out``."""
    if args.count < 0:
        raise ContractError(f"--count must be non-negative, got {args.count}")
    val_count: int = args.count // 4 if args.val_count is None else args.val_count
    if not 0 <= val_count <= args.count:
        raise ContractError(f"--val-count must lie in [0, {args.count}]")

    samples: list[data.SegmentationSample] = [
        data.synth_phantom(
            np.random.default_rng([args.seed, i]), args.size, _sample_id(i, args.count)
        )
        for i in range(1, args.count + 1)
    ]
    splits: list[str] = ["train"] * (args.count - val_count) + ["val"] * val_count
    manifest: data.DatasetManifest = data.write_dataset(args.out, samples, splits)
    print(f"wrote {len(manifest)} samples to {manifest.root}", file=out)

    return EXIT_OK


def _train_val(
    manifest: data.DatasetManifest,
) -> tuple[data.DatasetManifest, data.DatasetManifest]:
    train: data.DatasetManifest = manifest.select("train")
    val: data.DatasetManifest = manifest.select("val")
    if len(val) == 0:
        cut: int = len(train) - max(1, len(train) // 4)
        val = train.subset(train.ids[cut:])
        train = train.subset(train.ids[:cut])
        logger.info("no validation split; holding out the last %d samples", len(val))

    return train, val


def cmd_train(args: argparse.Namespace, out: TextIO) -> int:
    """Network-wise training as configured; writes checkpoints, logs and config."""
    run: config.RunConfig = (
        config.RunConfig() if args.config is None else config.load(args.config)
    )
    overrides: dict[str, str] = {}
    if args.data is not None:
        overrides["data_dir"] = str(args.data)
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    run = run.replace(**overrides)

    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(run, out_dir / "config.txt")
    manifest: data.DatasetManifest = data.DatasetManifest.read(run.data_dir)

    if run.split_mode == "odd_even":
        samples: list[data.SegmentationSample] = data.load_samples(
            manifest.select("train", "val", "test")
        )
        result: pipeline.CrossEvaluation = pipeline.cross_evaluate(
            samples,
            run.train_config(),
            run.model_config(),
            out_dir,
            run.threshold,
            max_workers=worker_count(),
        )
        for name, report in result.folds:
            report.write_csv(out_dir / f"fold_{name}_report.csv")
        for metric in ("jsc", "dc", "acd", "asd"):
            print(f"{metric} {result.mean(metric)!r}", file=out)
        return EXIT_OK

    train_split, val_split = _train_val(manifest)
    train: list[data.SegmentationSample] = data.load_samples(
        train_split, run.input_size
    )
    val: list[data.SegmentationSample] = data.load_samples(val_split, run.input_size)
    artifacts: list[pipeline.StageArtifact] = pipeline.networkwise_train(
        train, val, run.train_config(), run.model_config(), out_dir
    )
    for artifact in artifacts:
        print(
            f"stage {artifact.stage_index} best_epoch {artifact.best_epoch} "
            f"val_jsc {artifact.val_jsc:.4f} {artifact.checkpoint}",
            file=out,
        )

    return EXIT_OK


def _load_cascade(paths: Sequence[Path]) -> list[segnet.Model]:
    models: list[segnet.Model] = [segnet.load_checkpoint(p) for p in paths]
    pipeline.check_cascade(models)
    return models


def _print_report(report: MetricsReport, out: TextIO, label: str = "") -> None:
    prefix: str = f"{label} " if label else ""
    for metric in ("jsc", "dc", "acd", "asd"):
        mean: Optional[float] = report.mean(metric)
        std: Optional[float] = report.std(metric)
        if mean is None or std is None:
            print(f"{prefix}{metric} undefined", file=out)
            continue
        unit: str = f" {report.unit}" if metric in ("acd", "asd") else ""
        print(f"{prefix}{metric} {mean:.4f} +/- {std:.4f}{unit}", file=out)
    excluded: int = report.excluded("acd")
    if excluded:
        print(f"{prefix}excluded {excluded} samples with undefined distances", file=out)


def _stage_path(path: Path, stage: int) -> Path:
    return path.with_name(f"{path.stem}_stage{stage}{path.suffix}")


def cmd_eval(args: argparse.Namespace, out: TextIO) -> int:
    """Cascade evaluation at native resolution, written as a report CSV."""
    manifest: data.DatasetManifest = data.DatasetManifest.read(args.data)
    if args.split is not None:
        manifest = manifest.select(args.split)
    samples: list[data.SegmentationSample] = data.load_samples(manifest)

    reports: list[MetricsReport]
    if args.oracle:
        reports = [
            evaluate_many(
                ((s.id, s.mask, s.mask) for s in samples),
                spacing=args.spacing,
                max_workers=worker_count(),
            )
        ]
    else:
        if not args.model:
            raise ContractError("--model is required unless --oracle is given")
        reports = pipeline.evaluate_cascade(
            _load_cascade(args.model),
            samples,
            args.threshold,
            args.spacing,
            per_stage=args.per_stage,
            max_workers=worker_count(),
        )

    if len(reports) > 1:
        for stage, report in enumerate(reports, start=1):
            report.write_csv(_stage_path(args.report, stage))
            _print_report(report, out, f"stage{stage}")
    reports[-1].write_csv(args.report)
    _print_report(reports[-1], out)

    best, worst = reports[-1].ranked(2)
    logger.info("best samples %s, worst samples %s", best, worst)

    return EXIT_OK


def cmd_predict(args: argparse.Namespace, out: TextIO) -> int:
    """Predict the mask (and optionally the probability map) of one image."""
    models: list[segnet.Model] = _load_cascade(args.model)
    image: np.ndarray = data.load_image(args.image)
    size: int = models[0].config.input_size

    note: Optional[str] = None
    if image.shape != (size, size):
        note = (
            f"atroseg: input {image.shape[0]}x{image.shape[1]} resized to "
            f"{size}x{size} for inference"
        )
        logger.warning(note)

    prob: np.ndarray = pipeline.cascade_predict(models, image)[-1]
    data.save_mask(prob >= args.threshold, args.out, note)
    if args.prob is not None:
        data.save_probability(prob, args.prob, note)
    print(f"wrote {args.out}", file=out)

    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, out: TextIO) -> int:
    """Finite difference check of every layer type; exit 1 on any failure."""
    results: list[gradcheck.GradcheckResult] = gradcheck.run_gradcheck(
        args.seed, args.corrupt
    )
    for r in results:
        status: str = "ok" if r.passed else "FAIL"
        print(f"{r.layer:<24} {r.error:.3e} {status}", file=out)

    failed: list[str] = [r.layer for r in results if not r.passed]
    if failed:
        print(f"failed layers: {', '.join(failed)}", file=out)
        return EXIT_VERIFICATION

    return EXIT_OK


def _report_stages(
    rows: list[dict[str, str]], out: TextIO, saturation_delta: float
) -> None:
    print("stage  best_epoch  val_jsc   delta", file=out)
    previous: Optional[float] = None
    saturated: Optional[int] = None
    for row in rows:
        jsc: float = float(row["val_jsc"])
        gain: Optional[float] = None if previous is None else jsc - previous
        delta: str = "" if gain is None else f"{gain:+.4f}"
        if gain is not None and saturated is None and gain < saturation_delta:
            saturated = int(row["stage"])
        stage, best_epoch = row["stage"], row["best_epoch"]
        print(f"{stage:>5}  {best_epoch:>10}  {jsc:.4f}  {delta}", file=out)
        previous = jsc
    if saturated is not None:
        print(f"validation saturated at stage {saturated}", file=out)


def cmd_report(args: argparse.Namespace, out: TextIO) -> int:
    """Print stage summaries and evaluation reports.

    A stage saturates when its validation JSC gain falls below the
    ``saturation_delta`` of ``--config`` (or the default), the rule training stops on.
    """
    run: config.RunConfig = (
        config.RunConfig() if args.config is None else config.load(args.config)
    )
    saturation_delta: float = run.train_config().saturation_delta
    for path in args.files:
        with open(path, newline="", encoding="utf_8") as f:
            reader = csv.DictReader(f)
            columns: list[str] = list(reader.fieldnames or ())
            rows: list[dict[str, str]] = list(reader)
        print(f"== {path}", file=out)
        if columns[: len(pipeline.SUMMARY_COLUMNS)] == list(pipeline.SUMMARY_COLUMNS):
            _report_stages(rows, out, saturation_delta)
        elif columns and columns[0] == "sample_id":
            _print_report(MetricsReport.read_csv(path), out)
        else:
            raise ContractError(f"{path}: neither a stage summary nor a metrics report")

    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    """Argument parser of every subcommand."""
    parser = argparse.ArgumentParser(
        prog="atroseg",
        description="Atrous convolution lung segmentation with network-wise training.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate synthetic phantoms")
    synth.add_argument("--out", type=Path, required=True)
    synth.add_argument("--count", type=int, default=200)
    synth.add_argument("--size", type=int, default=64)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--val-count", type=int, default=None)
    synth.set_defaults(handler=cmd_synth)

    train = sub.add_parser("train", help="network-wise training")
    train.add_argument("--config", type=Path, default=None)
    train.add_argument("--data", type=Path, default=None)
    train.add_argument("--out", type=Path, default=None)
    train.set_defaults(handler=cmd_train)

    evaluate = sub.add_parser("eval", help="evaluate a cascade of checkpoints")
    evaluate.add_argument("--model", type=Path, nargs="+", default=[])
    evaluate.add_argument("--data", type=Path, required=True)
    evaluate.add_argument("--spacing", type=float, default=None)
    evaluate.add_argument("--report", type=Path, default=Path("report.csv"))
    evaluate.add_argument("--split", choices=data.SPLITS, default=None)
    evaluate.add_argument("--threshold", type=float, default=0.5)
    evaluate.add_argument("--per-stage", action="store_true")
    evaluate.add_argument(
        "--oracle", action="store_true", help="score ground truth against itself"
    )
    evaluate.set_defaults(handler=cmd_eval)

    predict = sub.add_parser("predict", help="segment one image")
    predict.add_argument("--model", type=Path, nargs="+", required=True)
    predict.add_argument("--image", type=Path, required=True)
    predict.add_argument("--out", type=Path, required=True)
    predict.add_argument("--prob", type=Path, default=None)
    predict.add_argument("--threshold", type=float, default=0.5)
    predict.set_defaults(handler=cmd_predict)

    check = sub.add_parser("gradcheck", help="finite difference gradient suite")
    check.add_argument("--seed", type=int, default=0)
    check.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    check.set_defaults(handler=cmd_gradcheck)

    report = sub.add_parser("report", help="print stage summaries and reports")
    report.add_argument("files", type=Path, nargs="+")
    report.add_argument("--config", type=Path, default=None)
    report.set_defaults(handler=cmd_report)

    return parser


def _configure_logging(verbose: int, quiet: bool) -> None:
    level: int = logging.INFO
    if quiet:
        level = logging.WARNING
    elif verbose:
        level = logging.DEBUG
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def main(argv: Optional[Sequence[str]] = None, out: Optional[TextIO] = None) -> int:
    """Run one command and return its exit code."""
    args: argparse.Namespace = build_parser().parse_args(argv)
    _configure_logging(args.verbose, args.quiet)
    stream: TextIO = sys.stdout if out is None else out

    try:
        return args.handler(args, stream)
    except AtrosegError as e:
        logger.error("%s", e)
        return e.exit_code
    except (OSError, ValueError) as e:
        logger.error("%s", e)
        return EXIT_USAGE
