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

"""Stage training, network-wise cascades and cascade evaluation.

Every stage trains a fresh network. Stage 1 sees the image alone; stage k > 1 sees the
image concatenated with the foreground probability map the stage k - 1 network
produced in inference mode. Stages are added until the best validation JSC improves by
less than ``saturation_delta``, or ``max_stages`` is reached.
"""

import csv
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, TypeVar, Union

import numpy as np

from . import nn
from .data import SegmentationSample, resize_sample, split_odd_even
from .errors import ConfigError, ContractError, NonFiniteError, TrainingDivergedError
from .metrics import MetricsReport, binarize, evaluate_many, jaccard
from .optim import OptimizerState, sgd_momentum_step
from .segnet import (
    Model,
    ModelConfig,
    build_model,
    forward,
    model_input,
    predict,
    save_checkpoint,
)
from .tensor import Graph, Tensor


__all__ = [
    "CrossEvaluation",
    "StageArtifact",
    "TrainConfig",
    "adjust",
    "augment",
    "cascade_predict",
    "check_cascade",
    "cross_evaluate",
    "evaluate_cascade",
    "lr_schedule",
    "networkwise_train",
    "train_stage",
    "write_summary",
]

logger = logging.getLogger(__name__)

EPOCH_COLUMNS: tuple[str, ...] = ("epoch", "lr", "train_loss", "val_jsc")
SUMMARY_COLUMNS: tuple[str, ...] = (
    "stage",
    "best_epoch",
    "val_jsc",
    "val_dc",
    "val_acd",
    "val_asd",
)
SUMMARY_FILE: str = "stages.csv"
ImageT = TypeVar("ImageT", np.ndarray, Tensor)


@dataclass(frozen=True)
class TrainConfig:
    """Training recipe of one cascade.

    Args:
        epochs (int): epochs per stage.
        initial_lr (float): learning rate before ``lr_drop_epoch``.
        lr_drop_epoch (int): first epoch trained with ``dropped_lr``.
        dropped_lr (float): learning rate from ``lr_drop_epoch`` on.
        momentum (float): SGD momentum.
        batch_size (int): samples per mini-batch; the last partial batch is kept.
        seed (int): seeds initialization, shuffling and augmentation.
        augment (bool): random brightness and contrast adjustment of training images.
        max_stages (int): cascade length limit.
        saturation_delta (float): minimum validation JSC gain to train another stage.
        contrast_range (tuple[float, float]): uniform contrast factor range.
        brightness_range (tuple[float, float]): uniform brightness offset range.

    Raises:
        ConfigError: when a field is out of range.

    """

    epochs: int = 100
    initial_lr: float = 0.1
    lr_drop_epoch: int = 70
    dropped_lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    augment: bool = True
    max_stages: int = 3
    saturation_delta: float = 0.001
    contrast_range: tuple[float, float] = (0.8, 1.2)
    brightness_range: tuple[float, float] = (-0.2, 0.2)

    def __post_init__(self) -> None:
        checks: list[tuple[str, bool]] = [
            ("epochs", self.epochs >= 1),
            ("initial_lr", self.initial_lr > 0),
            ("lr_drop_epoch", self.lr_drop_epoch >= 0),
            ("dropped_lr", self.dropped_lr > 0),
            ("momentum", 0 <= self.momentum < 1),
            ("batch_size", self.batch_size >= 1),
            ("max_stages", self.max_stages >= 1),
            ("saturation_delta", self.saturation_delta >= 0),
            ("contrast_range", 0 < self.contrast_range[0] <= self.contrast_range[1]),
            ("brightness_range", self.brightness_range[0] <= self.brightness_range[1]),
        ]
        for name, holds in checks:
            if not holds:
                raise ConfigError(f"{name}: out of range in {self}")


@dataclass
class StageArtifact:
    """Outcome of one trained stage.

    Args:
        stage_index (int): 1 based cascade position.
        model (Model): network restored to its best validation epoch.
        checkpoint (Path | None): where the model was saved, if anywhere.
        loss_history (list[float]): mean training loss per epoch.
        val_history (list[float]): mean validation JSC per epoch.
        best_epoch (int): epoch whose weights the model holds.
        cache (dict[str, np.ndarray]): inference mode foreground probability, (H, W)
            float32 in [0, 1], of every training and validation sample.
        val_report (MetricsReport | None): validation metrics of the best epoch.

    """

    stage_index: int
    model: Model
    checkpoint: Optional[Path] = None
    loss_history: list[float] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)
    best_epoch: int = 0
    cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    val_report: Optional[MetricsReport] = None

    @property
    def val_jsc(self) -> float:
        return self.val_history[self.best_epoch]

    def summary_row(self) -> dict[str, object]:
        row: dict[str, object] = {
            "stage": self.stage_index,
            "best_epoch": self.best_epoch,
            "val_jsc": self.val_jsc,
        }
        for metric in ("dc", "acd", "asd"):
            row[f"val_{metric}"] = (
                None if self.val_report is None else self.val_report.mean(metric)
            )

        return row


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Step schedule: ``initial_lr`` before ``lr_drop_epoch``, ``dropped_lr`` after.

    Raises:
        ContractError: negative epoch.

    Examples:
        .. code-block:: python

            lr_schedule(69, TrainConfig())  # 0.1
            lr_schedule(70, TrainConfig())  # 0.01

    """
    if epoch < 0:
        raise ContractError(f"epoch must be non-negative, got {epoch}")

    return config.initial_lr if epoch < config.lr_drop_epoch else config.dropped_lr


def adjust(image: ImageT, contrast: float, brightness: float) -> ImageT:
    """``clip(contrast * (image - 0.5) + 0.5 + brightness, 0, 1)``."""
    values: np.ndarray = image.data if isinstance(image, Tensor) else np.asarray(image)
    out: np.ndarray = np.clip(
        contrast * (values - 0.5) + 0.5 + brightness, 0.0, 1.0
    ).astype(values.dtype)

    return Tensor(out, dtype=out.dtype) if isinstance(image, Tensor) else out


def augment(
    image: ImageT,
    rng: np.random.Generator,
    contrast_range: tuple[float, float] = (0.8, 1.2),
    brightness_range: tuple[float, float] = (-0.2, 0.2),
) -> ImageT:
    """Random brightness and contrast adjustment; masks are never augmented.

    Args:
        image (np.ndarray | Tensor): values in [0, 1].
        rng (np.random.Generator): draws the contrast, then the brightness.
        contrast_range (tuple[float, float]): uniform contrast range.
        brightness_range (tuple[float, float]): uniform brightness range.

    Returns:
        (np.ndarray | Tensor): adjusted image of the input type, within [0, 1].

    """
    contrast: float = rng.uniform(*contrast_range)
    brightness: float = rng.uniform(*brightness_range)

    return adjust(image, contrast, brightness)


def _check_sizes(samples: Sequence[SegmentationSample]) -> tuple[int, int]:
    sizes: set[tuple[int, int]] = {s.size for s in samples}
    if len(sizes) != 1:
        raise ContractError(f"samples must share one size, found {sorted(sizes)}")

    return sizes.pop()


def _sized_config(
    model_config: Optional[ModelConfig], size: tuple[int, int]
) -> ModelConfig:
    height, width = size
    if height != width:
        raise ContractError(f"samples must be square, got {height}x{width}")
    if model_config is None:
        return ModelConfig(input_size=height)
    if model_config.input_size != height:
        raise ContractError(
            f"input_size {model_config.input_size} does not match {height}x{width} "
            "samples"
        )

    return model_config


def _prior(
    samples: Sequence[SegmentationSample],
    cache: Optional[Mapping[str, np.ndarray]],
) -> Optional[Tensor]:
    if cache is None:
        return None
    return Tensor(np.stack([cache[s.id] for s in samples])[:, np.newaxis])


def _images(samples: Sequence[SegmentationSample]) -> Tensor:
    return Tensor(np.stack([s.image for s in samples])[:, np.newaxis])


def _foreground(
    model: Model,
    samples: Sequence[SegmentationSample],
    cache: Optional[Mapping[str, np.ndarray]],
    batch_size: int,
) -> dict[str, np.ndarray]:
    """Inference mode foreground probability of every sample, in chunks."""
    out: dict[str, np.ndarray] = {}
    for start in range(0, len(samples), batch_size):
        chunk: Sequence[SegmentationSample] = samples[start : start + batch_size]
        prob: Tensor = predict(model, _images(chunk), _prior(chunk, cache))
        for i, sample in enumerate(chunk):
            out[sample.id] = np.clip(prob.data[i, 1], 0.0, 1.0).astype(np.float32)

    return out


def _validate(
    model: Model,
    val: Sequence[SegmentationSample],
    cache: Optional[Mapping[str, np.ndarray]],
    batch_size: int,
) -> float:
    probs: dict[str, np.ndarray] = _foreground(model, val, cache, batch_size)
    return float(np.mean([jaccard(binarize(probs[s.id]), s.mask) for s in val]))


def _epoch(
    model: Model,
    train: Sequence[SegmentationSample],
    cache: Optional[Mapping[str, np.ndarray]],
    state: OptimizerState,
    rng: np.random.Generator,
    epoch: int,
    config: TrainConfig,
) -> float:
    """One pass over the shuffled training set; returns the mean loss per sample."""
    order: np.ndarray = rng.permutation(len(train))
    height, width = train[0].size
    total: float = 0.0

    for batch, start in enumerate(range(0, len(train), config.batch_size)):
        indices: np.ndarray = order[start : start + config.batch_size]
        chunk: list[SegmentationSample] = [train[i] for i in indices]
        images: np.ndarray = np.stack([s.image for s in chunk])
        if config.augment:
            images = np.stack(
                [
                    augment(image, rng, config.contrast_range, config.brightness_range)
                    for image in images
                ]
            )
        target = Tensor(np.stack([s.mask for s in chunk])[:, np.newaxis])

        try:
            with Graph() as graph:
                x: Tensor = model_input(
                    model, Tensor(images[:, np.newaxis]), _prior(chunk, cache)
                )
                logits: Tensor = forward(model, x, training=True)
                loss, _ = nn.softmax_cross_entropy(
                    nn.bilinear_resize(logits, height, width), target
                )
            graph.backward(loss)
            sgd_momentum_step(model.trainable, None, state)
        except NonFiniteError as e:
            raise TrainingDivergedError(epoch, batch, state.learning_rate, e.op) from e

        total += loss.item() * len(chunk)

    return total / len(train)


def train_stage(
    train: Sequence[SegmentationSample],
    val: Sequence[SegmentationSample],
    stage_index: int,
    prev: Optional[StageArtifact],
    config: TrainConfig,
    model_config: Optional[ModelConfig] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> StageArtifact:
    """Train one stage from scratch and cache its predictions.

    The model is initialized with seed ``config.seed + stage_index``; shuffling and
    augmentation draw from a PCG64 stream seeded with ``(config.seed, stage_index)``.
    The weights of the epoch with the best mean validation JSC (earliest on ties) are
    kept as the stage model; training always runs every epoch.

    Args:
        train (Sequence[SegmentationSample]): training samples of one common size.
        val (Sequence[SegmentationSample]): validation samples of the same size.
        stage_index (int): 1 based stage.
        prev (StageArtifact | None): previous stage, required iff stage_index > 1.
        config (TrainConfig): recipe.
        model_config (ModelConfig | None): architecture; its in_channels is set from
            the stage. Defaults take their input_size from the samples.
        out_dir (str | Path | None): receives ``stage{k}.ckpt`` and
            ``stage{k}_epochs.csv`` when given.

    Returns:
        (StageArtifact): trained stage.

    Raises:
        ContractError: prev given at stage 1 or missing later, missing cache entries,
            empty sets, mixed or non-square sample sizes, or an input_size other
            than the sample size.
        TrainingDivergedError: an operation produced a non-finite value.

    """
    if stage_index < 1 or (stage_index > 1) != (prev is not None):
        raise ContractError(
            f"stage {stage_index} {'requires' if stage_index > 1 else 'forbids'} "
            "a previous stage artifact"
        )
    if not train or not val:
        raise ContractError("training and validation sets must be non-empty")
    base: ModelConfig = _sized_config(model_config, _check_sizes([*train, *val]))

    cache: Optional[dict[str, np.ndarray]] = None if prev is None else prev.cache
    if cache is not None:
        missing: list[str] = [s.id for s in (*train, *val) if s.id not in cache]
        if missing:
            raise ContractError(
                f"stage {stage_index}: no cached probability for {missing[:5]}"
            )

    model: Model = build_model(
        base.with_in_channels(2 if stage_index > 1 else 1),
        config.seed + stage_index,
        stage_index,
    )
    state: OptimizerState = OptimizerState.create(
        model.trainable, config.momentum, lr_schedule(0, config)
    )
    rng: np.random.Generator = np.random.default_rng([config.seed, stage_index])

    artifact = StageArtifact(stage_index=stage_index, model=model)
    best: dict[str, np.ndarray] = {}
    writer: Optional[csv.DictWriter] = None
    log_file = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log_file = open(
            Path(out_dir) / f"stage{stage_index}_epochs.csv",
            "w",
            newline="",
            encoding="utf_8",
        )
        writer = csv.DictWriter(log_file, EPOCH_COLUMNS, lineterminator="\n")
        writer.writeheader()

    try:
        for epoch in range(config.epochs):
            state.learning_rate = lr_schedule(epoch, config)
            loss: float = _epoch(model, train, cache, state, rng, epoch, config)
            val_jsc: float = _validate(model, val, cache, config.batch_size)
            artifact.loss_history.append(loss)
            artifact.val_history.append(val_jsc)
            if not best or val_jsc > artifact.val_jsc:
                artifact.best_epoch = epoch
                best = {k: v.data.copy() for k, v in model.parameters.items()}
            if writer is not None:
                writer.writerow(
                    {
                        "epoch": epoch,
                        "lr": repr(state.learning_rate),
                        "train_loss": repr(loss),
                        "val_jsc": repr(val_jsc),
                    }
                )
            logger.info(
                "stage %d epoch %d lr %g train_loss %.6f val_jsc %.4f",
                stage_index,
                epoch,
                state.learning_rate,
                loss,
                val_jsc,
            )
    finally:
        if log_file is not None:
            log_file.close()

    for name, values in best.items():
        model.parameters[name].data = values

    artifact.cache = _foreground(model, [*train, *val], cache, config.batch_size)
    artifact.val_report = evaluate_many(
        ((s.id, binarize(artifact.cache[s.id]), s.mask) for s in val),
        spacing=None,
        resolution=f"{val[0].size[0]}x{val[0].size[1]}",
    )
    if out_dir is not None:
        artifact.checkpoint = save_checkpoint(
            model, Path(out_dir) / f"stage{stage_index}.ckpt"
        )

    logger.info(
        "stage %d done: best epoch %d, val_jsc %.4f",
        stage_index,
        artifact.best_epoch,
        artifact.val_jsc,
    )

    return artifact


def _format(value: object) -> str:
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def write_summary(artifacts: Sequence[StageArtifact], path: Union[str, Path]) -> Path:
    """Write one summary row per trained stage."""
    out = Path(path)
    with open(out, "w", newline="", encoding="utf_8") as f:
        writer = csv.DictWriter(f, SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for artifact in artifacts:
            writer.writerow(
                {k: _format(v) for k, v in artifact.summary_row().items()}
            )

    return out


def networkwise_train(
    train: Sequence[SegmentationSample],
    val: Sequence[SegmentationSample],
    config: TrainConfig,
    model_config: Optional[ModelConfig] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> list[StageArtifact]:
    """Train stages 1, 2, ... until validation JSC saturates or ``max_stages``.

    After stage k > 1, training stops when its best validation JSC exceeds that of
    stage k - 1 by less than ``saturation_delta``.

    Returns:
        (list[StageArtifact]): every trained stage, in order. With ``out_dir`` a stage
        summary ``stages.csv`` is written there.

    """
    artifacts: list[StageArtifact] = []
    prev: Optional[StageArtifact] = None
    for stage_index in range(1, config.max_stages + 1):
        artifact: StageArtifact = train_stage(
            train, val, stage_index, prev, config, model_config, out_dir
        )
        artifacts.append(artifact)
        if prev is not None:
            gain: float = artifact.val_jsc - prev.val_jsc
            if gain < config.saturation_delta:
                logger.info(
                    "validation saturated at stage %d (gain %.5f < %g)",
                    stage_index,
                    gain,
                    config.saturation_delta,
                )
                break
        prev = artifact

    if out_dir is not None:
        write_summary(artifacts, Path(out_dir) / SUMMARY_FILE)

    return artifacts


def check_cascade(models: Sequence[Model]) -> None:
    """Verify stage order and input channels of a cascade.

    Raises:
        ContractError: empty cascade, or model i is not stage i + 1 with the channel
            count of its stage.

    """
    if not models:
        raise ContractError("a cascade needs at least one model")
    for position, model in enumerate(models, start=1):
        channels: int = 1 if position == 1 else 2
        if model.stage_index != position or model.config.in_channels != channels:
            raise ContractError(
                f"cascade position {position} holds a stage {model.stage_index} model "
                f"with {model.config.in_channels} input channels"
            )


def cascade_predict(
    models: Sequence[Model],
    image: np.ndarray,
) -> list[np.ndarray]:
    """Foreground probability after every stage of a cascade.

    The image is resized to the models' ``input_size`` when needed. Each stage receives
    the previous stage's probability at that size; every returned map is resized back
    to the image's own size.

    Args:
        models (Sequence[Model]): stage 1, 2, ... models.
        image (np.ndarray): (H, W) image in [0, 1].

    Returns:
        (list[np.ndarray]): one (H, W) float32 map in [0, 1] per stage.

    Raises:
        ContractError: broken stage order or channel counts.

    """
    check_cascade(models)
    height, width = image.shape
    size: int = models[0].config.input_size
    x: Tensor = nn.bilinear_resize(Tensor(image[np.newaxis, np.newaxis]), size, size)
    x = Tensor(np.clip(x.data, 0.0, 1.0))

    outputs: list[np.ndarray] = []
    prior: Optional[Tensor] = None
    for model in models:
        prob: Tensor = predict(model, x, prior)
        prior = Tensor(prob.data[:, 1:2])
        native: Tensor = nn.bilinear_resize(prior, height, width)
        outputs.append(np.clip(native.data[0, 0], 0.0, 1.0).astype(np.float32))

    return outputs


def evaluate_cascade(
    models: Sequence[Model],
    samples: Sequence[SegmentationSample],
    threshold: float = 0.5,
    spacing: Optional[float] = None,
    per_stage: bool = False,
    max_workers: int = 1,
) -> list[MetricsReport]:
    """Evaluate a cascade at each sample's native resolution.

    Returns:
        (list[MetricsReport]): the final stage report, or one report per stage when
        ``per_stage`` is set.

    """
    check_cascade(models)
    predictions: list[list[np.ndarray]] = [
        cascade_predict(models, s.image) for s in samples
    ]
    stages: range = range(len(models) - 1 if not per_stage else 0, len(models))

    return [
        evaluate_many(
            (
                (s.id, binarize(maps[k], threshold), s.mask)
                for s, maps in zip(samples, predictions, strict=True)
            ),
            spacing=spacing,
            max_workers=max_workers,
        )
        for k in stages
    ]


@dataclass
class CrossEvaluation:
    """Two-fold results: odd trained / even tested, then the swap."""

    folds: list[tuple[str, MetricsReport]]
    stages: list[list[StageArtifact]]

    def mean(self, metric: str) -> Optional[float]:
        """Mean of a metric over both folds' test means."""
        means: list[float] = [
            m for _, report in self.folds if (m := report.mean(metric)) is not None
        ]
        return float(np.mean(means)) if means else None


def _train_val(
    fold: Sequence[SegmentationSample],
) -> tuple[list[SegmentationSample], list[SegmentationSample]]:
    cut: int = len(fold) - max(1, len(fold) // 4)
    return list(fold[:cut]), list(fold[cut:])


def cross_evaluate(
    samples: Sequence[SegmentationSample],
    config: TrainConfig,
    model_config: Optional[ModelConfig] = None,
    out_dir: Optional[Union[str, Path]] = None,
    threshold: float = 0.5,
    spacing: Optional[float] = None,
    max_workers: int = 1,
) -> CrossEvaluation:
    """Two-fold cross evaluation over the odd and even indexed samples.

    A cascade trained on one fold (its last quarter held out for validation) is
    tested on the other fold at native resolution; the folds are then swapped.

    Raises:
        ContractError: a fold has fewer than two samples, or an id has no index.

    """
    by_id: dict[str, SegmentationSample] = {s.id: s for s in samples}
    odd, even = split_odd_even([s.id for s in samples])
    if len(odd) < 2 or len(even) < 2:
        raise ContractError("both folds need at least two samples")
    base: ModelConfig = (
        ModelConfig(input_size=samples[0].size[0]) if model_config is None
        else model_config
    )

    result = CrossEvaluation(folds=[], stages=[])
    for name, train_ids, test_ids in (("odd", odd, even), ("even", even, odd)):
        fold: list[SegmentationSample] = [
            resize_sample(by_id[i], base.input_size) for i in train_ids
        ]
        train, val = _train_val(fold)
        fold_dir: Optional[Path] = (
            None if out_dir is None else Path(out_dir) / f"fold_{name}"
        )
        artifacts: list[StageArtifact] = networkwise_train(
            train, val, config, base, fold_dir
        )
        report: MetricsReport = evaluate_cascade(
            [a.model for a in artifacts],
            [by_id[i] for i in test_ids],
            threshold,
            spacing,
            max_workers=max_workers,
        )[-1]
        logger.info(
            "fold %s: %d stages, test jsc %s",
            name,
            len(artifacts),
            report.mean("jsc"),
        )
        result.folds.append((name, report))
        result.stages.append(artifacts)

    return result

