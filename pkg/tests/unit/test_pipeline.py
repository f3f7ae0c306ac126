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

"""Unit test pipeline module."""

import csv
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from atroseg import data, nn, pipeline, segnet
from atroseg.data import SegmentationSample
from atroseg.errors import ConfigError, ContractError, TrainingDivergedError
from atroseg.metrics import MetricsReport
from atroseg.pipeline import CrossEvaluation, StageArtifact, TrainConfig
from atroseg.segnet import ModelConfig
from atroseg.tensor import Tensor


FAST: TrainConfig = TrainConfig(
    epochs=2,
    lr_drop_epoch=1,
    batch_size=4,
    seed=0,
    max_stages=2,
    saturation_delta=0.0,
)


@pytest.fixture(scope="module")
def cascade(
    tmp_path_factory: pytest.TempPathFactory,
    phantoms: list[SegmentationSample],
    tiny_config: ModelConfig,
) -> tuple[list[StageArtifact], Path]:
    """Two stage cascade trained on six phantoms, validated on two."""
    out: Path = tmp_path_factory.mktemp("run")
    artifacts = pipeline.networkwise_train(
        phantoms[:6], phantoms[6:], FAST, tiny_config, out
    )
    return artifacts, out


@pytest.mark.parametrize(
    ["epoch", "expected"],
    [
        (0, 0.1),
        (69, 0.1),
        (70, 0.01),
        (99, 0.01),
    ],
)
def test_lr_schedule(epoch: int, expected: float) -> None:
    """Test the step learning rate schedule."""
    assert pipeline.lr_schedule(epoch, TrainConfig()) == expected, "Unexpected lr."


def test_lr_schedule_negative_epoch() -> None:
    """Test negative epochs are refused."""
    with pytest.raises(ContractError):
        pipeline.lr_schedule(-1, TrainConfig())


@pytest.mark.parametrize(
    "changes",
    [
        {"epochs": 0},
        {"initial_lr": 0.0},
        {"momentum": 1.0},
        {"batch_size": 0},
        {"max_stages": 0},
        {"saturation_delta": -0.1},
        {"contrast_range": (1.2, 0.8)},
        {"brightness_range": (0.2, -0.2)},
    ],
)
def test_train_config_ranges(changes: dict) -> None:
    """Test out of range recipes are refused."""
    with pytest.raises(ConfigError):
        replace(TrainConfig(), **changes)


@pytest.mark.parametrize(
    ["values", "contrast", "brightness", "expected"],
    [
        ([0.5, 0.5], 1.7, 0.0, [0.5, 0.5]),
        ([0.0, 1.0], 2.0, 0.0, [0.0, 1.0]),
        ([0.25, 0.75], 1.0, 0.1, [0.35, 0.85]),
        ([0.25, 0.9], 1.0, 0.2, [0.45, 1.0]),
        ([0.25, 0.75], 0.8, -0.2, [0.1, 0.5]),
    ],
)
def test_adjust(
    values: list[float], contrast: float, brightness: float, expected: list[float]
) -> None:
    """Test contrast around mid gray, brightness offset and clipping."""
    out: np.ndarray = pipeline.adjust(np.array(values), contrast, brightness)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_augment(rng: np.random.Generator) -> None:
    """Test augmentation stays in range, keeps types and leaves its input alone."""
    image: np.ndarray = rng.random((8, 8)).astype(np.float32)
    original: np.ndarray = image.copy()
    out: np.ndarray = pipeline.augment(image, np.random.default_rng(1))
    again: np.ndarray = pipeline.augment(image, np.random.default_rng(1))

    assert out.dtype == np.float32, "Unexpected dtype."
    assert 0.0 <= out.min() and out.max() <= 1.0, "Values left [0, 1]."
    np.testing.assert_array_equal(out, again)
    np.testing.assert_array_equal(image, original)

    tensor = pipeline.augment(Tensor(image[None, None]), np.random.default_rng(1))
    assert isinstance(tensor, Tensor), "Tensor input not returned as a tensor."
    np.testing.assert_array_equal(tensor.data[0, 0], out)


def test_cascade_stages(cascade: tuple[list[StageArtifact], Path]) -> None:
    """Test stage order, input channels and best epoch bookkeeping."""
    artifacts, _ = cascade
    assert [a.stage_index for a in artifacts] == [1, 2], "Unexpected stages."
    assert [a.model.config.in_channels for a in artifacts] == [1, 2], "Channels."

    for artifact in artifacts:
        assert len(artifact.loss_history) == FAST.epochs, "Loss history length."
        assert len(artifact.val_history) == FAST.epochs, "Validation history length."
        assert all(np.isfinite(artifact.loss_history)), "Non-finite loss."
        assert artifact.best_epoch == int(np.argmax(artifact.val_history)), "Best."
        assert artifact.val_report is not None, "No validation report."
        assert [s.sample_id for s in artifact.val_report.samples] == [
            "case007",
            "case008",
        ], "Validation report rows."


def test_stage_cache(
    cascade: tuple[list[StageArtifact], Path], phantoms: list[SegmentationSample]
) -> None:
    """Test every sample has a cached full resolution probability map."""
    artifacts, _ = cascade
    cache: dict[str, np.ndarray] = artifacts[0].cache
    assert sorted(cache) == [p.id for p in phantoms], "Cache keys."
    for prob in cache.values():
        assert prob.shape == (32, 32) and prob.dtype == np.float32, "Cache entry."
        assert 0.0 <= prob.min() and prob.max() <= 1.0, "Probability out of range."


def test_stage_outputs(cascade: tuple[list[StageArtifact], Path]) -> None:
    """Test checkpoints, epoch logs and the stage summary are written."""
    artifacts, out = cascade
    for artifact in artifacts:
        k: int = artifact.stage_index
        assert artifact.checkpoint == out / f"stage{k}.ckpt", "Checkpoint path."
        loaded = segnet.load_checkpoint(artifact.checkpoint)
        assert loaded.stage_index == k, "Checkpoint stage."
        for name, tensor in artifact.model.parameters.items():
            np.testing.assert_array_equal(loaded.parameters[name].data, tensor.data)

        with open(out / f"stage{k}_epochs.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert [int(r["epoch"]) for r in rows] == [0, 1], "Epoch rows."
        assert [float(r["lr"]) for r in rows] == [0.1, 0.01], "Logged lr."

    with open(out / pipeline.SUMMARY_FILE, newline="") as f:
        summary = list(csv.DictReader(f))
    assert [int(r["stage"]) for r in summary] == [1, 2], "Summary rows."
    assert float(summary[1]["val_jsc"]) == artifacts[1].val_jsc, "Summary value."


def test_train_stage_is_deterministic(
    phantoms: list[SegmentationSample], tiny_config: ModelConfig
) -> None:
    """Test equal seeds reproduce losses and weights exactly."""
    runs: list[StageArtifact] = [
        pipeline.train_stage(
            phantoms[:6], phantoms[6:], 1, None, replace(FAST, epochs=1), tiny_config
        )
        for _ in range(2)
    ]
    assert runs[0].loss_history == runs[1].loss_history, "Losses differ."
    for name, tensor in runs[0].model.parameters.items():
        np.testing.assert_array_equal(tensor.data, runs[1].model.parameters[name].data)


def test_train_stage_previous(
    cascade: tuple[list[StageArtifact], Path],
    phantoms: list[SegmentationSample],
    tiny_config: ModelConfig,
) -> None:
    """Test the previous stage is required after stage 1 and refused at stage 1."""
    first: StageArtifact = cascade[0][0]
    with pytest.raises(ContractError):
        pipeline.train_stage(phantoms[:6], phantoms[6:], 1, first, FAST, tiny_config)
    with pytest.raises(ContractError):
        pipeline.train_stage(phantoms[:6], phantoms[6:], 2, None, FAST, tiny_config)


def test_train_stage_missing_cache(
    cascade: tuple[list[StageArtifact], Path],
    phantoms: list[SegmentationSample],
    tiny_config: ModelConfig,
) -> None:
    """Test samples without a cached prior are refused."""
    stranger: SegmentationSample = data.synth_phantom(
        np.random.default_rng(99), 32, "case099"
    )
    with pytest.raises(ContractError):
        pipeline.train_stage(
            [*phantoms[:6], stranger], phantoms[6:], 2, cascade[0][0], FAST, tiny_config
        )


def test_train_stage_contract(
    phantoms: list[SegmentationSample], tiny_config: ModelConfig
) -> None:
    """Test empty sets and mixed sizes are refused."""
    with pytest.raises(ContractError):
        pipeline.train_stage([], phantoms[6:], 1, None, FAST, tiny_config)
    larger = data.synth_phantom(np.random.default_rng(0), 64, "case100")
    with pytest.raises(ContractError):
        pipeline.train_stage([*phantoms[:6], larger], phantoms[6:], 1, None, FAST)


def test_train_stage_input_size(
    phantoms: list[SegmentationSample], tiny_config: ModelConfig
) -> None:
    """Test the model input size follows the samples and must agree with them."""
    larger: ModelConfig = replace(tiny_config, input_size=64)
    with pytest.raises(ContractError, match="input_size"):
        pipeline.train_stage(phantoms[:6], phantoms[6:], 1, None, FAST, larger)
    artifact: StageArtifact = pipeline.train_stage(
        phantoms[:6], phantoms[6:], 1, None, replace(FAST, epochs=1)
    )
    assert artifact.model.config.input_size == 32, "Input size not taken from samples."


def test_divergence(
    monkeypatch: pytest.MonkeyPatch,
    phantoms: list[SegmentationSample],
    tiny_config: ModelConfig,
) -> None:
    """Test a non-finite loss stops training with its location."""

    def poisoned(self, logits: np.ndarray, target: np.ndarray) -> np.ndarray:
        return np.full((1, 1, 1, 1), np.nan, dtype=logits.dtype)

    monkeypatch.setattr(nn.SoftmaxCrossEntropy, "forward", poisoned)
    with pytest.raises(TrainingDivergedError) as info:
        pipeline.train_stage(phantoms[:6], phantoms[6:], 1, None, FAST, tiny_config)

    error: TrainingDivergedError = info.value
    assert (error.epoch, error.batch) == (0, 0), "Unexpected location."
    assert error.lr == FAST.initial_lr, "Unexpected learning rate."
    assert error.op == "SoftmaxCrossEntropy", "Operation not named."
    assert error.exit_code == 3, "Unexpected exit code."


@pytest.mark.parametrize(
    ["changes", "stages"],
    [
        ({"max_stages": 1}, 1),
        ({"max_stages": 3, "saturation_delta": 1.0}, 2),
    ],
)
def test_networkwise_stops(
    phantoms: list[SegmentationSample],
    tiny_config: ModelConfig,
    changes: dict,
    stages: int,
) -> None:
    """Test the stage limit and the saturation rule."""
    config: TrainConfig = replace(FAST, epochs=1, **changes)
    artifacts = pipeline.networkwise_train(
        phantoms[:6], phantoms[6:], config, tiny_config
    )
    assert len(artifacts) == stages, f"Trained {len(artifacts)} stages."


def test_cascade_predict(cascade: tuple[list[StageArtifact], Path]) -> None:
    """Test one native size probability map per stage."""
    models = [a.model for a in cascade[0]]
    image: np.ndarray = data.synth_phantom(np.random.default_rng(3), 48).image
    maps: list[np.ndarray] = pipeline.cascade_predict(models, image)

    assert len(maps) == 2, "Unexpected stage count."
    for prob in maps:
        assert prob.shape == (48, 48) and prob.dtype == np.float32, "Bad map."
        assert 0.0 <= prob.min() and prob.max() <= 1.0, "Probability out of range."


def test_cascade_predict_matches_cache(
    cascade: tuple[list[StageArtifact], Path], phantoms: list[SegmentationSample]
) -> None:
    """Test a trained cascade predicts what its stages cached during training."""
    artifacts: list[StageArtifact] = cascade[0]
    models = [a.model for a in artifacts]
    for sample in phantoms:
        maps: list[np.ndarray] = pipeline.cascade_predict(models, sample.image)
        for artifact, prob in zip(artifacts, maps):
            np.testing.assert_allclose(
                prob, artifact.cache[sample.id], atol=1e-5, err_msg=sample.id
            )


def test_check_cascade(cascade: tuple[list[StageArtifact], Path]) -> None:
    """Test empty cascades and broken stage order are refused."""
    first, second = (a.model for a in cascade[0])
    pipeline.check_cascade([first, second])
    for models in ([], [second], [first, first], [second, first]):
        with pytest.raises(ContractError):
            pipeline.check_cascade(models)


def test_evaluate_cascade(
    cascade: tuple[list[StageArtifact], Path], phantoms: list[SegmentationSample]
) -> None:
    """Test per stage reports end with the final stage report."""
    models = [a.model for a in cascade[0]]
    reports: list[MetricsReport] = pipeline.evaluate_cascade(
        models, phantoms[:3], per_stage=True, spacing=1.4, max_workers=2
    )
    final: list[MetricsReport] = pipeline.evaluate_cascade(
        models, phantoms[:3], spacing=1.4
    )

    assert len(reports) == 2 and len(final) == 1, "Unexpected report count."
    assert reports[-1].samples == final[0].samples, "Final stage differs."
    assert [s.sample_id for s in final[0].samples] == ["case001", "case002", "case003"]
    assert final[0].unit == "mm", "Spacing ignored."


def test_cross_evaluate(
    tmp_path: Path, phantoms: list[SegmentationSample], tiny_config: ModelConfig
) -> None:
    """Test both folds are trained on one parity and tested on the other."""
    config: TrainConfig = replace(FAST, epochs=1, max_stages=1)
    result: CrossEvaluation = pipeline.cross_evaluate(
        phantoms, config, tiny_config, tmp_path
    )

    assert [name for name, _ in result.folds] == ["odd", "even"], "Fold order."
    odd_report: MetricsReport = result.folds[0][1]
    assert [s.sample_id for s in odd_report.samples] == [
        "case002",
        "case004",
        "case006",
        "case008",
    ], "Odd fold was not tested on the even samples."
    assert all(len(stages) == 1 for stages in result.stages), "Stage count."
    assert (tmp_path / "fold_even" / "stage1.ckpt").is_file(), "Fold output missing."
    jsc = result.mean("jsc")
    assert jsc is not None and 0.0 <= jsc <= 1.0, "Unexpected mean."


def test_cross_evaluate_small_fold(
    phantoms: list[SegmentationSample], tiny_config: ModelConfig
) -> None:
    """Test folds of fewer than two samples are refused."""
    with pytest.raises(ContractError):
        pipeline.cross_evaluate(phantoms[:3], FAST, tiny_config)
