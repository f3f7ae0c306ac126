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

"""Deep-and-thin atrous residual network for two-class lung field segmentation.

Three stem convolutions are followed by six residual blocks; two blocks open with a
stride 2 convolution (global stride 4) and the final two blocks use rate 3
atrous convolutions. A 1x1 head maps features to two-class logits at a quarter of the
input resolution, which are bilinearly upsampled before the softmax.
"""

import json
import logging
import struct
import zlib
from collections.abc import Iterator, Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Literal, Optional, Union

import numpy as np
import numpy.typing as npt

from . import nn
from .errors import (
    BadMagicError,
    CheckpointError,
    ChecksumError,
    ConfigError,
    ContractError,
    VersionMismatchError,
)
from .nn import BatchNormState, ConvSpec, ResidualParams
from .tensor import Array, Tensor, get_default_dtype


__all__ = [
    "BlockSpec",
    "Model",
    "ModelConfig",
    "build_model",
    "count_parameters",
    "forward",
    "load_checkpoint",
    "model_input",
    "parameter_breakdown",
    "predict",
    "save_checkpoint",
]

logger = logging.getLogger(__name__)

MAGIC: bytes = b"ASEG"
FORMAT_VERSION: int = 1
REFERENCE_WEIGHT_COUNT: int = 120_672
CountPolicy = Literal["trainable", "weights"]


@dataclass(frozen=True)
class BlockSpec:
    """Residual block layout: output channels, first conv stride and dilation rate."""

    channels: int
    stride: int = 1
    rate: int = 1


@dataclass(frozen=True)
class ModelConfig:
    """Declarative architecture description.

    The default channel plan is stem 1->16->16->16, blocks of widths
    16, 16, 32, 32, 64, 64 with stride 2 at the first and third blocks and rate 3 in
    the last two, and a 1x1 head with bias to two classes.

    Args:
        in_channels (int): 1 at stage 1, 2 at later stages (image + prior probability).
        stem_widths (tuple[int, ...]): output channels of the stem convolutions.
        block_widths (tuple[int, ...]): output channels of each residual block.
        block_strides (tuple[int, ...]): stride of each block's first convolution.
        block_rates (tuple[int, ...]): dilation of both convolutions of each block.
        kernel (int): spatial extent of stem and block kernels.
        upsample_factor (int): bilinear upsampling factor of the logits.
        input_size (int): training resolution; prediction resizes inputs to it.
        bn_epsilon (float): batch norm variance offset.
        bn_momentum (float): batch norm running statistics decay.

    """

    in_channels: int = 1
    stem_widths: tuple[int, ...] = (16, 16, 16)
    block_widths: tuple[int, ...] = (16, 16, 32, 32, 64, 64)
    block_strides: tuple[int, ...] = (2, 1, 2, 1, 1, 1)
    block_rates: tuple[int, ...] = (1, 1, 1, 1, 3, 3)
    kernel: int = 3
    upsample_factor: int = 4
    input_size: int = 256
    bn_epsilon: float = nn.BN_EPSILON
    bn_momentum: float = nn.BN_MOMENTUM

    @property
    def stem(self) -> tuple[ConvSpec, ...]:
        channels: list[int] = [self.in_channels, *self.stem_widths]
        return tuple(
            ConvSpec(channels[i], channels[i + 1], self.kernel)
            for i in range(len(self.stem_widths))
        )

    @property
    def blocks(self) -> tuple[BlockSpec, ...]:
        return tuple(
            BlockSpec(c, s, r)
            for c, s, r in zip(
                self.block_widths, self.block_strides, self.block_rates, strict=True
            )
        )

    @property
    def head(self) -> ConvSpec:
        return ConvSpec(self.block_widths[-1], 2, 1)

    def validate(self) -> "ModelConfig":
        """Check the architecture rules, naming the violated one.

        Raises:
            ConfigError: with the rule name as message prefix.

        """
        rules: list[tuple[str, bool]] = [
            ("in-channels", self.in_channels in (1, 2)),
            ("stem-count", len(self.stem_widths) == 3),
            ("block-count", len(self.block_widths) == 6),
            (
                "block-fields",
                len(self.block_strides)
                == len(self.block_rates)
                == len(self.block_widths),
            ),
            (
                "positive-widths",
                all(w > 0 for w in (*self.stem_widths, *self.block_widths)),
            ),
            ("kernel", self.kernel > 0 and self.kernel % 2 == 1),
            ("stride-2-count", sorted(self.block_strides) == [1, 1, 1, 1, 2, 2]),
            (
                "global-stride",
                int(np.prod(self.block_strides)) == self.upsample_factor,
            ),
            (
                "atrous-placement",
                all(r == 1 for r in self.block_rates[:-2])
                and all(r == 3 for r in self.block_rates[-2:]),
            ),
            ("input-size", self.input_size % self.upsample_factor == 0),
            ("bn-epsilon", self.bn_epsilon > 0),
            ("bn-momentum", 0 < self.bn_momentum < 1),
        ]
        for rule, holds in rules:
            if not holds:
                raise ConfigError(f"{rule}: rule violated by {self}")

        return self

    def with_in_channels(self, in_channels: int) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), "in_channels": in_channels})

    def to_dict(self) -> dict[str, Any]:
        return {
            k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()
        }

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "ModelConfig":
        return cls(
            **{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
        )


@dataclass(frozen=True)
class _Slot:
    name: str
    shape: tuple[int, int, int, int]
    kind: Literal["conv", "bias", "gamma", "beta", "mean", "var"]

    @property
    def trainable(self) -> bool:
        return self.kind in ("conv", "bias", "gamma", "beta")


def _bn_slots(prefix: str, channels: int) -> Iterator[_Slot]:
    shape: tuple[int, int, int, int] = (1, channels, 1, 1)
    yield _Slot(f"{prefix}.gamma", shape, "gamma")
    yield _Slot(f"{prefix}.beta", shape, "beta")
    yield _Slot(f"{prefix}.running_mean", shape, "mean")
    yield _Slot(f"{prefix}.running_var", shape, "var")


def _block_specs(
    config: ModelConfig,
) -> Iterator[tuple[str, ConvSpec, ConvSpec, Optional[ConvSpec]]]:
    channels: int = config.stem_widths[-1]
    for i, block in enumerate(config.blocks, start=1):
        width: int = block.channels
        conv1 = ConvSpec(channels, width, config.kernel, block.stride, block.rate)
        conv2 = ConvSpec(width, width, config.kernel, 1, block.rate)
        projection: Optional[ConvSpec] = None
        if block.stride != 1 or channels != block.channels:
            projection = ConvSpec(channels, width, 1, block.stride, 1, padding=0)
        yield f"block{i}", conv1, conv2, projection
        channels = block.channels


def _layout(config: ModelConfig) -> list[_Slot]:
    slots: list[_Slot] = []
    for i, spec in enumerate(config.stem, start=1):
        slots.append(_Slot(f"stem{i}.weight", spec.weight_shape, "conv"))
        slots.extend(_bn_slots(f"stem{i}.bn", spec.out_channels))

    for name, conv1, conv2, projection in _block_specs(config):
        slots.append(_Slot(f"{name}.conv1.weight", conv1.weight_shape, "conv"))
        slots.extend(_bn_slots(f"{name}.bn1", conv1.out_channels))
        slots.append(_Slot(f"{name}.conv2.weight", conv2.weight_shape, "conv"))
        slots.extend(_bn_slots(f"{name}.bn2", conv2.out_channels))
        if projection is not None:
            slots.append(
                _Slot(f"{name}.projection.weight", projection.weight_shape, "conv")
            )
            slots.extend(_bn_slots(f"{name}.projection_bn", projection.out_channels))

    head: ConvSpec = config.head
    slots.append(_Slot("head.weight", head.weight_shape, "conv"))
    slots.append(_Slot("head.bias", (1, head.out_channels, 1, 1), "bias"))
    return slots


@dataclass
class Model:
    """Instantiated network: configuration, named parameters and cascade stage.

    Args:
        config (ModelConfig): architecture.
        parameters (dict[str, Tensor]): every conv weight, head bias, batch norm
            gamma/beta (trainable) and running statistic (not trainable).
        stage_index (int): cascade stage, 1 based.

    Raises:
        ContractError: when parameter names or shapes do not match the config, or
            the input channel count does not match the stage.

    """

    config: ModelConfig
    parameters: dict[str, Tensor] = field(repr=False)
    stage_index: int = 1

    def __post_init__(self) -> None:
        expected_channels: int = 2 if self.stage_index > 1 else 1
        if self.stage_index < 1 or self.config.in_channels != expected_channels:
            raise ContractError(
                f"stage {self.stage_index} expects {expected_channels} input channels, "
                f"config has {self.config.in_channels}"
            )
        slots: list[_Slot] = _layout(self.config)
        if [s.name for s in slots] != list(self.parameters):
            raise ContractError("parameter names do not match the configuration")
        for slot in slots:
            if self.parameters[slot.name].shape != slot.shape:
                raise ContractError(
                    f"{slot.name}: shape {self.parameters[slot.name].shape} "
                    f"!= {slot.shape}"
                )

    @property
    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters.items() if v.requires_grad}

    def batch_norm_state(self, prefix: str, training: bool) -> BatchNormState:
        p: dict[str, Tensor] = self.parameters
        return BatchNormState(
            gamma=p[f"{prefix}.gamma"],
            beta=p[f"{prefix}.beta"],
            running_mean=p[f"{prefix}.running_mean"],
            running_var=p[f"{prefix}.running_var"],
            epsilon=self.config.bn_epsilon,
            momentum=self.config.bn_momentum,
            training=training,
        )

    def residual_params(self, training: bool) -> list[ResidualParams]:
        p: dict[str, Tensor] = self.parameters
        blocks: list[ResidualParams] = []
        for name, conv1, conv2, projection in _block_specs(self.config):
            has_projection: bool = projection is not None
            blocks.append(
                ResidualParams(
                    conv1=conv1,
                    weight1=p[f"{name}.conv1.weight"],
                    bn1=self.batch_norm_state(f"{name}.bn1", training),
                    conv2=conv2,
                    weight2=p[f"{name}.conv2.weight"],
                    bn2=self.batch_norm_state(f"{name}.bn2", training),
                    projection=projection,
                    projection_weight=(
                        p[f"{name}.projection.weight"] if has_projection else None
                    ),
                    projection_bn=(
                        self.batch_norm_state(f"{name}.projection_bn", training)
                        if has_projection
                        else None
                    ),
                    name=name,
                )
            )
        return blocks


def build_model(
    config: ModelConfig,
    seed: int,
    stage_index: int = 1,
    dtype: Optional[npt.DTypeLike] = None,
) -> Model:
    """Instantiate a model with deterministic He-normal initialization.

    Conv weights are drawn from N(0, 2 / fan_in) in layout order from a PCG64 stream
    seeded with ``seed``; gamma 1, beta 0, running mean 0, running variance 1, head
    bias 0.

    Args:
        config (ModelConfig): architecture, validated first.
        seed (int): initialization seed.
        stage_index (int): cascade stage; its input channel count must match config.
        dtype (DTypeLike | None): parameter dtype, defaults to the tensor default.

    Returns:
        (Model): model ready for training.

    Raises:
        ConfigError: when the config violates an architecture rule.

    """
    config.validate()
    rng: np.random.Generator = np.random.default_rng(seed)
    dtype = get_default_dtype() if dtype is None else np.dtype(dtype)
    parameters: dict[str, Tensor] = {}

    for slot in _layout(config):
        data: Array
        if slot.kind == "conv":
            fan_in: int = slot.shape[1] * slot.shape[2] * slot.shape[3]
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=slot.shape)
        elif slot.kind in ("gamma", "var"):
            data = np.ones(slot.shape)
        else:
            data = np.zeros(slot.shape)
        parameters[slot.name] = Tensor(
            data, requires_grad=slot.trainable, name=slot.name, dtype=dtype
        )

    logger.debug("built stage %d model with seed %d", stage_index, seed)
    return Model(config=config, parameters=parameters, stage_index=stage_index)


def parameter_breakdown(
    model: Union[Model, Mapping[str, Tensor]],
    policy: CountPolicy = "trainable",
) -> dict[str, int]:
    """Parameter counts per layer.

    Args:
        model (Model | Mapping[str, Tensor]): model or a named tensor map.
        policy (str): ``"trainable"`` counts every tensor requiring gradients (conv
            kernels, head bias, batch norm gamma and beta); ``"weights"`` counts conv
            kernels only.

    Returns:
        (dict[str, int]): layer name (parameter name without its last component) to
        element count, in layout order.

    """
    params: Mapping[str, Tensor] = (
        model.parameters if isinstance(model, Model) else model
    )
    counts: dict[str, int] = {}
    for name, tensor in params.items():
        if policy == "weights":
            keep: bool = name.endswith(".weight")
        elif policy == "trainable":
            keep = tensor.requires_grad
        else:
            raise ContractError(f"unknown counting policy {policy!r}")
        if keep:
            layer: str = name.rsplit(".", 1)[0]
            counts[layer] = counts.get(layer, 0) + int(tensor.data.size)

    return counts


def count_parameters(
    model: Union[Model, Mapping[str, Tensor]],
    policy: CountPolicy = "trainable",
) -> int:
    """Total parameter count under a counting policy.

    Examples:
        .. code-block:: python

            count_parameters(build_model(ModelConfig(), 7))  # 179410
            count_parameters(build_model(ModelConfig(), 7), "weights")  # 178192

    """
    return sum(parameter_breakdown(model, policy).values())


def model_input(model: Model, image: Tensor, prev_prob: Optional[Tensor]) -> Tensor:
    """Assemble the network input: the image, then the prior stage probability.

    Raises:
        ContractError: when ``prev_prob`` is missing at stage > 1 or given at stage 1.

    """
    if model.stage_index == 1:
        if prev_prob is not None:
            raise ContractError("stage 1 model does not take a prior probability map")
        return image
    if prev_prob is None:
        raise ContractError(
            f"stage {model.stage_index} requires a prior probability map"
        )
    return nn.concat_channels(image, prev_prob)


def forward(
    model: Model,
    x: Tensor,
    training: bool = False,
    trace: Optional[list[str]] = None,
) -> Tensor:
    """Logits at 1 / upsample_factor resolution.

    Args:
        model (Model): network.
        x (Tensor): assembled input (see :func:`model_input`).
        training (bool): batch norm mode; training mode updates running statistics.
        trace (list[str] | None): receives names of executed convolutions.

    Returns:
        (Tensor): logits (N, 2, H / 4, W / 4) for the default config.

    """
    p: dict[str, Tensor] = model.parameters
    h: Tensor = x
    for i, spec in enumerate(model.config.stem, start=1):
        h = nn.conv2d(h, spec, p[f"stem{i}.weight"])
        h = nn.relu(nn.batch_norm(h, model.batch_norm_state(f"stem{i}.bn", training)))
        if trace is not None:
            trace.append(f"stem{i}")

    for block in model.residual_params(training):
        h = nn.residual_block(h, block, trace)

    logits: Tensor = nn.conv2d(h, model.config.head, p["head.weight"], p["head.bias"])
    if trace is not None:
        trace.append("head")

    return logits


def predict(
    model: Model,
    image: Tensor,
    prev_prob: Optional[Tensor] = None,
) -> Tensor:
    """Full resolution class probabilities in inference mode.

    Args:
        model (Model): network.
        image (Tensor): (N, 1, H, W) image values in [0, 1].
        prev_prob (Tensor | None): (N, 1, H, W) foreground probability of the
            previous stage; required iff the model's stage is above 1.

    Returns:
        (Tensor): (N, 2, H, W) probabilities summing to 1 per pixel.

    Raises:
        ContractError: on a missing or superfluous ``prev_prob``.

    """
    x: Tensor = model_input(model, image, prev_prob)
    logits: Tensor = forward(model, x, training=False)
    upsampled: Tensor = nn.bilinear_resize(logits, image.shape[2], image.shape[3])
    return Tensor(nn.softmax(upsampled.data), dtype=upsampled.dtype)


def _encode(model: Model) -> bytes:
    config: bytes = json.dumps(
        model.config.to_dict(), sort_keys=True, separators=(",", ":")
    ).encode("utf_8")
    chunks: list[bytes] = [
        MAGIC,
        struct.pack("<HH", FORMAT_VERSION, model.stage_index),
        struct.pack("<I", len(config)),
        config,
        struct.pack("<I", len(model.parameters)),
    ]
    for name, tensor in model.parameters.items():
        encoded: bytes = name.encode("utf_8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", tensor.data.ndim))
        chunks.append(struct.pack(f"<{tensor.data.ndim}I", *tensor.shape))
        chunks.append(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())

    payload: bytes = b"".join(chunks)
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(model: Model, path: Union[str, Path]) -> Path:
    """Write a model to the binary checkpoint format.

    Layout (little endian): magic ``ASEG``, u16 version, u16 stage index, u32 length
    and UTF-8 JSON of the config, u32 tensor count, then per tensor a u16 name length,
    the UTF-8 name, u8 rank, u32 extents and IEEE-754 float32 values; a trailing u32
    CRC-32 of everything before it.

    Args:
        model (Model): model to serialize. Values are stored in single precision.
        path (str | Path): destination file.

    Returns:
        (Path): the written path.

    """
    path = Path(path)
    path.write_bytes(_encode(model))
    logger.debug("saved stage %d checkpoint to %s", model.stage_index, path)
    return path


def _decode(payload: bytes) -> Model:
    offset: int = len(MAGIC)
    version, stage_index = struct.unpack_from("<HH", payload, offset)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"checkpoint version {version}, supported {FORMAT_VERSION}"
        )
    offset += 4
    (config_length,) = struct.unpack_from("<I", payload, offset)
    offset += 4
    config = ModelConfig.from_dict(
        json.loads(payload[offset : offset + config_length].decode("utf_8"))
    )
    offset += config_length
    (count,) = struct.unpack_from("<I", payload, offset)
    offset += 4

    trainable: dict[str, bool] = {s.name: s.trainable for s in _layout(config)}
    parameters: dict[str, Tensor] = {}
    for _ in range(count):
        (name_length,) = struct.unpack_from("<H", payload, offset)
        offset += 2
        name: str = payload[offset : offset + name_length].decode("utf_8")
        offset += name_length
        (ndim,) = struct.unpack_from("<B", payload, offset)
        offset += 1
        shape: tuple[int, ...] = struct.unpack_from(f"<{ndim}I", payload, offset)
        offset += 4 * ndim
        size: int = int(np.prod(shape))
        values: Array = np.frombuffer(payload, dtype="<f4", count=size, offset=offset)
        offset += 4 * size
        parameters[name] = Tensor(
            values.astype(np.float32).reshape(shape),
            requires_grad=trainable.get(name, False),
            name=name,
            dtype=np.float32,
        )

    if offset != len(payload):
        raise CheckpointError(f"{len(payload) - offset} trailing bytes in checkpoint")

    return Model(config=config, parameters=parameters, stage_index=stage_index)


def load_checkpoint(path: Union[str, Path]) -> Model:
    """Read a model written by :func:`save_checkpoint`.

    Args:
        path (str | Path): checkpoint file.

    Returns:
        (Model): model with float32 parameters, bit identical to the saved values.

    Raises:
        BadMagicError: file does not start with ``ASEG``.
        ChecksumError: payload does not match the trailing CRC-32 (e.g. truncation).
        VersionMismatchError: unsupported format version.
        CheckpointError: structurally invalid payload.

    """
    data: bytes = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not an atroseg checkpoint")
    if len(data) < len(MAGIC) + 4:
        raise ChecksumError(f"{path}: truncated checkpoint")

    payload: bytes = data[:-4]
    (expected,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != expected:
        raise ChecksumError(f"{path}: checksum mismatch")

    try:
        model: Model = _decode(payload)
    except (struct.error, UnicodeDecodeError, ValueError, TypeError, KeyError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint: {exc}") from exc

    logger.debug("loaded stage %d checkpoint from %s", model.stage_index, path)
    return model
