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

"""Plain text run configuration.

A run configuration is a UTF-8 file of ``key = value`` lines. A ``#`` at the start of a
line or after whitespace opens a comment; blank lines are ignored. Every key names a
:class:`RunConfig` field; unknown and repeated keys are rejected. Sequences are comma
separated and booleans are ``true`` or ``false``.

.. code-block:: text

    # desk scale phantom run
    epochs = 30
    lr_drop_epoch = 20
    input_size = 64
    max_stages = 3

"""

import logging
import re
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Callable, Union

from .errors import ConfigError
from .pipeline import TrainConfig
from .segnet import ModelConfig


__all__ = ["SPLIT_MODES", "RunConfig", "load", "parse", "save", "to_text"]

logger = logging.getLogger(__name__)

_COMMENT: re.Pattern[str] = re.compile(r"(?:^|\s)#")

SPLIT_MODES: tuple[str, ...] = ("manifest", "odd_even")
_TRUE: tuple[str, ...] = ("true", "yes", "on", "1")
_FALSE: tuple[str, ...] = ("false", "no", "off", "0")


@dataclass(frozen=True)
class RunConfig:
    """Everything a training or evaluation run depends on.

    Training fields mirror :class:`~atroseg.pipeline.TrainConfig`, architecture fields
    mirror :class:`~atroseg.segnet.ModelConfig` (the input channel count follows the
    cascade stage and is not configurable).

    Raises:
        ConfigError: on any out of range value, or an architecture rule violation.

    """

    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs"
    split_mode: str = "manifest"
    threshold: float = 0.5
    # training
    epochs: int = 100
    initial_lr: float = 0.1
    lr_drop_epoch: int = 70
    dropped_lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    augment: bool = True
    max_stages: int = 3
    saturation_delta: float = 0.001
    contrast_range: tuple[float, float] = (0.8, 1.2)
    brightness_range: tuple[float, float] = (-0.2, 0.2)
    # architecture
    input_size: int = 256
    stem_widths: tuple[int, ...] = (16, 16, 16)
    block_widths: tuple[int, ...] = (16, 16, 32, 32, 64, 64)
    block_strides: tuple[int, ...] = (2, 1, 2, 1, 1, 1)
    block_rates: tuple[int, ...] = (1, 1, 1, 1, 3, 3)
    kernel: int = 3
    upsample_factor: int = 4
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self) -> None:
        if self.split_mode not in SPLIT_MODES:
            raise ConfigError(
                f"split_mode must be one of {SPLIT_MODES}, got {self.split_mode!r}"
            )
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        self.train_config()
        self.model_config().validate()

    def train_config(self) -> TrainConfig:
        names: set[str] = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: getattr(self, k) for k in names})

    def model_config(self, in_channels: int = 1) -> ModelConfig:
        names: set[str] = {f.name for f in fields(ModelConfig)} - {"in_channels"}
        return ModelConfig(
            in_channels=in_channels, **{k: getattr(self, k) for k in names}
        )

    def replace(self, **changes: Any) -> "RunConfig":
        """Copy with some fields changed; the copy is validated again."""
        values: dict[str, Any] = {f.name: getattr(self, f.name) for f in fields(self)}
        unknown: set[str] = set(changes) - set(values)
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}")
        values.update(changes)
        return RunConfig(**values)


def _boolean(text: str) -> bool:
    lowered: str = text.lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _converter(annotation: Any) -> Callable[[str], Any]:
    if annotation is bool:
        return _boolean
    if annotation in (int, float, str):
        return annotation
    if typing.get_origin(annotation) is tuple:
        args: tuple[Any, ...] = typing.get_args(annotation)
        item: Callable[[str], Any] = args[0]
        arity: int = -1 if args[-1] is Ellipsis else len(args)

        def sequence(text: str) -> tuple[Any, ...]:
            values: tuple[Any, ...] = tuple(item(v.strip()) for v in text.split(","))
            if arity >= 0 and len(values) != arity:
                raise ValueError(f"expected {arity} values, got {len(values)}")
            return values

        return sequence

    raise TypeError(f"unsupported field type {annotation!r}")


_FIELDS: dict[str, Callable[[str], Any]] = {
    f.name: _converter(f.type) for f in fields(RunConfig)
}


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)

    return str(value)


def parse(text: str) -> RunConfig:
    """Parse configuration text; absent keys keep their defaults.

    Args:
        text (str): configuration file contents.

    Returns:
        (RunConfig): validated configuration.

    Raises:
        ConfigError: malformed line, unknown or duplicate key, unparsable value, or a
            configuration rule violation. Line numbers are 1 based.

    """
    values: dict[str, Any] = {}
    lineno: int
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line: str = _COMMENT.split(raw, maxsplit=1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _FIELDS[key](value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"line {lineno}: invalid value for {key}: {e}") from e

    return RunConfig(**values)


def to_text(config: RunConfig) -> str:
    """Canonical serialization: every key, in declaration order, one per line."""
    return "".join(
        f"{f.name} = {_format(getattr(config, f.name))}\n" for f in fields(config)
    )


def load(path: Union[str, Path]) -> RunConfig:
    """Read and parse a configuration file.

    Raises:
        ConfigError: unreadable file or invalid contents.

    """
    try:
        text: str = Path(path).read_text(encoding="utf_8")
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read configuration {path}: {e}") from e

    logger.debug("loaded configuration from %s", path)
    return parse(text)


def save(config: RunConfig, path: Union[str, Path]) -> Path:
    """Write the canonical form of a configuration."""
    out = Path(path)
    out.write_text(to_text(config), encoding="utf_8")
    return out
