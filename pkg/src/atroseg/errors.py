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

"""Exception hierarchy shared across atroseg modules.

Every exception carries the process exit code the command line interface maps it to:
0 success, 1 verification failure, 2 usage or configuration error, 3 runtime
divergence.
"""

__all__ = [
    "AtrosegError",
    "BadMagicError",
    "CheckpointError",
    "ChecksumError",
    "ConfigError",
    "ContractError",
    "GraymapDepthError",
    "GraymapError",
    "GraymapHeaderError",
    "GraymapTruncatedError",
    "NonFiniteError",
    "TrainingDivergedError",
    "UndefinedMetricError",
    "VersionMismatchError",
]

EXIT_OK: int = 0
EXIT_VERIFICATION: int = 1
EXIT_USAGE: int = 2
EXIT_DIVERGED: int = 3


class AtrosegError(Exception):
    """Base class of every error raised by atroseg."""

    exit_code: int = EXIT_USAGE


class ContractError(AtrosegError, ValueError):
    """An operation was called outside of its documented preconditions."""


class NonFiniteError(AtrosegError, ArithmeticError):
    """An operation produced NaN or infinite values."""

    exit_code = EXIT_DIVERGED

    def __init__(self, op: str) -> None:
        super().__init__(f"non-finite values produced by {op}")
        self.op: str = op


class ConfigError(AtrosegError, ValueError):
    """A model or run configuration violates one of its rules."""


class CheckpointError(AtrosegError):
    """Base class of checkpoint decoding failures."""

    code: str = "checkpoint"


class BadMagicError(CheckpointError):
    """File does not start with the checkpoint magic."""

    code = "bad-magic"


class VersionMismatchError(CheckpointError):
    """Checkpoint was written with an unsupported format version."""

    code = "version-mismatch"


class ChecksumError(CheckpointError):
    """Checkpoint payload does not match its trailing checksum."""

    code = "checksum"


class GraymapError(AtrosegError, ValueError):
    """Base class of portable graymap decoding failures."""


class GraymapHeaderError(GraymapError):
    """Malformed graymap header."""


class GraymapDepthError(GraymapError):
    """Maximum value outside of the supported 8 and 16 bit depths."""


class GraymapTruncatedError(GraymapError):
    """Pixel payload shorter than the header announces."""


class UndefinedMetricError(AtrosegError, ValueError):
    """A boundary distance metric is undefined (one boundary set is empty)."""


class TrainingDivergedError(AtrosegError, ArithmeticError):
    """Training produced a non-finite value.

    Args:
        epoch (int): zero based epoch at which divergence occurred.
        batch (int): zero based mini-batch index within the epoch.
        lr (float): learning rate in effect.
        op (str): name of the operation which produced the non-finite value.

    """

    exit_code = EXIT_DIVERGED

    def __init__(self, epoch: int, batch: int, lr: float, op: str) -> None:
        super().__init__(
            f"training diverged at epoch {epoch}, batch {batch} (lr={lr}): "
            f"non-finite values produced by {op}"
        )
        self.epoch: int = epoch
        self.batch: int = batch
        self.lr: float = lr
        self.op: str = op
