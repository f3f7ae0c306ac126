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

"""Shared fixtures of the unit tests."""

from collections.abc import Iterator

import numpy as np
import pytest

from atroseg.data import SegmentationSample, synth_phantom
from atroseg.segnet import ModelConfig
from atroseg.tensor import default_dtype


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator, fresh per test."""
    return np.random.default_rng(20250101)


@pytest.fixture
def float64() -> Iterator[None]:
    """Create tensors in double precision for the duration of a test."""
    with default_dtype(np.float64):
        yield


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    """Narrow architecture with the default layout rules, for fast training tests."""
    return ModelConfig(
        stem_widths=(4, 4, 4),
        block_widths=(4, 4, 8, 8, 8, 8),
        input_size=32,
    )


@pytest.fixture(scope="session")
def phantoms() -> list[SegmentationSample]:
    """Eight 32x32 phantoms with ids case001..case008."""
    return [
        synth_phantom(np.random.default_rng([7, i]), 32, f"case{i:03d}")
        for i in range(1, 9)
    ]
