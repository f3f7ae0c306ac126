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

"""Shared fixtures of the integration tests."""

from pathlib import Path

import pytest

from atroseg import cli


TINY_RUN: str = """\
# small architecture, short schedule
epochs = 2
lr_drop_epoch = 1
batch_size = 4
max_stages = 2
saturation_delta = 0.0
input_size = 32
stem_widths = 4, 4, 4
block_widths = 4, 4, 8, 8, 8, 8
seed = 3
"""


@pytest.fixture
def dataset(tmp_path: Path) -> Path:
    """Twelve 32x32 phantoms, the last three tagged for validation."""
    root: Path = tmp_path / "data"
    code: int = cli.main(
        [
            "-q",
            "synth",
            "--out",
            str(root),
            "--count",
            "12",
            "--size",
            "32",
            "--val-count",
            "3",
            "--seed",
            "5",
        ]
    )
    assert code == 0, "synthesis failed"
    return root


@pytest.fixture
def run_config(tmp_path: Path) -> Path:
    """Configuration file of a two stage run on tiny networks."""
    path: Path = tmp_path / "run.cfg"
    path.write_text(TINY_RUN, encoding="utf_8")
    return path
