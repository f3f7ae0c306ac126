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

"""Unit test data module."""

from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from atroseg import data
from atroseg.data import DatasetManifest, Graymap, ManifestEntry, SegmentationSample
from atroseg.errors import (
    ContractError,
    GraymapDepthError,
    GraymapHeaderError,
    GraymapTruncatedError,
)


@pytest.mark.parametrize(
    ["pixels", "maxval"],
    [
        (np.array([[0, 1, 2], [253, 254, 255]], dtype=np.uint8), 255),
        (np.array([[0, 7], [3, 7]], dtype=np.uint8), 7),
        (np.array([[0, 256], [40_000, 65_535]], dtype=np.uint16), 65_535),
        (np.array([[1000]], dtype=np.uint16), 1000),
    ],
)
def test_pgm_round_trip(tmp_path: Path, pixels: np.ndarray, maxval: int) -> None:
    """Test 8 and 16 bit rasters survive writing and reading."""
    path: Path = data.write_pgm(Graymap(pixels, maxval), tmp_path / "a.pgm")
    raster: Graymap = data.read_pgm(path)
    assert raster.maxval == maxval, "Unexpected maxval."
    np.testing.assert_array_equal(raster.pixels, pixels)


def test_pgm_big_endian(tmp_path: Path) -> None:
    """Test 16 bit samples are stored most significant byte first."""
    path: Path = data.write_pgm(
        Graymap(np.array([[258]], dtype=np.uint16), 65_535), tmp_path / "a.pgm"
    )
    assert path.read_bytes().endswith(b"\x01\x02"), "Samples are not big endian."


def test_pgm_comments(tmp_path: Path) -> None:
    """Test header comments are skipped, collected and written back."""
    path: Path = tmp_path / "a.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 # width\n1\n255\n\x05\x06")
    raster: Graymap = data.read_pgm(path)
    np.testing.assert_array_equal(raster.pixels, [[5, 6]])
    assert raster.comments == ("made by hand", "width"), "Comments not collected."

    data.write_pgm(Graymap(raster.pixels, 255, ("resized",)), path)
    assert path.read_bytes().startswith(b"P5\n# resized\n2 1\n255\n"), "Bad header."


@pytest.mark.parametrize(
    ["content", "error"],
    [
        (b"P2\n1 1\n255\n\x00", GraymapHeaderError),
        (b"P55 1 1 255\n\x00", GraymapHeaderError),
        (b"P5\nx 1\n255\n\x00", GraymapHeaderError),
        (b"P5\n0 1\n255\n", GraymapHeaderError),
        (b"P5\n1 1\n", GraymapHeaderError),
        (b"P5\n1 1\n70000\n\x00\x00", GraymapDepthError),
        (b"P5\n2 1\n100\n\x05\xc8", GraymapDepthError),
        (b"P5\n2 2\n255\n\x00\x00\x00", GraymapTruncatedError),
        (b"P5\n1 1\n1000\n\x00", GraymapTruncatedError),
    ],
)
def test_pgm_errors(tmp_path: Path, content: bytes, error: type[Exception]) -> None:
    """Test malformed graymaps raise the matching error."""
    path: Path = tmp_path / "bad.pgm"
    path.write_bytes(content)
    with pytest.raises(error):
        data.read_pgm(path)


@pytest.mark.parametrize(
    "raster",
    [
        Graymap(np.array([[300]]), 255),
        Graymap(np.array([[1]]), 0),
        Graymap(np.array([[1]]), 70_000),
    ],
)
def test_write_pgm_depth(tmp_path: Path, raster: Graymap) -> None:
    """Test out of range samples or maxval are refused on write."""
    with pytest.raises(GraymapDepthError):
        data.write_pgm(raster, tmp_path / "a.pgm")


def test_probability_quantization(tmp_path: Path, rng: np.random.Generator) -> None:
    """Test probabilities are recovered within 1 / 65535."""
    prob: np.ndarray = rng.random((16, 16))
    path: Path = data.save_probability(prob, tmp_path / "p.pgm", comment="stage 1")
    raster: Graymap = data.read_pgm(path)

    assert raster.maxval == 65_535, "Probability map is not 16 bit."
    assert raster.comments == ("stage 1",), "Comment lost."
    assert np.abs(raster.scaled() - prob).max() <= 1 / 65_535, "Quantization error."


def test_mask_round_trip(tmp_path: Path) -> None:
    """Test masks are stored as 0 and 255 and read back as booleans."""
    mask = np.array([[0, 1], [1, 0]], dtype=bool)
    path: Path = data.save_mask(mask, tmp_path / "m.pgm")
    assert set(np.unique(data.read_pgm(path).pixels)) == {0, 255}, "Not 0 / 255."
    np.testing.assert_array_equal(data.load_mask(path), mask)


def test_image_round_trip(tmp_path: Path, rng: np.random.Generator) -> None:
    """Test images are stored in 16 bits and loaded as float32."""
    image: np.ndarray = rng.random((5, 7)).astype(np.float32)
    loaded: np.ndarray = data.load_image(data.save_image(image, tmp_path / "i.pgm"))
    assert loaded.dtype == np.float32, "Unexpected dtype."
    np.testing.assert_allclose(loaded, image, atol=1 / 65_535)


def test_sample_contract() -> None:
    """Test image and mask dimensions must agree."""
    with pytest.raises(ContractError):
        SegmentationSample("a", np.zeros((4, 4)), np.zeros((4, 5), dtype=bool))
    sample = SegmentationSample("a", np.zeros((4, 5)), np.zeros((4, 5), dtype=bool))
    assert sample.tensor().shape == (1, 1, 4, 5), "Unexpected tensor shape."


def test_phantom_is_deterministic() -> None:
    """Test equal seeds produce identical phantoms."""
    a: SegmentationSample = data.synth_phantom(np.random.default_rng(9), 64)
    b: SegmentationSample = data.synth_phantom(np.random.default_rng(9), 64)
    c: SegmentationSample = data.synth_phantom(np.random.default_rng(10), 64)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask, b.mask)
    assert not np.array_equal(a.mask, c.mask), "Seed ignored."


def test_phantom_properties() -> None:
    """Test value range, spacing, two lung fields and foreground fraction."""
    for seed in range(1000):
        sample = data.synth_phantom(np.random.default_rng(seed), 64, f"p{seed}")
        fraction: float = float(sample.mask.mean())
        assert 0.15 <= fraction <= 0.45, f"seed {seed}: fraction {fraction:.3f}"
        _, components = ndimage.label(sample.mask)
        assert components == 2, f"seed {seed}: {components} components"
        assert sample.image.dtype == np.float32, "Unexpected dtype."
        assert 0.0 <= sample.image.min() and sample.image.max() <= 1.0, "Range."

    assert sample.spacing == pytest.approx(5.6), "Unexpected spacing."


def test_phantom_contrast() -> None:
    """Test lung fields are darker than the background."""
    sample = data.synth_phantom(np.random.default_rng(1), 128)
    assert sample.image[sample.mask].mean() < sample.image[~sample.mask].mean() - 0.2


@pytest.mark.parametrize("size", [0, 16, 31])
def test_phantom_size(size: int) -> None:
    """Test phantoms below 32 pixels are refused."""
    with pytest.raises(ContractError):
        data.synth_phantom(np.random.default_rng(0), size)


def test_resize_mask() -> None:
    """Test nearest neighbor sampling on half-pixel centers."""
    checker: np.ndarray = (np.indices((4, 4)).sum(axis=0) % 2).astype(bool)
    np.testing.assert_array_equal(
        data.resize_mask(checker, 2, 2), checker[[1, 3]][:, [1, 3]]
    )
    up: np.ndarray = data.resize_mask(np.array([[1, 0], [0, 1]]), 4, 4)
    np.testing.assert_array_equal(up, np.kron(np.eye(2), np.ones((2, 2))).astype(bool))
    with pytest.raises(ContractError):
        data.resize_mask(checker, 0, 2)


def test_resize_sample() -> None:
    """Test resizing scales spacing and keeps masks binary."""
    sample = data.synth_phantom(np.random.default_rng(2), 64)
    assert data.resize_sample(sample, 64) is sample, "Same size was resized."

    small: SegmentationSample = data.resize_sample(sample, 32)
    assert small.size == (32, 32), "Unexpected size."
    assert small.mask.dtype == np.bool_, "Mask is not binary."
    assert small.spacing == pytest.approx(2 * sample.spacing), "Spacing not scaled."


def test_split_odd_even() -> None:
    """Test the parity split of 247 cases."""
    odd, even = data.split_odd_even([f"case{i:03d}" for i in range(1, 248)])
    assert (len(odd), len(even)) == (124, 123), "Unexpected split sizes."
    assert odd[0] == "case001" and even[0] == "case002", "Order not kept."
    with pytest.raises(ContractError):
        data.split_odd_even(["case1", "left"])


@pytest.fixture
def dataset(tmp_path: Path, phantoms: list[SegmentationSample]) -> DatasetManifest:
    """Phantoms written to disk, last two tagged for validation."""
    splits: list[str] = ["train"] * (len(phantoms) - 2) + ["val", "val"]
    return data.write_dataset(tmp_path / "set", phantoms, splits)


def test_manifest_round_trip(
    dataset: DatasetManifest, phantoms: list[SegmentationSample]
) -> None:
    """Test a written dataset reads back with its samples."""
    manifest: DatasetManifest = DatasetManifest.read(dataset.root)
    assert manifest.ids == [p.id for p in phantoms], "Ids or order lost."
    assert manifest.select("val").ids == ["case007", "case008"], "Bad split."

    samples: list[SegmentationSample] = data.load_samples(manifest.subset(["case003"]))
    assert len(samples) == 1 and samples[0].id == "case003", "Subset failed."
    np.testing.assert_array_equal(samples[0].mask, phantoms[2].mask)
    np.testing.assert_allclose(samples[0].image, phantoms[2].image, atol=1 / 65_535)
    assert samples[0].spacing == phantoms[2].spacing, "Spacing lost."


def test_manifest_missing_file(dataset: DatasetManifest) -> None:
    """Test references to missing files are reported."""
    (dataset.root / "masks" / "case004.pgm").unlink()
    with pytest.raises(FileNotFoundError):
        DatasetManifest.read(dataset.root)


def test_manifest_missing_columns(tmp_path: Path) -> None:
    """Test manifests without path columns are refused."""
    (tmp_path / data.MANIFEST).write_text("id,image_path\na,b\n")
    with pytest.raises(ContractError):
        DatasetManifest.read(tmp_path)


@pytest.mark.parametrize(
    "entries",
    [
        [ManifestEntry("a", "x", "y"), ManifestEntry("a", "z", "w")],
        [ManifestEntry("a", "x", "y", split="holdout")],
    ],
)
def test_manifest_contract(tmp_path: Path, entries: list[ManifestEntry]) -> None:
    """Test duplicate ids and unknown splits are refused."""
    with pytest.raises(ContractError):
        DatasetManifest(tmp_path, entries)
