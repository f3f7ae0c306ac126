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

"""Graymap I/O, synthetic lung phantoms, datasets and resampling.

On disk a dataset directory holds ``images/<id>.pgm``, ``masks/<id>.pgm`` and a
``manifest.csv`` with the columns ``id, image_path, mask_path, spacing, split``.
Paths in the manifest are relative to the dataset directory.
"""

import csv
import logging
import math
import re
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import numpy.typing as npt

from . import nn
from .errors import (
    ContractError,
    GraymapDepthError,
    GraymapHeaderError,
    GraymapTruncatedError,
)
from .metrics import BinaryMask, as_mask
from .tensor import Tensor


__all__ = [
    "DatasetManifest",
    "Graymap",
    "ManifestEntry",
    "SegmentationSample",
    "load_image",
    "load_mask",
    "load_samples",
    "read_pgm",
    "resize_mask",
    "resize_sample",
    "save_image",
    "save_mask",
    "save_probability",
    "split_odd_even",
    "synth_phantom",
    "write_dataset",
    "write_pgm",
]

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
MAGIC: bytes = b"P5"
MAX_DEPTH: int = 65535
MANIFEST: str = "manifest.csv"
MANIFEST_COLUMNS: tuple[str, ...] = (
    "id",
    "image_path",
    "mask_path",
    "spacing",
    "split",
)
SPLITS: tuple[str, ...] = ("train", "val", "test")
# 2048 pixels of 0.175 mm across a radiograph field of view
FIELD_OF_VIEW_MM: float = 358.4
_WHITESPACE: bytes = b" \t\n\r\v\f"
_TRAILING_INDEX = re.compile(r"(\d+)$")


@dataclass(frozen=True)
class Graymap:
    """Raster of a binary portable graymap.

    Args:
        pixels (np.ndarray): (H, W) unsigned integers, uint8 when maxval < 256 and
            uint16 otherwise.
        maxval (int): largest representable value, 1 to 65535.
        comments (tuple[str, ...]): header comment lines without the leading ``#``.

    """

    pixels: np.ndarray
    maxval: int = 255
    comments: tuple[str, ...] = ()

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape  # type: ignore[return-value]

    def scaled(self) -> np.ndarray:
        """Pixel values divided by maxval, as float32 in [0, 1]."""
        return (self.pixels.astype(np.float64) / self.maxval).astype(np.float32)


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], list[str], int]:
    """Split the first ``count`` header tokens, skipping comments.

    Returns the tokens, the comment texts and the offset of the single whitespace
    byte separating the header from the raster.
    """
    tokens: list[bytes] = []
    comments: list[str] = []
    i: int = 0
    n: int = len(data)
    while len(tokens) < count:
        while i < n and data[i] in _WHITESPACE:
            i += 1
        if i >= n:
            raise GraymapHeaderError("header ends before width, height and maxval")
        if data[i] == ord("#"):
            end: int = data.find(b"\n", i)
            end = n if end < 0 else end
            comments.append(data[i + 1 : end].decode("utf_8", "replace").strip())
            i = end
            continue
        start: int = i
        while i < n and data[i] not in _WHITESPACE and data[i] != ord("#"):
            i += 1
        tokens.append(data[start:i])

    return tokens, comments, i


def _positive(token: bytes, what: str) -> int:
    if not token.isdigit():
        raise GraymapHeaderError(f"{what} is not a decimal integer: {token!r}")
    value: int = int(token)
    if value < 1:
        raise GraymapHeaderError(f"{what} must be positive, got {value}")

    return value


def read_pgm(path: PathLike) -> Graymap:
    """Read a binary (P5) portable graymap of 8 or 16 bits per pixel.

    Comment lines (``#`` to end of line) may appear anywhere between header tokens.
    Sixteen bit samples are big endian.

    Args:
        path (PathLike): file to read.

    Returns:
        (Graymap): raster, maxval and header comments.

    Raises:
        GraymapHeaderError: wrong magic number or malformed width, height or maxval.
        GraymapDepthError: maxval above 65535, or a sample exceeding maxval.
        GraymapTruncatedError: fewer raster bytes than the header announces.

    """
    data: bytes = Path(path).read_bytes()
    if data[:2] != MAGIC or (len(data) > 2 and data[2] not in _WHITESPACE + b"#"):
        raise GraymapHeaderError(f"{path}: not a binary graymap (magic {data[:2]!r})")

    tokens, comments, offset = _header_tokens(data[2:], 3)
    width: int = _positive(tokens[0], "width")
    height: int = _positive(tokens[1], "height")
    maxval: int = _positive(tokens[2], "maxval")
    if maxval > MAX_DEPTH:
        raise GraymapDepthError(f"{path}: maxval {maxval} exceeds {MAX_DEPTH}")

    start: int = 2 + offset + 1
    dtype: np.dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    expected: int = width * height * dtype.itemsize
    raster: bytes = data[start : start + expected]
    if len(raster) < expected:
        raise GraymapTruncatedError(
            f"{path}: raster holds {len(raster)} of {expected} bytes"
        )

    pixels: np.ndarray = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    pixels = pixels.astype(np.uint8 if maxval < 256 else np.uint16)
    if int(pixels.max()) > maxval:
        raise GraymapDepthError(f"{path}: sample value exceeds maxval {maxval}")

    return Graymap(pixels, maxval, tuple(comments))


def write_pgm(raster: Graymap, path: PathLike) -> Path:
    """Write a binary (P5) portable graymap.

    Raises:
        GraymapDepthError: maxval outside 1..65535 or a pixel above maxval.
        ContractError: pixels are not a non-empty 2-D array.

    """
    pixels: np.ndarray = np.asarray(raster.pixels)
    if pixels.ndim != 2 or pixels.size == 0:
        raise ContractError(f"graymap pixels must be a 2-D raster, got {pixels.shape}")
    if not 1 <= raster.maxval <= MAX_DEPTH:
        raise GraymapDepthError(f"maxval {raster.maxval} outside 1..{MAX_DEPTH}")
    if pixels.min() < 0 or pixels.max() > raster.maxval:
        raise GraymapDepthError(f"pixel values exceed maxval {raster.maxval}")

    header: list[str] = ["P5"]
    header.extend(f"# {c}" for c in raster.comments)
    header.append(f"{pixels.shape[1]} {pixels.shape[0]}")
    header.append(str(raster.maxval))
    dtype: str = "u1" if raster.maxval < 256 else ">u2"

    out = Path(path)
    out.write_bytes(
        ("\n".join(header) + "\n").encode("ascii")
        + np.ascontiguousarray(pixels, dtype=dtype).tobytes()
    )

    return out


def _quantize(values: npt.ArrayLike, maxval: int) -> np.ndarray:
    scaled: np.ndarray = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.rint(scaled * maxval).astype(np.uint16 if maxval > 255 else np.uint8)


def load_image(path: PathLike) -> np.ndarray:
    """Read a graymap as a float32 (H, W) image scaled to [0, 1]."""
    return read_pgm(path).scaled()


def load_mask(path: PathLike) -> BinaryMask:
    """Read a graymap mask; every non-zero pixel is foreground."""
    return read_pgm(path).pixels > 0


def save_image(
    image: npt.ArrayLike, path: PathLike, comment: Optional[str] = None
) -> Path:
    """Write a [0, 1] image as a 16 bit graymap."""
    comments: tuple[str, ...] = () if comment is None else (comment,)
    return write_pgm(Graymap(_quantize(image, MAX_DEPTH), MAX_DEPTH, comments), path)


def save_mask(
    mask: npt.ArrayLike, path: PathLike, comment: Optional[str] = None
) -> Path:
    """Write a binary mask as an 8 bit graymap holding 0 and 255."""
    m: BinaryMask = as_mask(mask)
    comments: tuple[str, ...] = () if comment is None else (comment,)
    return write_pgm(Graymap(m.astype(np.uint8) * 255, 255, comments), path)


def save_probability(
    prob: npt.ArrayLike, path: PathLike, comment: Optional[str] = None
) -> Path:
    """Write a probability map as a 16 bit graymap, ``round(p * 65535)``.

    Reading it back and dividing by 65535 recovers each probability within 1/65535.
    """
    comments: tuple[str, ...] = () if comment is None else (comment,)
    return write_pgm(Graymap(_quantize(prob, MAX_DEPTH), MAX_DEPTH, comments), path)


@dataclass(frozen=True)
class SegmentationSample:
    """An image with its ground truth mask.

    Args:
        id (str): sample identifier.
        image (np.ndarray): (H, W) float32 image in [0, 1].
        mask (BinaryMask): (H, W) ground truth.
        spacing (float | None): physical length of one pixel, if known.

    Raises:
        ContractError: image and mask dimensions differ.

    """

    id: str
    image: np.ndarray
    mask: BinaryMask
    spacing: Optional[float] = None

    def __post_init__(self) -> None:
        if self.image.ndim != 2:
            raise ContractError(f"{self.id}: image must be 2-D, got {self.image.shape}")
        if self.image.shape != self.mask.shape:
            raise ContractError(
                f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ"
            )

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape  # type: ignore[return-value]

    def tensor(self) -> Tensor:
        """The image as a (1, 1, H, W) tensor."""
        return Tensor(self.image[np.newaxis, np.newaxis])


def synth_phantom(
    rng: np.random.Generator,
    size: int = 64,
    sample_id: str = "phantom",
) -> SegmentationSample:
    """Generate a synthetic chest radiograph with two lung fields.

    Two rotated ellipses, one per half of the image, are drawn dark on a brighter
    background with a low frequency illumination gradient, a horizontal sinusoidal rib
    texture and Gaussian pixel noise. The ellipse parameter ranges keep the two fields
    disjoint and inside the image, and the foreground fraction within [0.15, 0.45].

    Args:
        rng (np.random.Generator): source of every random draw, in a fixed order.
        size (int): side length, at least 32.
        sample_id (str): identifier of the produced sample.

    Returns:
        (SegmentationSample): image, mask and a spacing of 358.4 / size mm.

    Raises:
        ContractError: size below 32.

    """
    if size < 32:
        raise ContractError(f"phantoms need size >= 32, got {size}")

    centers: np.ndarray = (np.arange(size, dtype=np.float64) + 0.5) / size
    y, x = np.meshgrid(centers, centers, indexing="ij")

    mask: np.ndarray = np.zeros((size, size), dtype=np.bool_)
    for low, high in ((0.27, 0.33), (0.67, 0.73)):
        cx: float = rng.uniform(low, high)
        cy: float = rng.uniform(0.45, 0.55)
        a: float = rng.uniform(0.105, 0.13)
        b: float = rng.uniform(0.25, 0.33)
        theta: float = rng.uniform(-0.2, 0.2)
        dx, dy = x - cx, y - cy
        u: np.ndarray = dx * math.cos(theta) + dy * math.sin(theta)
        v: np.ndarray = -dx * math.sin(theta) + dy * math.cos(theta)
        mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0

    gx, gy = rng.uniform(-1.0, 1.0, size=2)
    period: float = rng.uniform(0.08, 0.12)
    phase: float = rng.uniform(0.0, 2 * math.pi)

    image: np.ndarray = 0.7 + 0.1 * (gx * (x - 0.5) + gy * (y - 0.5))
    image = image + 0.05 * np.sin(2 * math.pi * y / period + phase)
    image = image - 0.35 * mask
    image = image + rng.normal(0.0, 0.02, size=(size, size))

    return SegmentationSample(
        sample_id,
        np.clip(image, 0.0, 1.0).astype(np.float32),
        mask,
        FIELD_OF_VIEW_MM / size,
    )


def _nearest_index(in_extent: int, out_extent: int) -> np.ndarray:
    source: np.ndarray = np.floor(
        (np.arange(out_extent, dtype=np.float64) + 0.5) * in_extent / out_extent
    ).astype(np.intp)
    return np.minimum(source, in_extent - 1)


def resize_mask(mask: npt.ArrayLike, out_h: int, out_w: int) -> BinaryMask:
    """Nearest neighbor resize on half-pixel centers; the result stays binary.

    Examples:
        .. code-block:: python

            # 4x4 -> 2x2 samples source rows and columns 1 and 3
            resize_mask(m, 2, 2) == m[[1, 3]][:, [1, 3]]

    """
    m: BinaryMask = as_mask(mask)
    if out_h < 1 or out_w < 1:
        raise ContractError(f"output extent must be positive: {out_h}x{out_w}")
    rows: np.ndarray = _nearest_index(m.shape[0], out_h)
    cols: np.ndarray = _nearest_index(m.shape[1], out_w)

    return m[np.ix_(rows, cols)]


def resize_sample(sample: SegmentationSample, target: int) -> SegmentationSample:
    """Resize a sample to ``target x target``.

    The image is resized bilinearly, the mask by nearest neighbor, and the spacing
    scaled by original width / target.

    Raises:
        ContractError: target below 1.

    """
    if target < 1:
        raise ContractError(f"target extent must be positive, got {target}")
    if sample.size == (target, target):
        return sample

    image: Tensor = nn.bilinear_resize(
        Tensor(sample.image[np.newaxis, np.newaxis], dtype=np.float32), target, target
    )
    spacing: Optional[float] = (
        None if sample.spacing is None else sample.spacing * sample.size[1] / target
    )

    return SegmentationSample(
        sample.id,
        np.clip(image.data[0, 0], 0.0, 1.0),
        resize_mask(sample.mask, target, target),
        spacing,
    )


@dataclass(frozen=True)
class ManifestEntry:
    """One manifest row; paths are relative to the dataset root."""

    id: str
    image_path: str
    mask_path: str
    spacing: Optional[float] = None
    split: str = "train"


@dataclass
class DatasetManifest:
    """Ordered dataset entries of a directory.

    Raises:
        ContractError: duplicate ids or an unknown split tag.

    """

    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        seen: set[str] = set()
        for entry in self.entries:
            if entry.id in seen:
                raise ContractError(f"duplicate sample id {entry.id!r}")
            if entry.split not in SPLITS:
                raise ContractError(f"{entry.id}: unknown split {entry.split!r}")
            seen.add(entry.id)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def select(self, *splits: str) -> "DatasetManifest":
        """Entries tagged with any of ``splits``, order preserved."""
        return DatasetManifest(
            self.root, [e for e in self.entries if e.split in splits]
        )

    def subset(self, ids: Iterable[str]) -> "DatasetManifest":
        wanted: set[str] = set(ids)
        return DatasetManifest(self.root, [e for e in self.entries if e.id in wanted])

    @classmethod
    def read(cls, root: PathLike) -> "DatasetManifest":
        """Read ``root/manifest.csv`` and check that every referenced file exists.

        Raises:
            FileNotFoundError: the manifest or a referenced image or mask is missing.
            ContractError: duplicate ids, missing columns or a malformed spacing.

        """
        base = Path(root)
        entries: list[ManifestEntry] = []
        with open(base / MANIFEST, newline="", encoding="utf_8") as f:
            reader = csv.DictReader(f)
            missing: set[str] = set(MANIFEST_COLUMNS[:3]) - set(reader.fieldnames or ())
            if missing:
                raise ContractError(f"manifest lacks columns {sorted(missing)}")
            for row in reader:
                try:
                    spacing: Optional[float] = (
                        float(row["spacing"]) if row.get("spacing") else None
                    )
                except ValueError as e:
                    raise ContractError(f"{row['id']}: malformed spacing") from e
                entries.append(
                    ManifestEntry(
                        row["id"],
                        row["image_path"],
                        row["mask_path"],
                        spacing,
                        row.get("split") or "train",
                    )
                )

        for entry in entries:
            for relative in (entry.image_path, entry.mask_path):
                if not (base / relative).is_file():
                    raise FileNotFoundError(f"{entry.id}: missing file {relative}")

        return cls(base, entries)

    def write(self) -> Path:
        """Write ``manifest.csv`` into the root directory."""
        path: Path = self.root / MANIFEST
        with open(path, "w", newline="", encoding="utf_8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(MANIFEST_COLUMNS)
            for e in self.entries:
                spacing: str = "" if e.spacing is None else repr(e.spacing)
                writer.writerow([e.id, e.image_path, e.mask_path, spacing, e.split])

        return path


def split_odd_even(
    manifest: Union[DatasetManifest, Sequence[str]],
) -> tuple[list[str], list[str]]:
    """Partition ids by the parity of their trailing integer.

    Args:
        manifest (DatasetManifest | Sequence[str]): dataset, or bare ids.

    Returns:
        (tuple[list[str], list[str]]): odd-indexed ids, then even-indexed ids, each in
        manifest order.

    Raises:
        ContractError: an id without a trailing integer.

    Examples:
        .. code-block:: python

            odd, even = split_odd_even([f"case{i:03d}" for i in range(1, 248)])
            len(odd), len(even) == 124, 123

    """
    ids: list[str] = (
        manifest.ids if isinstance(manifest, DatasetManifest) else list(manifest)
    )
    odd: list[str] = []
    even: list[str] = []
    for sample_id in ids:
        match: Optional[re.Match[str]] = _TRAILING_INDEX.search(sample_id)
        if match is None:
            raise ContractError(f"id {sample_id!r} has no trailing integer index")
        (odd if int(match.group(1)) % 2 else even).append(sample_id)

    return odd, even


def write_dataset(
    root: PathLike,
    samples: Iterable[SegmentationSample],
    splits: Optional[Sequence[str]] = None,
) -> DatasetManifest:
    """Write samples as graymaps plus a manifest under ``root``.

    Args:
        root (PathLike): dataset directory, created when missing.
        samples (Iterable[SegmentationSample]): samples in manifest order.
        splits (Sequence[str] | None): split tag per sample; all ``train`` when None.

    Returns:
        (DatasetManifest): the written manifest.

    """
    base = Path(root)
    (base / "images").mkdir(parents=True, exist_ok=True)
    (base / "masks").mkdir(parents=True, exist_ok=True)

    entries: list[ManifestEntry] = []
    for i, sample in enumerate(samples):
        image_path: str = f"images/{sample.id}.pgm"
        mask_path: str = f"masks/{sample.id}.pgm"
        save_image(sample.image, base / image_path)
        save_mask(sample.mask, base / mask_path)
        split: str = "train" if splits is None else splits[i]
        entries.append(
            ManifestEntry(sample.id, image_path, mask_path, sample.spacing, split)
        )

    manifest = DatasetManifest(base, entries)
    manifest.write()
    logger.debug("wrote %d samples to %s", len(entries), base)

    return manifest


def load_samples(
    manifest: DatasetManifest,
    target: Optional[int] = None,
) -> list[SegmentationSample]:
    """Load every manifest entry, optionally resized to ``target x target``."""
    samples: list[SegmentationSample] = []
    for entry in manifest:
        sample = SegmentationSample(
            entry.id,
            load_image(manifest.root / entry.image_path),
            load_mask(manifest.root / entry.mask_path),
            entry.spacing,
        )
        samples.append(sample if target is None else resize_sample(sample, target))

    return samples
