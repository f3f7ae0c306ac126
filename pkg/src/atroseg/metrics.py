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

"""Overlap and boundary distance metrics for binary segmentation masks.

Jaccard (JSC) and Dice (DC) measure region overlap. The average contour distance (ACD)
and average surface distance (ASD) are built on minimum Euclidean distances between the
pixel centers of two boundary sets. Boundary pixels are foreground pixels with at least
one 4-neighbor that is background or outside of the image.
"""

import csv
import logging
import math
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import numpy.typing as npt
from scipy import ndimage

from ._metrics import pairwise_min_distances
from .errors import ContractError, UndefinedMetricError
from .tensor import Tensor


__all__ = [
    "BOUNDARY_CONVENTION",
    "BinaryMask",
    "BoundarySet",
    "MetricsReport",
    "SampleMetrics",
    "acd",
    "acd_py",
    "as_mask",
    "asd",
    "asd_py",
    "binarize",
    "dice",
    "evaluate_many",
    "evaluate_sample",
    "extract_boundary",
    "extract_boundary_py",
    "jaccard",
    "min_distances",
    "min_distances_py",
]

logger = logging.getLogger(__name__)

BinaryMask = npt.NDArray[np.bool_]
BoundarySet = npt.NDArray[np.intp]
BOUNDARY_CONVENTION: str = "4-connected"
FOUR_NEIGHBORS: npt.NDArray[np.bool_] = ndimage.generate_binary_structure(2, 1)
EMPTY_BOUNDARY: str = "empty-boundary"
REPORT_COLUMNS: tuple[str, ...] = (
    "sample_id",
    "jsc",
    "dc",
    "acd",
    "asd",
    "unit",
    "flags",
)


def as_mask(values: npt.ArrayLike) -> BinaryMask:
    """Validate and convert a 2-D array of {0, 1} (or booleans) into a binary mask.

    Raises:
        ContractError: not 2 dimensional, or holds values other than 0 and 1.

    """
    array: np.ndarray = np.asarray(values)
    if array.ndim != 2:
        raise ContractError(f"masks are 2 dimensional, got shape {array.shape}")
    if array.dtype == np.bool_:
        return array
    if not np.isin(array, (0, 1)).all():
        raise ContractError("mask values must be 0 or 1")

    return array.astype(np.bool_)


def _pair(pred: npt.ArrayLike, gt: npt.ArrayLike) -> tuple[BinaryMask, BinaryMask]:
    p: BinaryMask = as_mask(pred)
    g: BinaryMask = as_mask(gt)
    if p.shape != g.shape:
        raise ContractError(f"mask dimensions differ: {p.shape} vs {g.shape}")

    return p, g


def jaccard(pred: npt.ArrayLike, gt: npt.ArrayLike) -> float:
    """Jaccard similarity coefficient, intersection over union.

    Args:
        pred (BinaryMask): predicted mask.
        gt (BinaryMask): ground truth mask of equal dimensions.

    Returns:
        (float): |pred & gt| / |pred | gt|, or 1.0 when both masks are empty.

    Raises:
        ContractError: dimension mismatch.

    Examples:
        .. code-block:: python

            jaccard([[1, 1, 1, 0]], [[0, 1, 1, 1]]) == 0.5

    """
    p, g = _pair(pred, gt)
    union: int = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0

    return int(np.count_nonzero(p & g)) / union


def dice(pred: npt.ArrayLike, gt: npt.ArrayLike) -> float:
    """Dice coefficient, ``2 |pred & gt| / (|pred| + |gt|)``; 1.0 when both are empty.

    Raises:
        ContractError: dimension mismatch.

    """
    p, g = _pair(pred, gt)
    total: int = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
    if total == 0:
        return 1.0

    return 2 * int(np.count_nonzero(p & g)) / total


def extract_boundary(mask: npt.ArrayLike) -> BoundarySet:
    """Foreground pixels touching background (or the image border) along a 4-neighbor.

    Args:
        mask (BinaryMask): binary mask.

    Returns:
        (BoundarySet): (n, 2) array of (row, col) coordinates in row-major order.

    Examples:
        .. code-block:: python

            # a filled 4x4 square yields its 12 perimeter pixels
            len(extract_boundary(np.ones((4, 4), dtype=bool))) == 12

    """
    m: BinaryMask = as_mask(mask)
    if not m.any():
        return np.empty((0, 2), dtype=np.intp)
    interior: BinaryMask = ndimage.binary_erosion(
        m, structure=FOUR_NEIGHBORS, border_value=0
    )

    return np.argwhere(m & ~interior)


def extract_boundary_py(mask: npt.ArrayLike) -> BoundarySet:
    """Pure python boundary extraction by direct inspection of the four neighbors."""
    m: BinaryMask = as_mask(mask)
    rows, cols = m.shape
    points: list[tuple[int, int]] = []
    for r in range(rows):
        for c in range(cols):
            if not m[r, c]:
                continue
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                nr, nc = r + dr, c + dc
                if not (0 <= nr < rows and 0 <= nc < cols) or not m[nr, nc]:
                    points.append((r, c))
                    break

    return np.array(points, dtype=np.intp).reshape(-1, 2)


def _on_grid(points: np.ndarray) -> bool:
    return bool(np.all(points >= 0) and np.array_equal(points, np.round(points)))


def min_distances(source: npt.ArrayLike, target: npt.ArrayLike) -> np.ndarray:
    """Euclidean distance from every source point to its nearest target point.

    Pixel coordinates go through a Euclidean distance transform of the target set;
    coordinates off the pixel grid fall back to the compiled pairwise kernel.

    Args:
        source (ArrayLike): (n, 2) point coordinates.
        target (ArrayLike): (m, 2) point coordinates.

    Returns:
        (np.ndarray): (n,) float64 minimum distances.

    Raises:
        ValueError: when target is empty while source is not.

    Examples:
        .. code-block:: python

            min_distances([[0, 0], [3, 4]], [[0, 1], [6, 8]])
            # array([1.        , 4.24264069])

    """
    src: np.ndarray = np.asarray(source, np.float64).reshape(-1, 2)
    tgt: np.ndarray = np.asarray(target, np.float64).reshape(-1, 2)
    if src.shape[0] == 0:
        return np.empty(0, dtype=np.float64)
    if tgt.shape[0] == 0:
        raise ValueError("target point set is empty")
    if not (_on_grid(src) and _on_grid(tgt)):
        return pairwise_min_distances(
            np.ascontiguousarray(src), np.ascontiguousarray(tgt)
        )

    s: np.ndarray = src.astype(np.intp)
    t: np.ndarray = tgt.astype(np.intp)
    rows, cols = np.maximum(s.max(axis=0), t.max(axis=0)) + 1
    outside: BinaryMask = np.ones((int(rows), int(cols)), dtype=bool)
    outside[t[:, 0], t[:, 1]] = False
    field: np.ndarray = ndimage.distance_transform_edt(outside)

    return np.asarray(field[s[:, 0], s[:, 1]], dtype=np.float64)


def min_distances_py(source: npt.ArrayLike, target: npt.ArrayLike) -> np.ndarray:
    """Brute force all-pairs minimum Euclidean distance from each source point.

    Raises:
        ValueError: when target is empty while source is not.

    """
    src: list[list[float]] = np.asarray(source, np.float64).reshape(-1, 2).tolist()
    tgt: list[list[float]] = np.asarray(target, np.float64).reshape(-1, 2).tolist()
    if src and not tgt:
        raise ValueError("target point set is empty")

    return np.array(
        [min(math.dist(s, t) for t in tgt) for s in src], dtype=np.float64
    )


def _points(boundary: npt.ArrayLike, label: str) -> np.ndarray:
    points: np.ndarray = np.ascontiguousarray(
        np.asarray(boundary, dtype=np.float64).reshape(-1, 2)
    )
    if points.shape[0] == 0:
        raise UndefinedMetricError(f"boundary {label} is empty")

    return points


def _check_spacing(spacing: float) -> None:
    if not (math.isfinite(spacing) and spacing > 0):
        raise ContractError(f"spacing must be a positive length, got {spacing}")


def acd(s: npt.ArrayLike, g: npt.ArrayLike, spacing: float = 1.0) -> float:
    """Average contour distance between two boundary sets.

    ``0.5 * (mean_i d(s_i, G) + mean_j d(g_j, S)) * spacing``

    Args:
        s (BoundarySet): segmented boundary.
        g (BoundarySet): ground truth boundary.
        spacing (float): length of one pixel.

    Returns:
        (float): distance in units of ``spacing``.

    Raises:
        UndefinedMetricError: either boundary is empty.
        ContractError: non-positive spacing.

    """
    _check_spacing(spacing)
    sp: np.ndarray = _points(s, "S")
    gp: np.ndarray = _points(g, "G")

    return 0.5 * (
        float(np.mean(min_distances(sp, gp))) + float(np.mean(min_distances(gp, sp)))
    ) * spacing


def asd(s: npt.ArrayLike, g: npt.ArrayLike, spacing: float = 1.0) -> float:
    """Average surface distance, the pooled mean of both directed distance sets.

    ``(sum_i d(s_i, G) + sum_j d(g_j, S)) / (n_S + n_G) * spacing``

    Raises:
        UndefinedMetricError: either boundary is empty.
        ContractError: non-positive spacing.

    """
    _check_spacing(spacing)
    sp: np.ndarray = _points(s, "S")
    gp: np.ndarray = _points(g, "G")
    total: float = float(np.sum(min_distances(sp, gp))) + float(
        np.sum(min_distances(gp, sp))
    )

    return total / (sp.shape[0] + gp.shape[0]) * spacing


def acd_py(s: npt.ArrayLike, g: npt.ArrayLike, spacing: float = 1.0) -> float:
    """Average contour distance over the brute force distance kernel."""
    _check_spacing(spacing)
    sp: np.ndarray = _points(s, "S")
    gp: np.ndarray = _points(g, "G")
    forward: list[float] = min_distances_py(sp, gp).tolist()
    reverse: list[float] = min_distances_py(gp, sp).tolist()

    return 0.5 * (sum(forward) / len(forward) + sum(reverse) / len(reverse)) * spacing


def asd_py(s: npt.ArrayLike, g: npt.ArrayLike, spacing: float = 1.0) -> float:
    """Average surface distance over the brute force distance kernel."""
    _check_spacing(spacing)
    sp: np.ndarray = _points(s, "S")
    gp: np.ndarray = _points(g, "G")
    distances: list[float] = (
        min_distances_py(sp, gp).tolist() + min_distances_py(gp, sp).tolist()
    )

    return sum(distances) / len(distances) * spacing


def binarize(prob: Union[Tensor, npt.ArrayLike], threshold: float = 0.5) -> BinaryMask:
    """Threshold a foreground probability map; ties go to the foreground.

    Args:
        prob (Tensor | ArrayLike): a 2-D foreground probability map, or a single sample
            tensor shaped (1, 1, H, W) or (1, 2, H, W), in which case the last channel
            (the foreground class) is used.
        threshold (float): foreground where ``prob >= threshold``.

    Returns:
        (BinaryMask): (H, W) mask.

    Raises:
        ContractError: unsupported shape.

    """
    values: np.ndarray = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    if values.ndim == 4:
        if values.shape[0] != 1 or values.shape[1] not in (1, 2):
            raise ContractError(
                f"binarize expects a single sample with 1 or 2 channels, got "
                f"{values.shape}"
            )
        values = values[0, -1]
    if values.ndim != 2:
        raise ContractError(f"probability map must be 2-D, got shape {values.shape}")

    return values >= threshold


@dataclass(frozen=True)
class SampleMetrics:
    """Metrics of one sample; distances are None when undefined (flagged)."""

    sample_id: str
    jsc: float
    dc: float
    acd: Optional[float]
    asd: Optional[float]
    flags: tuple[str, ...] = ()


def evaluate_sample(
    sample_id: str,
    pred: npt.ArrayLike,
    gt: npt.ArrayLike,
    spacing: Optional[float] = None,
) -> SampleMetrics:
    """Compute JSC, DC, ACD and ASD of a single prediction.

    Args:
        sample_id (str): identifier carried into the report.
        pred (BinaryMask): predicted mask.
        gt (BinaryMask): ground truth mask.
        spacing (float): pixel length; None reports distances in pixels.

    Returns:
        (SampleMetrics): metrics; an empty boundary sets acd/asd to None and adds the
        ``empty-boundary`` flag.

    """
    p, g = _pair(pred, gt)
    scale: float = 1.0 if spacing is None else spacing
    s_boundary: BoundarySet = extract_boundary(p)
    g_boundary: BoundarySet = extract_boundary(g)
    try:
        contour: Optional[float] = acd(s_boundary, g_boundary, scale)
        surface: Optional[float] = asd(s_boundary, g_boundary, scale)
        flags: tuple[str, ...] = ()
    except UndefinedMetricError:
        logger.debug("sample %s has an empty boundary", sample_id)
        contour, surface, flags = None, None, (EMPTY_BOUNDARY,)

    return SampleMetrics(sample_id, jaccard(p, g), dice(p, g), contour, surface, flags)


def _format(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


@dataclass
class MetricsReport:
    """Per-sample metrics with aggregate mean and population standard deviation.

    Args:
        samples (list[SampleMetrics]): evaluated samples, in a fixed order.
        spacing (float | None): pixel length used for distances; None means pixels.
        boundary (str): boundary pixel convention.
        resolution (str): resolution the masks were compared at.

    """

    samples: list[SampleMetrics] = field(default_factory=list)
    spacing: Optional[float] = None
    boundary: str = BOUNDARY_CONVENTION
    resolution: str = "native"

    @property
    def unit(self) -> str:
        return "px" if self.spacing is None else "mm"

    def values(self, metric: str) -> np.ndarray:
        """Defined values of one metric (``jsc``, ``dc``, ``acd`` or ``asd``)."""
        if metric not in REPORT_COLUMNS[1:5]:
            raise ContractError(f"unknown metric {metric!r}")
        found: list[Optional[float]] = [getattr(s, metric) for s in self.samples]

        return np.array([v for v in found if v is not None], dtype=np.float64)

    def excluded(self, metric: str) -> int:
        """Number of samples whose metric was undefined."""
        return len(self.samples) - len(self.values(metric))

    def mean(self, metric: str) -> Optional[float]:
        v: np.ndarray = self.values(metric)
        return float(np.mean(v)) if v.size else None

    def std(self, metric: str) -> Optional[float]:
        v: np.ndarray = self.values(metric)
        return float(np.std(v, ddof=0)) if v.size else None

    def ranked(self, count: int = 2) -> tuple[list[str], list[str]]:
        """Return the ``count`` best and worst sample ids by JSC (ties by id)."""
        order: list[SampleMetrics] = sorted(
            self.samples, key=lambda s: (-s.jsc, s.sample_id)
        )
        best: list[str] = [s.sample_id for s in order[:count]]
        tail: list[SampleMetrics] = order[max(0, len(order) - count) :]
        worst: list[str] = [s.sample_id for s in reversed(tail)]

        return best, worst

    def summary(self) -> dict[str, Any]:
        """Aggregate statistics keyed ``{metric}_mean`` / ``{metric}_std``."""
        out: dict[str, Any] = {"n": len(self.samples), "unit": self.unit}
        for metric in REPORT_COLUMNS[1:5]:
            out[f"{metric}_mean"] = self.mean(metric)
            out[f"{metric}_std"] = self.std(metric)
            out[f"{metric}_excluded"] = self.excluded(metric)

        return out

    def _metadata(self) -> str:
        parts: list[str] = [
            f"n={len(self.samples)}",
            f"excluded={self.excluded('acd')}",
            f"boundary={self.boundary}",
            f"resolution={self.resolution}",
        ]
        if self.spacing is not None:
            parts.append(f"spacing={self.spacing!r}")

        return ";".join(parts)

    def write_csv(self, path: Union[str, Path]) -> None:
        """Write the per-sample rows followed by the mean and std rows."""
        with open(path, "w", newline="", encoding="utf_8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(REPORT_COLUMNS)
            for s in self.samples:
                writer.writerow(
                    [
                        s.sample_id,
                        _format(s.jsc),
                        _format(s.dc),
                        _format(s.acd),
                        _format(s.asd),
                        self.unit,
                        ";".join(s.flags),
                    ]
                )
            metadata: str = self._metadata()
            for label, stat in (("mean", self.mean), ("std", self.std)):
                writer.writerow(
                    [label, *(_format(stat(m)) for m in REPORT_COLUMNS[1:5])]
                    + [self.unit, metadata]
                )

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "MetricsReport":
        """Read a report written by :meth:`write_csv`; aggregates are recomputed."""
        samples: list[SampleMetrics] = []
        metadata: dict[str, str] = {}
        with open(path, newline="", encoding="utf_8") as f:
            for row in csv.DictReader(f):
                if row["sample_id"] in ("mean", "std"):
                    metadata.update(
                        item.split("=", 1) for item in row["flags"].split(";") if item
                    )
                    continue
                samples.append(
                    SampleMetrics(
                        row["sample_id"],
                        float(row["jsc"]),
                        float(row["dc"]),
                        float(row["acd"]) if row["acd"] else None,
                        float(row["asd"]) if row["asd"] else None,
                        tuple(x for x in row["flags"].split(";") if x),
                    )
                )
        spacing: Optional[float] = (
            float(metadata["spacing"]) if "spacing" in metadata else None
        )

        return cls(
            samples,
            spacing,
            metadata.get("boundary", BOUNDARY_CONVENTION),
            metadata.get("resolution", "native"),
        )


def evaluate_many(
    pairs: Iterable[tuple[str, npt.ArrayLike, npt.ArrayLike]],
    spacing: Optional[float] = None,
    max_workers: int = 1,
    resolution: str = "native",
) -> MetricsReport:
    """Evaluate (sample_id, pred, gt) triples into a report.

    Samples are evaluated on a thread pool of ``max_workers``; rows keep input order.
    """
    items: Sequence[tuple[str, npt.ArrayLike, npt.ArrayLike]] = list(pairs)
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        samples: list[SampleMetrics] = list(
            pool.map(lambda item: evaluate_sample(*item, spacing=spacing), items)
        )
    report = MetricsReport(samples, spacing, BOUNDARY_CONVENTION, resolution)
    logger.debug(
        "evaluated %d samples, %d with undefined distances",
        len(samples),
        report.excluded("acd"),
    )

    return report
