"""Raster containers, reflect-padded patch extraction, resizing and overlap stitching."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

LABEL_NONDEPOSIT = 0
LABEL_DEPOSIT = 1
LABEL_UNKNOWN = 2


class Raster:
    """Immutable single-band 2-D grid of finite reals."""

    __slots__ = ("_values",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"raster must be a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("raster values must be finite")
        arr.setflags(write=False)
        self._values = arr

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def height(self) -> int:
        return self._values.shape[0]

    @property
    def width(self) -> int:
        return self._values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._values.shape

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._values, other._values))

    def __repr__(self):
        return f"Raster({self.height}x{self.width})"


class LabelMap:
    """Per-pixel class grid over {0: non-deposit, 1: deposit, 2: unknown}."""

    __slots__ = ("_labels",)

    def __init__(self, labels):
        arr = np.array(labels)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"label map must be a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isin(arr, (LABEL_NONDEPOSIT, LABEL_DEPOSIT, LABEL_UNKNOWN))):
            raise ValueError("labels must be in {0, 1, 2}")
        arr = arr.astype(np.uint8)
        arr.setflags(write=False)
        self._labels = arr

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    @property
    def height(self) -> int:
        return self._labels.shape[0]

    @property
    def width(self) -> int:
        return self._labels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._labels.shape

    def count(self, label: int) -> int:
        return int(np.count_nonzero(self._labels == label))

    def check_matches(self, raster: Raster) -> None:
        if self.shape != raster.shape:
            raise ValueError(f"label map {self.shape} does not match raster {raster.shape}")

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return bool(np.array_equal(self._labels, other._labels))


@dataclass(frozen=True)
class PatchSpec:
    patch_size: int = 50
    stride: int = 1
    boundary: str = "reflect"

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.boundary != "reflect":
            raise ValueError(f"unsupported boundary policy {self.boundary!r}")

    @property
    def offsets(self) -> np.ndarray:
        """Window offsets relative to the center; even sizes span [-P/2, P/2 - 1]."""
        half = self.patch_size // 2
        return np.arange(self.patch_size) - half


def reflect_index(idx, n: int) -> np.ndarray:
    """Mirror indices into [0, n) without repeating the edge sample."""
    idx = np.asarray(idx, dtype=np.int64)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def _as_array(image) -> np.ndarray:
    return image.values if isinstance(image, Raster) else np.asarray(image, dtype=np.float64)


def _check_center(shape, center) -> tuple[int, int]:
    row, col = int(center[0]), int(center[1])
    if not (0 <= row < shape[0] and 0 <= col < shape[1]):
        raise ValueError(f"center outside raster: {center} not in {shape}")
    return row, col


def extract_patch(image: Raster, center, spec: PatchSpec) -> Raster:
    arr = _as_array(image)
    row, col = _check_center(arr.shape, center)
    offs = spec.offsets
    rows = reflect_index(row + offs, arr.shape[0])
    cols = reflect_index(col + offs, arr.shape[1])
    return Raster(arr[np.ix_(rows, cols)])


def extract_patches(image, centers: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Vectorised extract_patch: returns an (n, P, P) array for an (n, 2) center array."""
    arr = _as_array(image)
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    h, w = arr.shape
    if centers.size and (
        centers[:, 0].min() < 0 or centers[:, 0].max() >= h
        or centers[:, 1].min() < 0 or centers[:, 1].max() >= w
    ):
        raise ValueError("center outside raster")
    offs = spec.offsets
    rows = reflect_index(centers[:, 0:1] + offs, h)
    cols = reflect_index(centers[:, 1:2] + offs, w)
    return arr[rows[:, :, None], cols[:, None, :]]


def iter_centers(image, spec: PatchSpec) -> Iterator[tuple[int, int]]:
    h, w = _shape_of(image)
    for r in range(0, h, spec.stride):
        for c in range(0, w, spec.stride):
            yield (r, c)


def center_grid(shape: tuple[int, int], stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column coordinates of the center lattice, in iter_centers order."""
    return np.arange(0, shape[0], stride), np.arange(0, shape[1], stride)


def _shape_of(image) -> tuple[int, int]:
    if isinstance(image, (Raster, LabelMap)):
        return image.shape
    if isinstance(image, tuple):
        return image
    return np.shape(image)


def resize_nearest(image, new_height: int, new_width: int) -> Raster:
    if new_height < 1 or new_width < 1:
        raise ValueError("target dimensions must be >= 1")
    arr = _as_array(image)
    rows = nearest_source_index(arr.shape[0], new_height)
    cols = nearest_source_index(arr.shape[1], new_width)
    return Raster(arr[np.ix_(rows, cols)])


def nearest_source_index(src: int, dst: int) -> np.ndarray:
    """floor((i + 0.5) * src / dst) computed in exact integer arithmetic."""
    i = np.arange(dst, dtype=np.int64)
    return ((2 * i + 1) * src) // (2 * dst)


@dataclass
class StitchResult:
    raster: Raster
    coverage: np.ndarray = field(repr=False)

    @property
    def holes(self) -> int:
        return int(np.count_nonzero(self.coverage == 0))


class StitchAccumulator:
    """Double-precision (sum, count) grids for uniform overlap averaging.

    Holds ``n_maps`` independent grids so one pass over the centers can stitch
    several filters at once.
    """

    def __init__(self, height: int, width: int, patch_size: int, n_maps: int = 1):
        self.height = height
        self.width = width
        self.patch_size = patch_size
        self.offsets = PatchSpec(patch_size).offsets
        self.sums = np.zeros((n_maps, height, width), dtype=np.float64)
        self.counts = np.zeros((height, width), dtype=np.int64)

    def add_grid(self, rows: np.ndarray, cols: np.ndarray, values: np.ndarray) -> None:
        """Accumulate patches laid out on the lattice ``rows x cols``.

        ``values`` has shape (n_maps, len(rows), len(cols), P, P). ``rows`` and
        ``cols`` must be arithmetic progressions so that, for a fixed window
        offset, no two patches land on the same target pixel.
        """
        p = self.patch_size
        if values.shape[-2:] != (p, p) or values.shape[1:3] != (len(rows), len(cols)):
            raise ValueError(f"patch block shape {values.shape} does not match lattice/patch size")
        if values.shape[0] != self.sums.shape[0]:
            raise ValueError("map count mismatch")
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        for i, dr in enumerate(self.offsets):
            rsrc, rdst = _in_bounds(rows + dr, self.height)
            if rsrc is None:
                continue
            row_block = values[:, rsrc, :, i, :]
            for j, dc in enumerate(self.offsets):
                csrc, cdst = _in_bounds(cols + dc, self.width)
                if csrc is None:
                    continue
                self.sums[:, rdst, cdst] += row_block[:, :, csrc, j]
                self.counts[rdst, cdst] += 1

    def add_patch(self, center, values: np.ndarray) -> None:
        """Accumulate one patch (shape (n_maps, P, P) or (P, P)) around ``center``."""
        row, col = _check_center((self.height, self.width), center)
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 2:
            values = values[None]
        self.add_grid(np.array([row]), np.array([col]), values[:, None, None])

    def result(self) -> list[StitchResult]:
        out = np.zeros_like(self.sums)
        covered = self.counts > 0
        out[:, covered] = self.sums[:, covered] / self.counts[covered]
        return [StitchResult(Raster(m), self.counts.copy()) for m in out]


def _in_bounds(target: np.ndarray, n: int):
    """Source/destination slices for the in-bounds part of a lattice shifted by an offset."""
    mask = (target >= 0) & (target < n)
    if not mask.any():
        return None, None
    src = np.flatnonzero(mask)
    dst = target[mask]
    if len(dst) == 1:
        return slice(src[0], src[0] + 1), slice(dst[0], dst[0] + 1)
    step = dst[1] - dst[0]
    if step <= 0 or not np.all(np.diff(dst) == step):
        raise ValueError("center lattice must be strictly increasing with a constant step")
    return slice(src[0], src[-1] + 1), slice(dst[0], dst[-1] + 1, step)


def stitch_overlapping(
    patches: Iterable[tuple[Sequence[int], object]],
    out_height: int,
    out_width: int,
    spec: PatchSpec,
) -> StitchResult:
    """Average every patch contribution onto the pixels its window covers.

    Contributions are summed in canonical order (by center, then by patch
    content for repeated centers), so the result does not depend on the order
    of the input sequence.
    """
    p = spec.patch_size
    items = []
    for center, patch in patches:
        arr = _as_array(patch)
        if arr.shape != (p, p):
            raise ValueError(f"patch shape {arr.shape} != ({p}, {p})")
        items.append((_check_center((out_height, out_width), center), arr))
    items.sort(key=lambda it: (it[0], it[1].tobytes()))
    n_pix = out_height * out_width
    if not items:
        return StitchResult(Raster(np.zeros((out_height, out_width))),
                            np.zeros((out_height, out_width), dtype=np.int64))

    centers = np.array([c for c, _ in items], dtype=np.int64)
    values = np.stack([a for _, a in items])
    offs = spec.offsets
    rr = (centers[:, 0:1] + offs)[:, :, None]
    cc = (centers[:, 1:2] + offs)[:, None, :]
    inside = (rr >= 0) & (rr < out_height) & (cc >= 0) & (cc < out_width)
    flat = np.broadcast_to(rr * out_width + cc, inside.shape)[inside]
    # bincount adds in array order, which is the canonical order above
    sums = np.bincount(flat, weights=values[inside], minlength=n_pix)
    counts = np.bincount(flat, minlength=n_pix)
    out = np.zeros(n_pix)
    covered = counts > 0
    out[covered] = sums[covered] / counts[covered]
    shape = (out_height, out_width)
    return StitchResult(Raster(out.reshape(shape)), counts.reshape(shape))
