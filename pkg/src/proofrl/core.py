"""Raster and grid primitives shared across the package."""
from dataclasses import dataclass
import threading

import numpy as np

from .exceptions import ActionError, BoundsError, DimensionError, LabelError
from .validation import LABEL_DTYPE, check_label_map


@dataclass(frozen=True)
class GridSpec:
    """Regular grid of action points.

    Flat index ``k`` maps to ``(i, j) = divmod(k, cols)`` and to the pixel
    ``(x, y) = (origin + i * cell, origin + j * cell)``.
    """

    rows: int
    cols: int
    cell: int
    origin: int

    @classmethod
    def for_size(cls, size, n):
        """``n x n`` grid spaced ``size // (n + 1)`` apart, origin one cell in."""
        cell = size // (n + 1)
        if cell < 1:
            raise DimensionError(f"a {n}x{n} grid does not fit in {size} pixels")
        return cls(n, n, cell, cell)

    @classmethod
    def locator(cls, sub_size=512, n=7):
        return cls.for_size(sub_size, n)

    @classmethod
    def corrector(cls, patch_size=128, n=15):
        return cls.for_size(patch_size, n)

    @property
    def size(self):
        return self.rows * self.cols

    def pixel(self, index):
        return grid_point_to_pixel(self, index)

    def pixels(self):
        """All grid pixels as an ``(size, 2)`` array of (x, y)."""
        i, j = np.divmod(np.arange(self.size), self.cols)
        return np.stack([self.origin + i * self.cell, self.origin + j * self.cell], axis=1)


def grid_point_to_pixel(grid, index):
    index = int(index)
    if not 0 <= index < grid.size:
        raise ActionError(f"grid action {index} out of range [0, {grid.size})")
    i, j = divmod(index, grid.cols)
    return grid.origin + i * grid.cell, grid.origin + j * grid.cell


@dataclass(frozen=True)
class PatchRef:
    origin_x: int
    origin_y: int
    size: int = 128

    @classmethod
    def centered(cls, x, y, size=128):
        """Square window of side ``size`` centred on pixel (x, y)."""
        half = size // 2
        return cls(int(x) - half, int(y) - half, size)

    @property
    def slices(self):
        return (slice(self.origin_y, self.origin_y + self.size),
                slice(self.origin_x, self.origin_x + self.size))

    def check_within(self, shape):
        h, w = shape[:2]
        if (self.origin_x < 0 or self.origin_y < 0
                or self.origin_x + self.size > w or self.origin_y + self.size > h):
            raise BoundsError(
                f"patch at ({self.origin_x}, {self.origin_y}) of size {self.size} "
                f"exceeds raster of {w}x{h}")


def crop(raster, patch):
    """Independent copy of the window ``patch`` of ``raster``."""
    raster = np.asarray(raster)
    patch.check_within(raster.shape)
    return raster[patch.slices].copy()


def blit(parent, patch, content):
    """Return a copy of ``parent`` with the window ``patch`` replaced by ``content``.

    Label 0 may not be written over a labelled pixel; background already
    present in the window may stay.
    """
    parent = check_label_map(parent, "parent")
    content = check_label_map(content, "content")
    if content.shape != (patch.size, patch.size):
        raise DimensionError(
            f"content of shape {content.shape} does not match patch size {patch.size}")
    patch.check_within(parent.shape)
    if np.any((content == 0) & (parent[patch.slices] != 0)):
        raise LabelError("blit content erases labelled pixels with label 0")
    out = parent.copy()
    out[patch.slices] = content
    return out


def locator_patch(grid, index, patch_size=None):
    """The window a locator action collects: the four grid squares around its point."""
    x, y = grid_point_to_pixel(grid, index)
    return PatchRef.centered(x, y, patch_size or 2 * grid.cell)


def label_ids(labels):
    """Sorted distinct nonzero labels."""
    ids = np.unique(labels)
    return ids[ids != 0]


class FreshLabels:
    """Monotone source of labels never seen before in a working map.

    Corrector episodes run on cropped copies; drawing new labels from one
    counter per environment keeps write-back collision free.
    """

    def __init__(self, start):
        self._next = int(start)
        self._lock = threading.Lock()

    @classmethod
    def after(cls, *maps):
        top = max((int(np.max(m)) for m in maps if m is not None and np.size(m)), default=0)
        return cls(top + 1)

    def peek(self):
        return self._next

    def __call__(self):
        with self._lock:
            value = self._next
            if value > np.iinfo(LABEL_DTYPE).max:
                raise LabelError("label space exhausted")
            self._next += 1
            return value
