"""Label-editing operators invoked by the correction agents."""
import numpy as np
from scipy import ndimage

from ._flood import component_bfs, farthest_pixel, two_seed_flood
from .exceptions import AdjacencyError, BoundsError, LabelError, NoOpEdit, ParameterError
from .validation import POINT_DTYPE, check_em_image, check_label_map

WATERSHED_SIGMA = 2.0
POINT_SIGMA = 8.0


def gaussian_smooth(img, sigma=WATERSHED_SIGMA):
    """Altitude map for the watershed: ``255 - G_sigma * img``.

    The kernel is separable, truncated at 3 sigma and borders are clamped,
    so dark membranes become ridges.
    """
    if sigma <= 0:
        raise ParameterError("sigma must be positive")
    img = check_em_image(img).astype(np.float64)
    smoothed = ndimage.gaussian_filter(img, sigma, mode="nearest", truncate=3.0)
    return 255.0 - smoothed


def _check_point(shape, p):
    x, y = int(p[0]), int(p[1])
    if not (0 <= x < shape[1] and 0 <= y < shape[0]):
        raise BoundsError(f"point ({x}, {y}) outside raster of {shape[1]}x{shape[0]}")
    return x, y


def segment_at(labels, p):
    x, y = _check_point(np.shape(labels), p)
    return int(labels[y, x])


def split_basins(labels, altitude, target_pixel):
    """Two-basin partition of the component under ``target_pixel``.

    Flooding starts from the target and from the geodesically farthest pixel
    of the same 4-connected component. Returns a uint8 raster with 1 on the
    basin that keeps its label, 2 on the basin to relabel, 0 elsewhere. The
    basin to relabel is the one with fewer pixels on the raster border (the
    farthest pixel's basin on ties), so that when the raster is a window of
    a larger map, a part lying wholly inside the window is relabelled as a
    whole.
    """
    labels = np.ascontiguousarray(labels)
    x, y = _check_point(labels.shape, target_pixel)
    if labels[y, x] == 0:
        raise NoOpEdit("target pixel lies on background")
    start = y * labels.shape[1] + x
    order, dist = component_bfs(labels, start)
    if order.shape[0] < 2:
        raise NoOpEdit("target segment has a single pixel")
    far = farthest_pixel(order, dist)
    member = (dist >= 0).reshape(labels.shape)
    altitude = np.ascontiguousarray(altitude, dtype=np.float64)
    basins = two_seed_flood(altitude, member, start, far)
    # the basin touching the raster border less is the one that gets relabelled
    rim = np.concatenate([basins[0], basins[-1], basins[1:-1, 0], basins[1:-1, -1]])
    if np.count_nonzero(rim == 2) > np.count_nonzero(rim == 1):
        basins[basins > 0] = 3 - basins[basins > 0]
    return basins


def watershed_split(labels, altitude, target_pixel, fresh_label=None):
    """Split the segment under ``target_pixel`` in two by seeded watershed.

    See :func:`split_basins` for the seeding and for which basin keeps the
    old label; the other receives ``fresh_label`` (default: current maximum
    + 1). Pixels of the same label in other components are left alone.
    """
    labels = check_label_map(labels)
    if np.shape(altitude) != labels.shape:
        raise ParameterError("altitude map does not match the label map")
    basins = split_basins(labels, altitude, target_pixel)
    if fresh_label is None:
        fresh_label = int(labels.max()) + 1
    if fresh_label == 0 or np.any(labels == fresh_label):
        raise LabelError(f"fresh label {fresh_label} is already in use")
    out = labels.copy()
    out[basins == 2] = fresh_label
    return out


def adjacency_pairs(labels):
    """Sorted set of 4-adjacent (a, b) label pairs with 0 < a < b."""
    labels = np.asarray(labels)
    pairs = set()
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = (a != b) & (a != 0) & (b != 0)
        if diff.any():
            lo = np.minimum(a[diff], b[diff]).astype(np.int64)
            hi = np.maximum(a[diff], b[diff]).astype(np.int64)
            pairs.update(zip(lo.tolist(), hi.tolist()))
    return sorted(pairs)


def are_adjacent(labels, a, b):
    labels = np.asarray(labels)
    for u, v in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        if np.any(((u == a) & (v == b)) | ((u == b) & (v == a))):
            return True
    return False


def merge_segments(labels, a, b):
    """Relabel every pixel of ``b`` as ``a``; the two must touch."""
    labels = check_label_map(labels)
    a, b = int(a), int(b)
    if a == b:
        raise NoOpEdit("cannot merge a segment with itself")
    if a == 0 or b == 0:
        raise LabelError("background cannot take part in a merge")
    present = np.isin([a, b], labels)
    if not present.all():
        missing = [lab for lab, ok in zip((a, b), present) if not ok]
        raise LabelError(f"labels {missing} are not present")
    if not are_adjacent(labels, a, b):
        raise AdjacencyError(f"segments {a} and {b} are not 4-adjacent")
    out = labels.copy()
    out[labels == b] = a
    return out


def gaussian_bump(shape, p, sigma=POINT_SIGMA):
    x, y = _check_point(shape, p)
    radius = 3.0 * sigma
    yy, xx = np.ogrid[:shape[0], :shape[1]]
    d2 = (xx - x) ** 2 + (yy - y) ** 2
    bump = np.exp(-d2 / (2.0 * sigma * sigma))
    bump[d2 > radius * radius] = 0.0
    return bump.astype(POINT_DTYPE)


def render_point(heat, p, sigma=POINT_SIGMA):
    """Stamp a unit-peak Gaussian at ``p`` into the point map (pointwise max)."""
    heat = np.asarray(heat, dtype=POINT_DTYPE)
    return np.maximum(heat, gaussian_bump(heat.shape, p, sigma))
