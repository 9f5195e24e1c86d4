"""Input validation helpers in the spirit of ``sklearn.utils.check_array``.

Rasters are plain 2D numpy arrays indexed ``[y, x]``:

* EM images are ``uint8``,
* label maps are ``uint32`` (0 is background),
* point maps are ``float32`` heat values in [0, 1].
"""
import numpy as np

from .exceptions import DimensionError, LabelError, ParameterError

EM_DTYPE = np.uint8
LABEL_DTYPE = np.uint32
POINT_DTYPE = np.float32


def _check_2d(arr, name):
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2D, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DimensionError(f"{name} must be non-empty, got shape {arr.shape}")
    return arr


def check_em_image(img, name="EM image"):
    """Return ``img`` as a uint8 2D array, rejecting values outside [0, 255]."""
    arr = _check_2d(img, name)
    if arr.dtype == EM_DTYPE:
        return arr
    if arr.size and not (np.all(np.isfinite(arr)) and arr.min() >= 0 and arr.max() <= 255):
        raise ParameterError(f"{name} values must be finite and lie in [0, 255]")
    return np.rint(arr).astype(EM_DTYPE)


def check_label_map(labels, name="label map", allow_background=True):
    arr = _check_2d(labels, name)
    if arr.dtype != LABEL_DTYPE:
        if np.issubdtype(arr.dtype, np.floating) and not np.all(arr == np.floor(arr)):
            raise LabelError(f"{name} must hold integer labels")
        if arr.size and arr.min() < 0:
            raise LabelError(f"{name} must hold non-negative labels")
        arr = arr.astype(LABEL_DTYPE)
    if not allow_background and np.any(arr == 0):
        raise LabelError(f"{name} must not contain label 0")
    return arr


def check_point_map(heat, name="point map"):
    arr = _check_2d(heat, name).astype(POINT_DTYPE, copy=False)
    if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
        raise ParameterError(f"{name} values must lie in [0, 1]")
    return arr


def check_same_shape(*arrays, names=None):
    shapes = {np.shape(a) for a in arrays if a is not None}
    if len(shapes) > 1:
        label = ", ".join(names) if names else "inputs"
        raise DimensionError(f"{label} have mismatched shapes {sorted(shapes)}")


def check_random_state(seed):
    """Turn ``seed`` into a ``np.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (int, np.integer)):
        return np.random.default_rng(seed)
    raise ParameterError(f"cannot build a random generator from {seed!r}")
