"""Synthetic ground truth and controlled merge/split error injection."""
from dataclasses import dataclass, field
import math

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .core import GridSpec, PatchRef, crop, locator_patch
from .editops import adjacency_pairs
from .exceptions import InjectionError, ParameterError
from .metrics import patch_cremi
from .validation import EM_DTYPE, LABEL_DTYPE, check_label_map, check_random_state

FOUR = ndimage.generate_binary_structure(2, 1)
MEMBRANE_DEPTH = 160.0
MEMBRANE_WIDTH = 1.5
NOISE_SIGMA = 6.0


@dataclass
class SplitCut:
    """Straight cut through ``(cx, cy)``; pixels on the relabelled side get ``fresh``."""

    label: int
    cx: float
    cy: float
    angle: float
    flip: bool
    fresh: int

    def side(self, xs, ys):
        s = -(xs - self.cx) * math.sin(self.angle) + (ys - self.cy) * math.cos(self.angle) > 0
        return ~s if self.flip else s


@dataclass
class ErrorScript:
    seed: object = None
    merges: list = field(default_factory=list)
    splits: list = field(default_factory=list)
    # (kind, index) pairs recording application order across both lists
    order: list = field(default_factory=list)

    def extend(self, other):
        for kind, idx in other.order:
            src = other.merges if kind == "merge" else other.splits
            dst = self.merges if kind == "merge" else self.splits
            self.order.append((kind, len(dst)))
            dst.append(src[idx])
        return self

    def to_dict(self):
        return {
            "seed": self.seed,
            "merges": [list(m) for m in self.merges],
            "splits": [vars(s).copy() for s in self.splits],
            "order": [list(o) for o in self.order],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("seed"), [tuple(m) for m in d["merges"]],
                   [SplitCut(**s) for s in d["splits"]], [tuple(o) for o in d["order"]])


def apply_script(gt, script):
    """Replay ``script`` on ``gt``; reproduces the injected map bit-exactly."""
    out = check_label_map(gt).copy()
    for kind, idx in script.order:
        if kind == "merge":
            a, b = script.merges[idx]
            out[out == b] = a
        else:
            cut = script.splits[idx]
            ys, xs = np.nonzero(out == cut.label)
            side = cut.side(xs.astype(np.float64), ys.astype(np.float64))
            out[ys[side], xs[side]] = cut.fresh
    return out


def _voronoi(sites, ys, xs):
    tree = cKDTree(sites)
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    _, idx = tree.query(pts)
    return (idx + 1).reshape(ys.shape).astype(LABEL_DTYPE)


def _keep_site_components(labels, sites):
    """Force every label to a single 4-connected piece containing its site.

    Stray pieces are absorbed by the neighbouring label they touch most.
    """
    labels = labels.copy()
    h, w = labels.shape
    for _ in range(8):
        changed = False
        for lab in range(1, len(sites) + 1):
            mask = labels == lab
            comps, n = ndimage.label(mask, structure=FOUR)
            if n <= 1:
                continue
            sx, sy = sites[lab - 1]
            sy = min(max(int(round(sy)), 0), h - 1)
            sx = min(max(int(round(sx)), 0), w - 1)
            keep = comps[sy, sx]
            for c in range(1, n + 1):
                if c == keep:
                    continue
                piece = comps == c
                ring = ndimage.binary_dilation(piece, FOUR) & ~piece
                neigh = labels[ring]
                neigh = neigh[neigh != lab]
                if neigh.size:
                    labels[piece] = np.bincount(neigh).argmax()
                    changed = True
        if not changed:
            break
    return labels


def membrane_image(labels, rng):
    """EM-like image: bright cells, dark bands along label boundaries, noise."""
    labels = np.asarray(labels)
    boundary = np.zeros(labels.shape, dtype=bool)
    dx = labels[:, 1:] != labels[:, :-1]
    dy = labels[1:, :] != labels[:-1, :]
    boundary[:, 1:] |= dx
    boundary[:, :-1] |= dx
    boundary[1:, :] |= dy
    boundary[:-1, :] |= dy
    dist = ndimage.distance_transform_edt(~boundary)
    band = np.exp(-(dist ** 2) / (2.0 * MEMBRANE_WIDTH ** 2))
    img = 255.0 - MEMBRANE_DEPTH * band + rng.normal(0.0, NOISE_SIGMA, labels.shape)
    return np.clip(np.rint(img), 0, 255).astype(EM_DTYPE)


def gen_ground_truth(width, height, n_seeds, seed):
    """Voronoi partition of ``n_seeds`` random sites plus a matching EM image.

    Labels run 1..n_seeds, each a single 4-connected segment.
    """
    if n_seeds < 2:
        raise ParameterError("n_seeds must be at least 2")
    if width < 1 or height < 1 or n_seeds > width * height:
        raise ParameterError("raster too small for the requested number of seeds")
    rng = check_random_state(seed)
    flat = rng.choice(width * height, size=n_seeds, replace=False)
    sites = np.stack([flat % width, flat // width], axis=1).astype(np.float64)
    ys, xs = np.mgrid[:height, :width]
    labels = _keep_site_components(_voronoi(sites, ys, xs), sites)
    return membrane_image(labels, rng), labels


def _is_connected(mask):
    return ndimage.label(mask, structure=FOUR)[1] == 1


def inject_merge_error(gt, rng, candidates=None):
    """Give two 4-adjacent segments one label (the second takes the first's)."""
    gt = check_label_map(gt)
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = check_random_state(rng)
    pairs = adjacency_pairs(gt) if candidates is None else list(candidates)
    if not pairs:
        raise InjectionError("no pair of adjacent segments to merge")
    a, b = pairs[rng.integers(len(pairs))]
    out = gt.copy()
    out[gt == b] = a
    return out, ErrorScript(seed, merges=[(int(a), int(b))], order=[("merge", 0)])


def _try_cut(labels, lab, rng, fresh, attempts=32):
    ys, xs = np.nonzero(labels == lab)
    if ys.size < 2:
        return None
    fx, fy = xs.astype(np.float64), ys.astype(np.float64)
    cx, cy = fx.mean(), fy.mean()
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    for _ in range(attempts):
        angle = float(rng.uniform(0.0, math.pi))
        cut = SplitCut(int(lab), float(cx), float(cy), angle, False, int(fresh))
        side = cut.side(fx, fy)
        k = int(side.sum())
        if k == 0 or k == side.size:
            continue
        if 2 * k > side.size:
            cut.flip = True
        elif 2 * k == side.size:
            # relabel the half holding the lexicographically smallest pixel
            cut.flip = not bool(side[0])
        side = cut.side(fx, fy)
        part = np.zeros((y1 - y0, x1 - x0), dtype=bool)
        rest = np.zeros_like(part)
        part[ys[side] - y0, xs[side] - x0] = True
        rest[ys[~side] - y0, xs[~side] - x0] = True
        if _is_connected(part) and _is_connected(rest):
            return cut, ys[side], xs[side]
    return None


def inject_split_error(gt, rng, candidates=None, fresh_label=None, accept=None):
    """Cut one segment in two along a random line through its centroid.

    The smaller side receives ``fresh_label`` (default: max label + 1).
    ``accept(out, cut)`` may veto a cut, e.g. to keep both halves reachable
    by an action grid.
    """
    gt = check_label_map(gt)
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = check_random_state(rng)
    ids, counts = np.unique(gt[gt != 0], return_counts=True)
    pool = ids[counts >= 2] if candidates is None else np.asarray(
        [c for c in candidates if c in set(ids[counts >= 2].tolist())])
    if pool.size == 0:
        raise InjectionError("no segment with at least two pixels to split")
    fresh = int(gt.max()) + 1 if fresh_label is None else int(fresh_label)
    for lab in rng.permutation(pool):
        found = _try_cut(gt, int(lab), rng, fresh)
        if found is None:
            continue
        cut, ys, xs = found
        out = gt.copy()
        out[ys, xs] = cut.fresh
        if accept is not None and not accept(out, cut):
            continue
        return out, ErrorScript(seed, splits=[cut], order=[("split", 0)])
    raise InjectionError("no segment admits a cut into two connected parts")


def inject_errors(gt, n_merges, n_splits, rng, accept_split=None, isolate=False):
    """Apply merges first (between true segments), then splits of untouched ones.

    With ``isolate`` the neighbours of every corrupted segment are off limits
    too, so no two errors share a boundary.
    """
    rng = check_random_state(rng)
    out = check_label_map(gt).copy()
    script = ErrorScript()
    touched = set()
    neighbours = {}
    if isolate:
        for a, b in adjacency_pairs(out):
            neighbours.setdefault(a, set()).add(b)
            neighbours.setdefault(b, set()).add(a)

    def touch(labels):
        for lab in labels:
            touched.add(lab)
            touched.update(neighbours.get(lab, ()))

    for _ in range(n_merges):
        pairs = [p for p in adjacency_pairs(out) if not (set(p) & touched)]
        out, s = inject_merge_error(out, rng, candidates=pairs)
        touch(s.merges[0])
        script.extend(s)
    for _ in range(n_splits):
        ids = [int(i) for i in np.unique(out) if i != 0 and int(i) not in touched]
        out, s = inject_split_error(out, rng, candidates=ids, accept=accept_split)
        touch((s.splits[0].label, s.splits[0].fresh))
        script.extend(s)
    return out, script


def grid_reachable(grid):
    """Veto for split cuts: both halves must hold at least one grid point."""
    pts = grid.pixels()

    def accept(out, cut):
        hit = out[pts[:, 1], pts[:, 0]]
        return bool(np.any(hit == cut.label) and np.any(hit == cut.fresh))

    return accept


def window_contained(locator, corrector, patch_size, min_cremi=0.0):
    """Veto for split cuts: the whole segment must fit in one locator patch,
    with both halves on corrector grid points of that patch, so a single
    merge action can undo the split exactly. The split alone must also raise
    that patch's CREMI above ``min_cremi`` (the error-set threshold)."""
    pts = corrector.pixels()
    windows = [locator_patch(locator, k, patch_size) for k in range(locator.size)]

    def accept(out, cut):
        ys, xs = np.nonzero((out == cut.label) | (out == cut.fresh))
        for ref in windows:
            if (xs.min() >= ref.origin_x and xs.max() < ref.origin_x + ref.size
                    and ys.min() >= ref.origin_y and ys.max() < ref.origin_y + ref.size):
                hit = out[ref.origin_y + pts[:, 1], ref.origin_x + pts[:, 0]]
                if not (np.any(hit == cut.label) and np.any(hit == cut.fresh)):
                    continue
                seg = out[ref.slices]
                pre = np.where(seg == cut.fresh, cut.label, seg)
                if patch_cremi(pre, seg) > min_cremi:
                    return True
        return False

    return accept


ERROR_KINDS = ("merge", "split", "combined")
_KIND_COUNTS = {"merge": (1, 0), "split": (0, 1), "combined": (1, 1)}


@dataclass
class PatchExample:
    em: np.ndarray
    gt: np.ndarray
    seg: np.ndarray
    script: ErrorScript
    source: dict


def make_patch_testset(kind, count, seed, image_size=512, n_seeds=50, patch_size=128,
                       locator_n=7, corrector_n=15, errors_per_patch=1):
    """Per-patch test set: crops at random locator grid points with injected errors.

    Only the crop (plus a margin for the membrane band) of each synthetic
    image is rasterised. Split halves are required to contain a corrector
    grid point so a merge can undo them.
    """
    if kind not in ERROR_KINDS:
        raise ParameterError(f"unknown error kind {kind!r}; choose from {ERROR_KINDS}")
    if count < 1:
        raise ParameterError("count must be at least 1")
    n_merge, n_split = (c * errors_per_patch for c in _KIND_COUNTS[kind])
    rng = check_random_state(seed)
    locator = GridSpec.locator(image_size, locator_n)
    accept = grid_reachable(GridSpec.corrector(patch_size, corrector_n))
    margin = 8
    out = []
    while len(out) < count:
        flat = rng.choice(image_size * image_size, size=n_seeds, replace=False)
        sites = np.stack([flat % image_size, flat // image_size], axis=1).astype(np.float64)
        action = int(rng.integers(locator.size))
        x, y = locator.pixel(action)
        ref = PatchRef.centered(x, y, patch_size)
        y0, x0 = ref.origin_y - margin, ref.origin_x - margin
        ys, xs = np.mgrid[y0:y0 + patch_size + 2 * margin, x0:x0 + patch_size + 2 * margin]
        padded = _voronoi(sites, ys, xs)
        em = membrane_image(padded, rng)
        inner = PatchRef(margin, margin, patch_size)
        gt = crop(padded, inner)
        gt = _keep_site_components(*_local_sites(gt, sites, x0 + margin, y0 + margin))
        try:
            seg, script = inject_errors(gt, n_merge, n_split, rng, accept_split=accept)
        except InjectionError:
            continue
        em_patch = crop(em, inner)
        out.append(PatchExample(em_patch, gt, seg, script,
                                {"kind": kind, "locator_action": action,
                                 "initial_cremi": patch_cremi(gt, seg)}))
    return out


def _local_sites(gt, sites, x0, y0):
    """Relabel a crop to 1..k and express its sites in crop coordinates."""
    ids = np.unique(gt)
    remap = np.zeros(int(ids.max()) + 1, dtype=LABEL_DTYPE)
    remap[ids] = np.arange(1, ids.size + 1, dtype=LABEL_DTYPE)
    local = sites[ids - 1] - np.array([x0, y0], dtype=np.float64)
    h, w = gt.shape
    local[:, 0] = np.clip(local[:, 0], 0, w - 1)
    local[:, 1] = np.clip(local[:, 1], 0, h - 1)
    # a clipped site may land outside its cell; fall back to any pixel of the cell
    relabelled = remap[gt]
    for k in range(ids.size):
        sx, sy = int(round(local[k, 0])), int(round(local[k, 1]))
        if relabelled[sy, sx] != k + 1:
            yy, xx = np.nonzero(relabelled == k + 1)
            local[k] = (xx[0], yy[0])
    return relabelled, local


def make_image_set(count, seed, size=512, n_seeds=50, max_errors=5, kinds=ERROR_KINDS,
                   contained_splits=True, locator_n=7, corrector_n=15, tau_err=0.02):
    """Full-size images with 1..max_errors injected errors, cycling error kinds.

    With ``contained_splits`` every split cut is confined to a segment that
    fits inside one locator patch and is visible at ``tau_err`` there (see
    :func:`window_contained`).
    """
    rng = check_random_state(seed)
    accept = None
    if contained_splits:
        locator = GridSpec.locator(size, locator_n)
        patch = 2 * locator.cell
        accept = window_contained(locator, GridSpec.corrector(patch, corrector_n), patch,
                                  min_cremi=tau_err)
    out = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        em, gt = gen_ground_truth(size, size, n_seeds, rng)
        n = int(rng.integers(1, max_errors + 1))
        if kind == "merge":
            n_merge, n_split = n, 0
        elif kind == "split":
            n_merge, n_split = 0, n
        else:
            n = max(n, 2)
            n_merge = int(rng.integers(1, n))
            n_split = n - n_merge
        seg, script = inject_errors(gt, n_merge, n_split, rng, accept_split=accept,
                                    isolate=True)
        out.append(PatchExample(em, gt, seg, script, {"kind": kind, "errors": n}))
    return out
