"""Segmentation quality metrics: VOI split/merge, adapted Rand error, CREMI.

Ground-truth label 0 is ignored everywhere. Logarithms are natural.
"""
from dataclasses import dataclass, astuple

import numpy as np

from .exceptions import UndefinedMetricError
from .validation import check_label_map, check_same_shape


@dataclass(frozen=True)
class ContingencyTable:
    """Joint pixel counts of (gt label, seg label) pairs.

    ``gt_ids``/``seg_ids``/``counts`` list the nonzero joint cells;
    marginals are stored separately in ``gt_labels``/``gt_counts`` and
    ``seg_labels``/``seg_counts``.
    """

    gt_ids: np.ndarray
    seg_ids: np.ndarray
    counts: np.ndarray
    gt_labels: np.ndarray
    gt_counts: np.ndarray
    seg_labels: np.ndarray
    seg_counts: np.ndarray
    n: int

    @property
    def joint(self):
        return {(int(g), int(s)): int(c)
                for g, s, c in zip(self.gt_ids, self.seg_ids, self.counts)}

    @property
    def gt_marginal(self):
        return dict(zip(self.gt_labels.tolist(), self.gt_counts.tolist()))

    @property
    def seg_marginal(self):
        return dict(zip(self.seg_labels.tolist(), self.seg_counts.tolist()))


@dataclass(frozen=True)
class MetricReport:
    voi_split: float
    voi_merge: float
    arand: float
    cremi: float

    @property
    def voi(self):
        return self.voi_split + self.voi_merge

    def to_text(self):
        return format_report(self)


def _marginal(ids, counts):
    labels, inverse = np.unique(ids, return_inverse=True)
    return labels, np.bincount(inverse, weights=counts).astype(np.int64)


def contingency(gt, seg):
    gt = check_label_map(gt, "ground truth")
    seg = check_label_map(seg, "segmentation")
    check_same_shape(gt, seg, names=("ground truth", "segmentation"))
    mask = gt != 0
    keys = (gt[mask].astype(np.uint64) << np.uint64(32)) | seg[mask].astype(np.uint64)
    uniq, counts = np.unique(keys, return_counts=True)
    gt_ids = (uniq >> np.uint64(32)).astype(np.uint32)
    seg_ids = (uniq & np.uint64(0xFFFFFFFF)).astype(np.uint32)
    counts = counts.astype(np.int64)
    gt_labels, gt_counts = _marginal(gt_ids, counts)
    seg_labels, seg_counts = _marginal(seg_ids, counts)
    return ContingencyTable(gt_ids, seg_ids, counts, gt_labels, gt_counts,
                            seg_labels, seg_counts, int(counts.sum()))


def _xlogx_sum(counts):
    counts = np.asarray(counts, dtype=np.float64)
    counts = counts[counts > 0]
    return float(np.sum(counts * np.log(counts)))


def _voi_from_sums(n, joint_xlogx, gt_xlogx, seg_xlogx):
    # H(S|G) = (sum a ln a - sum n ln n) / n, H(G|S) likewise with seg marginals
    voi_split = (gt_xlogx - joint_xlogx) / n
    voi_merge = (seg_xlogx - joint_xlogx) / n
    # clamp rounding noise; "+ 0.0" turns a -0.0 into 0.0
    return max(voi_split, 0.0) + 0.0, max(voi_merge, 0.0) + 0.0


def _arand_from_sums(joint_sq, gt_sq, seg_sq):
    return max(1.0 - 2.0 * joint_sq / (gt_sq + seg_sq), 0.0) + 0.0


def _require_nonempty(table):
    if table.n == 0:
        raise UndefinedMetricError("no labelled ground-truth pixels")


def voi(table):
    """``(voi_split, voi_merge) = (H(S|G), H(G|S))`` in nats."""
    _require_nonempty(table)
    counts = table.counts.astype(np.float64)
    row = table.gt_counts[np.searchsorted(table.gt_labels, table.gt_ids)]
    col = table.seg_counts[np.searchsorted(table.seg_labels, table.seg_ids)]
    voi_split = -float(np.sum(counts * np.log(counts / row))) / table.n
    voi_merge = -float(np.sum(counts * np.log(counts / col))) / table.n
    # clamp rounding noise; "+ 0.0" turns a -0.0 into 0.0
    return max(voi_split, 0.0) + 0.0, max(voi_merge, 0.0) + 0.0


def arand(table):
    """Adapted Rand error, one minus the pairwise F-score."""
    _require_nonempty(table)
    sq = lambda c: float(np.sum(np.asarray(c, dtype=np.float64) ** 2))
    return _arand_from_sums(sq(table.counts), sq(table.gt_counts), sq(table.seg_counts))


def cremi_from_parts(voi_split, voi_merge, arand_error):
    return float(np.sqrt(max((voi_split + voi_merge) * arand_error, 0.0))) + 0.0


def cremi_score(gt, seg):
    table = contingency(gt, seg)
    vs, vm = voi(table)
    ar = arand(table)
    return MetricReport(vs, vm, ar, cremi_from_parts(vs, vm, ar))


def patch_cremi(gt, seg):
    """CREMI of a patch, with an all-background ground truth scoring 0."""
    table = contingency(gt, seg)
    if table.n == 0:
        return 0.0
    vs, vm = voi(table)
    return cremi_from_parts(vs, vm, arand(table))


REPORT_KEYS = ("voi_split", "voi_merge", "arand", "cremi")


def format_report(report):
    return "".join(f"{key}: {value:.12g}\n" for key, value in zip(REPORT_KEYS, astuple(report)))


def parse_report(text):
    values = {}
    for line in text.strip().splitlines():
        key, _, value = line.partition(":")
        values[key.strip()] = float(value)
    return MetricReport(*(values[k] for k in REPORT_KEYS))


class IncrementalCremi:
    """CREMI under hypothetical edits without recounting the whole patch.

    Built once per (gt, seg) pair; ``score_columns`` evaluates the score after
    replacing some segmentation columns of the contingency table by new ones.
    Used by the scripted oracles to trial many candidate edits cheaply.
    """

    def __init__(self, gt, seg):
        gt = np.asarray(gt)
        seg = np.asarray(seg)
        mask = gt != 0
        self.gt_labels, gt_dense = np.unique(gt[mask], return_inverse=True)
        self.k = len(self.gt_labels)
        self.gt_index = np.full(gt.shape, -1, dtype=np.int64)
        self.gt_index[mask] = gt_dense
        self.n = int(mask.sum())
        self._columns = {}
        seg_ids = seg[mask]
        order = np.unique(seg_ids)
        for s in order.tolist():
            sel = seg_ids == s
            self._columns[s] = np.bincount(gt_dense[sel], minlength=self.k)
        cols = list(self._columns.values())
        joint = np.concatenate(cols) if cols else np.zeros(0)
        seg_tot = np.array([c.sum() for c in cols], dtype=np.float64)
        gt_tot = np.bincount(gt_dense, minlength=self.k)
        self._joint_xlogx = _xlogx_sum(joint)
        self._seg_xlogx = _xlogx_sum(seg_tot)
        self._gt_xlogx = _xlogx_sum(gt_tot)
        self._joint_sq = float(np.sum(joint.astype(np.float64) ** 2))
        self._seg_sq = float(np.sum(seg_tot ** 2))
        self._gt_sq = float(np.sum(gt_tot.astype(np.float64) ** 2))

    def column(self, seg_label):
        return self._columns.get(int(seg_label), np.zeros(self.k, dtype=np.int64))

    def gt_counts(self, mask):
        """Per-gt-label pixel counts of the region ``mask``."""
        idx = self.gt_index[mask]
        return np.bincount(idx[idx >= 0], minlength=self.k)

    def score(self):
        return self.score_columns((), ())

    def score_columns(self, removed, added):
        if self.n == 0:
            return 0.0
        joint_xlogx = self._joint_xlogx
        seg_xlogx = self._seg_xlogx
        joint_sq = self._joint_sq
        seg_sq = self._seg_sq
        for s in removed:
            col = self.column(s)
            joint_xlogx -= _xlogx_sum(col)
            joint_sq -= float(np.sum(col.astype(np.float64) ** 2))
            tot = float(col.sum())
            seg_xlogx -= _xlogx_sum([tot])
            seg_sq -= tot * tot
        for col in added:
            joint_xlogx += _xlogx_sum(col)
            joint_sq += float(np.sum(np.asarray(col, dtype=np.float64) ** 2))
            tot = float(np.sum(col))
            seg_xlogx += _xlogx_sum([tot])
            seg_sq += tot * tot
        vs, vm = _voi_from_sums(self.n, joint_xlogx, self._gt_xlogx, seg_xlogx)
        return cremi_from_parts(vs, vm, _arand_from_sums(joint_sq, self._gt_sq, seg_sq))

