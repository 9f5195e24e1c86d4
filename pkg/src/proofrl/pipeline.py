"""Image-level proofreading pipelines and the per-patch evaluation suite.

Three image modes are supported:

* ``sliding_static``: every locator patch of every sub-image gets the
  correctors in a fixed order, once each;
* ``sliding_selector``: every patch gets one selector episode;
* ``locator_selector``: a locator episode per sub-image decides which
  patches to visit.

Sub-images (512 px, stride 256, last offset clamped to the edge) are
processed in row-major order on one shared label map, so later windows see
earlier edits.
"""
from dataclasses import dataclass, field
import time

import numpy as np

from .core import FreshLabels, PatchRef, blit, crop, locator_patch
from .env import AgentKind, CORRECTORS, EnvConfig, Hierarchy
from .exceptions import DimensionError, ParameterError, UndefinedMetricError
from .metrics import MetricReport, cremi_score, patch_cremi
from .validation import check_em_image, check_label_map, check_same_shape

MODES = ("sliding_static", "sliding_selector", "locator_selector")
_REQUIRED = {
    "sliding_static": (),
    "sliding_selector": (AgentKind.SELECTOR,),
    "locator_selector": (AgentKind.LOCATOR, AgentKind.SELECTOR),
}


def normalize_mode(mode):
    """Accept ``sliding-static`` as well as ``sliding_static``."""
    key = str(mode).replace("-", "_").lower()
    if key not in MODES:
        raise ParameterError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    return key


@dataclass
class PipelineConfig:
    mode: str = "locator_selector"
    static_order: tuple = CORRECTORS
    policies: dict = field(default_factory=dict)
    env_config: EnvConfig = field(default_factory=EnvConfig)
    stride: int = 256

    def __post_init__(self):
        self.mode = normalize_mode(self.mode)
        self.static_order = tuple(AgentKind(k) for k in self.static_order)
        if not self.static_order or any(k not in CORRECTORS for k in self.static_order):
            raise ParameterError("static_order must list correctors (merger, splitter)")
        self.policies = {AgentKind(k): v for k, v in self.policies.items()}
        needed = _REQUIRED[self.mode] + (self.static_order if self.mode == "sliding_static"
                                         else CORRECTORS)
        missing = sorted({k.value for k in needed if k not in self.policies})
        if missing:
            raise ParameterError(f"mode {self.mode} needs policies for: {', '.join(missing)}")
        if self.stride < 1:
            raise ParameterError("stride must be positive")


@dataclass
class PatchTrace:
    window: int
    patch: int
    changed: int


@dataclass
class RunReport:
    mode: str
    before: MetricReport | None
    after: MetricReport | None
    seconds: float
    corrector_episodes: int
    selector_episodes: int
    windows: int
    trace: list = field(default_factory=list)

    def to_text(self):
        rows = [("mode", self.mode), ("windows", self.windows),
                ("corrector_episodes", self.corrector_episodes),
                ("selector_episodes", self.selector_episodes),
                ("seconds", f"{self.seconds:.3f}")]
        for tag, rep in (("before", self.before), ("after", self.after)):
            if rep is not None:
                rows += [(f"{tag}_{k}", f"{getattr(rep, k):.12g}")
                         for k in ("voi_split", "voi_merge", "arand", "cremi")]
        return "".join(f"{k}: {v}\n" for k, v in rows)


def tile_image(shape, sub=512, stride=256):
    """Row-major sub-image windows; the last offset on each axis is clamped
    to the edge so the windows cover the whole image."""
    h, w = shape[:2]
    if h < sub or w < sub:
        raise DimensionError(f"image of {w}x{h} is smaller than one {sub}px sub-image")
    if stride < 1:
        raise ParameterError("stride must be positive")

    def offsets(n):
        out = list(range(0, n - sub + 1, stride))
        if out[-1] != n - sub:
            out.append(n - sub)
        return out

    return [PatchRef(x, y, sub) for y in offsets(h) for x in offsets(w)]


def _prepare(em, labels, gt):
    em = check_em_image(em)
    labels = check_label_map(labels)
    if gt is not None:
        gt = check_label_map(gt, "ground truth")
    check_same_shape(em, labels, gt, names=("em", "labels", "gt"))
    return em, labels, gt


def _score(gt, labels):
    if gt is None:
        return None
    try:
        return cremi_score(gt, labels)
    except UndefinedMetricError:
        return None


def _finish(config, gt, initial, final, hierarchy, windows, trace, start):
    return RunReport(config.mode, _score(gt, initial), _score(gt, final),
                     time.perf_counter() - start, hierarchy.corrector_episodes,
                     hierarchy.selector_episodes, len(windows), trace)


def run_sliding(em, labels, config, gt=None):
    """Visit every locator patch of every sub-image in fixed order.

    Returns ``(labels, report)``; ``gt`` is needed only by oracle policies
    and for the before/after scores.
    """
    em, labels, gt = _prepare(em, labels, gt)
    if config.mode == "locator_selector":
        raise ParameterError("run_sliding handles the sliding modes only")
    start = time.perf_counter()
    cfg = config.env_config
    hierarchy = Hierarchy(config.policies, cfg, mode="eval")
    counter = FreshLabels.after(labels, gt)
    windows = tile_image(labels.shape, cfg.sub_size, config.stride)
    grid = cfg.locator
    out = labels
    trace = []
    for w, win in enumerate(windows):
        for k in range(grid.size):
            local = locator_patch(grid, k, cfg.patch_size)
            patch = PatchRef(win.origin_x + local.origin_x, win.origin_y + local.origin_y,
                             cfg.patch_size)
            em_p = crop(em, patch)
            lab_p = crop(out, patch)
            gt_p = None if gt is None else crop(gt, patch)
            if config.mode == "sliding_static":
                new_p = hierarchy.run_static(em_p, lab_p, gt_p, counter, config.static_order)
            else:
                new_p = hierarchy.run_selector(em_p, lab_p, gt_p, counter)
            changed = int(np.count_nonzero(new_p != lab_p))
            if changed:
                out = blit(out, patch, new_p)
            trace.append(PatchTrace(w, k, changed))
    return out, _finish(config, gt, labels, out, hierarchy, windows, trace, start)


def run_locator(em, labels, config, gt=None):
    """One eval-mode locator episode per sub-image; returns ``(labels, report)``."""
    em, labels, gt = _prepare(em, labels, gt)
    if config.mode != "locator_selector":
        raise ParameterError("run_locator needs mode locator_selector")
    start = time.perf_counter()
    cfg = config.env_config
    log = []
    hierarchy = Hierarchy(config.policies, cfg, mode="eval", log=log)
    counter = FreshLabels.after(labels, gt)
    windows = tile_image(labels.shape, cfg.sub_size, config.stride)
    out = labels
    trace = []
    for w, win in enumerate(windows):
        sub = crop(out, win)
        new = hierarchy.run_locator(crop(em, win), sub, None if gt is None else crop(gt, win),
                                    counter)
        _, traj = log[-1]
        trace += [PatchTrace(w, tr.action, tr.info.get("changed", 0)) for tr in traj
                  if tr.info.get("action") == "locate"]
        if np.any(new != sub):
            out = blit(out, win, new)
        log.clear()
    return out, _finish(config, gt, labels, out, hierarchy, windows, trace, start)


def run_pipeline(em, labels, config, gt=None):
    if config.mode == "locator_selector":
        return run_locator(em, labels, config, gt)
    return run_sliding(em, labels, config, gt)


# ---------------------------------------------------------- patch suite

@dataclass
class SuiteResult:
    """Per-patch CREMI before and after one correction scheme."""

    scheme: str
    before: np.ndarray
    after: np.ndarray
    corrector_episodes: int

    @property
    def mean_before(self):
        return float(self.before.mean())

    @property
    def mean_after(self):
        return float(self.after.mean())


def eval_patch_suite(testset, policies, scheme="selector", static_order=CORRECTORS,
                     env_config=None):
    """Correct every patch of ``testset`` with ``scheme`` (static or selector)."""
    if scheme not in ("static", "selector"):
        raise ParameterError(f"scheme must be 'static' or 'selector', got {scheme!r}")
    if not testset:
        raise ParameterError("test set is empty")
    cfg = env_config or EnvConfig()
    hierarchy = Hierarchy(policies, cfg, mode="eval")
    before, after = [], []
    for ex in testset:
        counter = FreshLabels.after(ex.seg, ex.gt)
        if scheme == "static":
            out = hierarchy.run_static(ex.em, ex.seg, ex.gt, counter, static_order)
        else:
            out = hierarchy.run_selector(ex.em, ex.seg, ex.gt, counter)
        before.append(patch_cremi(ex.gt, ex.seg))
        after.append(patch_cremi(ex.gt, out))
    return SuiteResult(scheme, np.asarray(before), np.asarray(after),
                       hierarchy.corrector_episodes)


TABLE_ROWS = {"merge": "Merge error only", "split": "Split error only",
              "combined": "Combined"}


def format_patch_table(rows):
    """Per-patch table: ``rows`` maps test-set kind to ``{scheme: SuiteResult}``."""
    lines = ["testset\tbefore\tstatic\tselector"]
    for kind, res in rows.items():
        any_res = next(iter(res.values()))
        cells = [f"{res[s].mean_after:.6f}" if s in res else "-" for s in ("static", "selector")]
        lines.append("\t".join([TABLE_ROWS.get(kind, kind), f"{any_res.mean_before:.6f}"] + cells))
    return "\n".join(lines) + "\n"


def format_image_table(reports):
    """Image-level table: one row per run report."""
    lines = ["mode\tbefore\tafter\tcorrector_episodes\tseconds"]
    for rep in reports:
        b = "-" if rep.before is None else f"{rep.before.cremi:.6f}"
        a = "-" if rep.after is None else f"{rep.after.cremi:.6f}"
        lines.append(f"{rep.mode}\t{b}\t{a}\t{rep.corrector_episodes}\t{rep.seconds:.3f}")
    return "\n".join(lines) + "\n"
