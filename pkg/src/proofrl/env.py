"""Proofreading MDPs: locator, selector, splitter and merger.

Each environment owns an :class:`EpisodeState` and advances it with
``step(action)``. Higher agents nest full episodes of lower ones through an
``inner`` callable, which :class:`Hierarchy` wires together.
"""
from dataclasses import dataclass, field, replace
from enum import Enum
import math

import numpy as np

from .core import FreshLabels, GridSpec, PatchRef, blit, crop, locator_patch
from .editops import (POINT_SIGMA, WATERSHED_SIGMA, gaussian_smooth, merge_segments,
                      render_point, segment_at, split_basins)
from .exceptions import ActionError, NoOpEdit, ParameterError, ProofreadError
from .metrics import patch_cremi
from .validation import POINT_DTYPE, check_em_image, check_label_map, check_same_shape


class AgentKind(str, Enum):
    LOCATOR = "locator"
    SELECTOR = "selector"
    SPLITTER = "splitter"
    MERGER = "merger"


CORRECTORS = (AgentKind.MERGER, AgentKind.SPLITTER)
# selector action indices
SELECT_MERGER, SELECT_SPLITTER, SELECT_STOP = 0, 1, 2
SELECTOR_CHOICES = {SELECT_MERGER: AgentKind.MERGER, SELECT_SPLITTER: AgentKind.SPLITTER}


@dataclass(frozen=True)
class EnvConfig:
    sub_size: int = 512
    patch_size: int = 128
    locator_grid: int = 7
    corrector_grid: int = 15
    tau_err: float = 0.02
    max_locator_steps: int = 16
    max_locator_steps_eval: int = 64
    max_selector_steps: int = 6
    max_selector_steps_eval: int = 4
    max_splitter_steps: int = 6
    max_merger_steps: int = 6
    watershed_sigma: float = WATERSHED_SIGMA
    point_sigma: float = POINT_SIGMA
    # eval-mode stagnation: changed fraction of the edited patch
    stagnation_fraction: float = 1e-3
    stagnation_steps: int = 2
    # train-mode locator termination
    plateau_tol: float = 1e-4
    plateau_steps: int = 3
    low_cremi: float = 0.01

    def __post_init__(self):
        if self.sub_size % (self.locator_grid + 1):
            raise ParameterError("sub_size must be a multiple of locator_grid + 1")
        if 2 * (self.sub_size // (self.locator_grid + 1)) != self.patch_size:
            raise ParameterError("patch_size must span two locator grid cells")
        if self.patch_size < self.corrector_grid + 1:
            raise ParameterError("corrector grid does not fit in the patch")

    @property
    def locator(self):
        return GridSpec.locator(self.sub_size, self.locator_grid)

    @property
    def corrector(self):
        return GridSpec.corrector(self.patch_size, self.corrector_grid)

    @property
    def pool(self):
        return self.sub_size // self.patch_size

    def action_count(self, kind):
        kind = AgentKind(kind)
        if kind is AgentKind.SELECTOR:
            return 3
        grid = self.locator if kind is AgentKind.LOCATOR else self.corrector
        return grid.size + 1

    def max_steps(self, kind, mode):
        kind = AgentKind(kind)
        evaluating = mode == "eval"
        if kind is AgentKind.LOCATOR:
            return self.max_locator_steps_eval if evaluating else self.max_locator_steps
        if kind is AgentKind.SELECTOR:
            return self.max_selector_steps_eval if evaluating else self.max_selector_steps
        if kind is AgentKind.SPLITTER:
            return self.max_splitter_steps
        return self.max_merger_steps

    @classmethod
    def small(cls, patch_size=32, corrector_grid=3, **kw):
        """Scaled-down geometry for desk-size experiments and tests."""
        return cls(sub_size=4 * patch_size, patch_size=patch_size, locator_grid=7,
                   corrector_grid=corrector_grid, **kw)


@dataclass(frozen=True)
class ErrorOracle:
    """Ground truth aligned with the working map; used for rewards and scripted policies."""

    gt: np.ndarray
    tau_err: float = 0.02

    def cremi(self, labels):
        return patch_cremi(self.gt, labels)

    def in_error(self, labels):
        return self.cremi(labels) > self.tau_err

    def crop(self, patch):
        return ErrorOracle(crop(self.gt, patch), self.tau_err)


@dataclass(frozen=True)
class EpisodeState:
    kind: AgentKind
    em: np.ndarray
    label: np.ndarray
    point: np.ndarray | None
    t: int = 0
    pending: int | None = None  # merger: label picked by the first point of a pair


@dataclass
class StepOutcome:
    observation: EpisodeState
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------- rewards

def r_diff(cremi_before, cremi_after):
    """Relative CREMI reduction; defined as 0 when the score was already 0."""
    if cremi_before == 0:
        return 0.0
    return (cremi_before - cremi_after) / cremi_before


def locator_reward(stop, stop_correct, in_error, cremi_before, cremi_after):
    if stop:
        return 2.0 if stop_correct else -2.0
    if not in_error:
        return -2.0
    if cremi_after < cremi_before:
        return 1.0 + r_diff(cremi_before, cremi_after)
    return -1.0


def selector_reward(stop, stop_correct, cremi_before, cremi_after):
    if stop:
        return 1.0 if stop_correct else -1.0
    if cremi_after < cremi_before:
        return 1.0 + r_diff(cremi_before, cremi_after)
    return -1.0


def corrector_reward(agent, stop, stop_correct, in_error, cremi_before, cremi_after):
    """Splitter and merger share one table; ``agent`` is kept for call-site clarity."""
    if AgentKind(agent) not in CORRECTORS:
        raise ParameterError(f"{agent} is not a corrector")
    if stop:
        return 1.0 if stop_correct else -1.0
    if in_error and cremi_after < cremi_before:
        return 1.0 + r_diff(cremi_before, cremi_after)
    return -1.0


# ----------------------------------------------------------- environments

class ProofreadEnv:
    """Common episode bookkeeping."""

    kind: AgentKind

    def __init__(self, em, labels, gt=None, config=None, mode="train", counter=None):
        if mode not in ("train", "eval"):
            raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.config = config or EnvConfig()
        em = check_em_image(em)
        labels = check_label_map(labels)
        check_same_shape(em, labels, None if gt is None else gt,
                         names=("em", "labels", "gt"))
        self.mode = mode
        self.oracle = None if gt is None else ErrorOracle(check_label_map(gt), self.config.tau_err)
        self.counter = counter or FreshLabels.after(labels, gt)
        self.action_count = self.config.action_count(self.kind)
        self.stop_action = self.action_count - 1
        self.max_steps = self.config.max_steps(self.kind, mode)
        self.state = EpisodeState(self.kind, em, labels, self._initial_points(labels.shape))
        self.done = False
        self.scratch = {}  # per-episode memory for stateful policies
        self._cremi = None

    def _initial_points(self, shape):
        return np.zeros(shape, dtype=POINT_DTYPE)

    @property
    def cremi(self):
        """Current score of the working map (``nan`` without ground truth)."""
        if self.oracle is None:
            return math.nan
        if self._cremi is None:
            self._cremi = self.oracle.cremi(self.state.label)
        return self._cremi

    def stop_correct(self):
        return self.oracle is not None and self.cremi <= self.config.tau_err

    def _check_action(self, action):
        if self.done:
            raise ProofreadError("episode already finished")
        action = int(action)
        if not 0 <= action < self.action_count:
            raise ActionError(f"action {action} outside [0, {self.action_count})")
        return action

    def _advance(self, labels, reward, info, point=None, pending=None, stop=False):
        before = self.cremi
        changed = int(np.count_nonzero(labels != self.state.label)) if labels is not self.state.label else 0
        self.state = replace(self.state, label=labels, t=self.state.t + 1, pending=pending,
                             point=self.state.point if point is None else point)
        if changed:
            self._cremi = None
        info.setdefault("cremi_before", before)
        info.setdefault("cremi_after", self.cremi)
        info["changed"] = changed
        self.done = stop or self.state.t >= self.max_steps
        return StepOutcome(self.state, float(reward) if self.oracle is not None else 0.0,
                           self.done, info)


class CorrectorEnv(ProofreadEnv):
    """Shared grid handling for splitter and merger episodes on one patch."""

    def __init__(self, em, labels, gt=None, config=None, mode="train", counter=None):
        super().__init__(em, labels, gt, config, mode, counter)
        self.grid = self.config.corrector
        if self.state.label.shape != (self.config.patch_size, self.config.patch_size):
            raise ParameterError(
                f"{self.kind.value} works on {self.config.patch_size}px patches, "
                f"got {self.state.label.shape}")

    def _stamp(self, p):
        return render_point(self.state.point, p, self.config.point_sigma)

    def _reward_edit(self, before, after):
        in_error = self.oracle is not None and before > self.config.tau_err
        return corrector_reward(self.kind, False, False, in_error, before, after)

    def _stop(self):
        reward = corrector_reward(self.kind, True, self.stop_correct(), False, 0.0, 0.0)
        return self._advance(self.state.label, reward, {"action": "stop"}, stop=True)


class SplitterEnv(CorrectorEnv):
    kind = AgentKind.SPLITTER

    def __init__(self, em, labels, gt=None, config=None, mode="train", counter=None):
        super().__init__(em, labels, gt, config, mode, counter)
        self.altitude = gaussian_smooth(self.state.em, self.config.watershed_sigma)

    def step(self, action):
        action = self._check_action(action)
        if action == self.stop_action:
            return self._stop()
        p = self.grid.pixel(action)
        labels = self.state.label
        try:
            basins = split_basins(labels, self.altitude, p)
        except NoOpEdit:
            basins = None
        before = self.cremi
        if basins is None:
            new = labels
            reward = -1.0
        else:
            new = labels.copy()
            new[basins == 2] = self.counter()
            after = self.oracle.cremi(new) if self.oracle is not None else math.nan
            reward = self._reward_edit(before, after)
        return self._advance(new, reward, {"action": "split", "pixel": p, "noop": basins is None},
                             point=self._stamp(p))


class MergerEnv(CorrectorEnv):
    """Grid points are picked in pairs; every second pick merges the pair."""

    kind = AgentKind.MERGER

    def step(self, action):
        action = self._check_action(action)
        if action == self.stop_action:
            return self._stop()
        p = self.grid.pixel(action)
        labels = self.state.label
        picked = segment_at(labels, p)
        point = self._stamp(p)
        if self.state.pending is None:
            return self._advance(labels, 0.0, {"action": "pick", "pixel": p, "segment": picked},
                                 point=point, pending=picked)
        first = self.state.pending
        before = self.cremi
        try:
            new = merge_segments(labels, first, picked)
        except ProofreadError:
            new = None
        if new is None:
            return self._advance(labels, -1.0, {"action": "merge", "pixel": p, "noop": True,
                                                "pair": (first, picked)}, point=point)
        after = self.oracle.cremi(new) if self.oracle is not None else math.nan
        return self._advance(new, self._reward_edit(before, after),
                             {"action": "merge", "pixel": p, "noop": False,
                              "pair": (first, picked)}, point=point)


class SelectorEnv(ProofreadEnv):
    """Chooses merger, splitter or stop; each choice runs a full corrector episode."""

    kind = AgentKind.SELECTOR

    def __init__(self, em, labels, gt=None, config=None, mode="train", counter=None, inner=None):
        super().__init__(em, labels, gt, config, mode, counter)
        if inner is None:
            raise ParameterError("selector needs an inner corrector runner")
        self.inner = inner

    def _initial_points(self, shape):
        return None

    def step(self, action):
        action = self._check_action(action)
        if action == SELECT_STOP:
            reward = selector_reward(True, self.stop_correct(), 0.0, 0.0)
            return self._advance(self.state.label, reward, {"action": "stop"}, stop=True)
        kind = SELECTOR_CHOICES[action]
        gt = None if self.oracle is None else self.oracle.gt
        new = self.inner(kind, self.state.em, self.state.label, gt, self.counter)
        before = self.cremi
        after = self.oracle.cremi(new) if self.oracle is not None else math.nan
        reward = selector_reward(False, False, before, after)
        return self._advance(new, reward, {"action": kind.value})


class LocatorEnv(ProofreadEnv):
    """Picks erroneous patches of a sub-image and hands them to a selector episode."""

    kind = AgentKind.LOCATOR

    def __init__(self, em, labels, gt=None, config=None, mode="train", counter=None, inner=None):
        super().__init__(em, labels, gt, config, mode, counter)
        if inner is None:
            raise ParameterError("locator needs an inner selector runner")
        size = self.config.sub_size
        if self.state.label.shape != (size, size):
            raise ParameterError(f"locator works on {size}px sub-images, got {self.state.label.shape}")
        self.inner = inner
        self.grid = self.config.locator
        self.patches = [locator_patch(self.grid, k, self.config.patch_size)
                        for k in range(self.grid.size)]
        self.history = [self.cremi]
        self._quiet = 0

    def patch_scores(self):
        """Patch CREMI of every grid patch against the ground truth."""
        if self.oracle is None:
            raise ProofreadError("patch scores need ground truth")
        labels = self.state.label
        return np.array([patch_cremi(crop(self.oracle.gt, p), crop(labels, p))
                         for p in self.patches])

    def error_patches(self):
        """Indices of patches in the error set (patch CREMI above tau_err)."""
        return np.flatnonzero(self.patch_scores() > self.config.tau_err)

    def step(self, action):
        action = self._check_action(action)
        if action == self.stop_action:
            correct = self.oracle is not None and self.error_patches().size == 0
            return self._advance(self.state.label, locator_reward(True, correct, False, 0, 0),
                                 {"action": "stop"}, stop=True)
        patch = self.patches[action]
        em_p = crop(self.state.em, patch)
        lab_p = crop(self.state.label, patch)
        gt_p = None if self.oracle is None else crop(self.oracle.gt, patch)
        in_error = gt_p is not None and patch_cremi(gt_p, lab_p) > self.config.tau_err
        new_p = self.inner(em_p, lab_p, gt_p, self.counter)
        new = blit(self.state.label, patch, new_p)
        point = render_point(self.state.point, self.grid.pixel(action),
                             self.config.point_sigma * self.config.pool)
        before = self.cremi
        after = self.oracle.cremi(new) if self.oracle is not None else math.nan
        reward = locator_reward(False, False, in_error, before, after)
        outcome = self._advance(new, reward, {"action": "locate", "patch": action,
                                              "in_error": in_error}, point=point)
        self._check_termination(outcome)
        return outcome

    def _check_termination(self, outcome):
        cfg = self.config
        if self.mode == "eval":
            fraction = outcome.info["changed"] / float(cfg.patch_size ** 2)
            self._quiet = self._quiet + 1 if fraction < cfg.stagnation_fraction else 0
            if self._quiet >= cfg.stagnation_steps:
                outcome.info["terminated"] = "stagnation"
                self.done = outcome.done = True
            return
        if self.oracle is None:
            return
        self.history.append(self.cremi)
        k = cfg.plateau_steps
        if self.cremi < cfg.low_cremi:
            outcome.info["terminated"] = "low_cremi"
            self.done = outcome.done = True
        elif len(self.history) > k and self.history[-k - 1] - self.history[-1] < cfg.plateau_tol:
            outcome.info["terminated"] = "plateau"
            self.done = outcome.done = True


ENVIRONMENTS = {
    AgentKind.LOCATOR: LocatorEnv,
    AgentKind.SELECTOR: SelectorEnv,
    AgentKind.SPLITTER: SplitterEnv,
    AgentKind.MERGER: MergerEnv,
}


# ------------------------------------------------------------- episodes

@dataclass
class Transition:
    state: EpisodeState
    action: int
    reward: float
    info: dict


def run_episode(env, policy):
    """Roll ``policy`` in ``env`` until it finishes.

    Returns the final label map and the list of transitions.
    """
    trajectory = []
    while not env.done:
        state = env.state
        action = int(policy.act(env))
        outcome = env.step(action)
        trajectory.append(Transition(state, action, outcome.reward, outcome.info))
    return env.state.label, trajectory


TRAJECTORY_FIELDS = ("step", "agent", "action", "reward", "cremi_before", "cremi_after")


def format_trajectory(trajectory, kind):
    """Tab-separated replay log, one record per step."""
    lines = ["\t".join(TRAJECTORY_FIELDS)]
    for i, tr in enumerate(trajectory):
        lines.append(f"{i}\t{AgentKind(kind).value}\t{tr.action}\t{tr.reward:.12g}\t"
                     f"{tr.info.get('cremi_before', math.nan):.12g}\t"
                     f"{tr.info.get('cremi_after', math.nan):.12g}")
    return "\n".join(lines) + "\n"


def parse_trajectory(text):
    rows = []
    for line in text.strip().splitlines()[1:]:
        step, agent, action, reward, before, after = line.split("\t")
        rows.append((int(step), agent, int(action), float(reward), float(before), float(after)))
    return rows


class Hierarchy:
    """Binds one policy per agent and runs nested episodes.

    ``corrector_episodes`` counts every merger/splitter episode launched,
    which is the cost measure the pipelines report.
    """

    def __init__(self, policies, config=None, mode="eval", log=None):
        self.policies = {AgentKind(k): v for k, v in policies.items()}
        self.config = config or EnvConfig()
        self.mode = mode
        self.corrector_episodes = 0
        self.selector_episodes = 0
        self.log = log  # optional list collecting (kind, trajectory)

    def _policy(self, kind):
        try:
            return self.policies[kind]
        except KeyError:
            raise ParameterError(f"no policy bound for the {kind.value}") from None

    def _record(self, kind, trajectory):
        if self.log is not None:
            self.log.append((kind, trajectory))

    def run_corrector(self, kind, em, labels, gt=None, counter=None):
        kind = AgentKind(kind)
        env = ENVIRONMENTS[kind](em, labels, gt, self.config, self.mode, counter)
        self.corrector_episodes += 1
        final, traj = run_episode(env, self._policy(kind))
        self._record(kind, traj)
        return final

    def run_selector(self, em, labels, gt=None, counter=None):
        env = SelectorEnv(em, labels, gt, self.config, self.mode, counter, inner=self.run_corrector)
        self.selector_episodes += 1
        final, traj = run_episode(env, self._policy(AgentKind.SELECTOR))
        self._record(AgentKind.SELECTOR, traj)
        return final

    def run_locator(self, em, labels, gt=None, counter=None):
        env = LocatorEnv(em, labels, gt, self.config, self.mode, counter, inner=self.run_selector)
        final, traj = run_episode(env, self._policy(AgentKind.LOCATOR))
        self._record(AgentKind.LOCATOR, traj)
        return final

    def run_static(self, em, labels, gt=None, counter=None, order=CORRECTORS):
        for kind in order:
            labels = self.run_corrector(kind, em, labels, gt, counter)
        return labels

    def make_env(self, kind, em, labels, gt=None, counter=None):
        """Environment of ``kind`` whose nested episodes use this hierarchy."""
        kind = AgentKind(kind)
        if kind is AgentKind.SELECTOR:
            return SelectorEnv(em, labels, gt, self.config, self.mode, counter,
                               inner=self.run_corrector)
        if kind is AgentKind.LOCATOR:
            return LocatorEnv(em, labels, gt, self.config, self.mode, counter,
                              inner=self.run_selector)
        return ENVIRONMENTS[kind](em, labels, gt, self.config, self.mode, counter)
