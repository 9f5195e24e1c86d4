"""Policies: the trainable actor-critic, uniform random, and ground-truth oracles.

Every policy exposes ``act(env) -> action index``.
"""
import hashlib
import os

import numpy as np
from scipy import ndimage

from .core import crop
from .editops import adjacency_pairs, split_basins
from .env import AgentKind, MergerEnv, SELECT_MERGER, SELECT_SPLITTER, SELECT_STOP, SplitterEnv
from .exceptions import DimensionError, NoOpEdit, ParameterError, ProofreadError
from .io import read_checkpoint, write_checkpoint
from .metrics import IncrementalCremi, contingency, cremi_score
from .network import PolicyNet, softmax
from .validation import check_random_state

# strict-improvement margin used by the oracles when comparing trial scores
IMPROVE_EPS = 1e-12


def channels_for(kind):
    return 2 if AgentKind(kind) is AgentKind.SELECTOR else 3


def boundary_map(labels):
    """1.0 where a pixel has a 4-neighbour with a different label."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape, dtype=bool)
    dx = labels[:, 1:] != labels[:, :-1]
    dy = labels[1:, :] != labels[:-1, :]
    out[:, 1:] |= dx
    out[:, :-1] |= dx
    out[1:, :] |= dy
    out[:-1, :] |= dy
    return out.astype(np.float64)


def _pool(arr, factor):
    if factor == 1:
        return arr
    h, w = arr.shape
    if h % factor or w % factor:
        raise DimensionError(f"cannot pool {h}x{w} by {factor}")
    return arr.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def encode_observation(state, kind=None, input_size=None):
    """Channels-first observation ``(C, S, S)`` with values in [0, 1].

    Channel 0 is the EM image, channel 1 the label-boundary indicator and
    channel 2 the point map (absent for the selector). Locator states are
    mean-pooled 4x unless ``input_size`` says otherwise.
    """
    kind = AgentKind(kind or state.kind)
    h = state.em.shape[0]
    if input_size is None:
        input_size = h // 4 if kind is AgentKind.LOCATOR else h
    factor = h // input_size
    channels = [_pool(state.em.astype(np.float64) / 255.0, factor),
                _pool(boundary_map(state.label), factor)]
    if kind is not AgentKind.SELECTOR:
        channels.append(_pool(state.point.astype(np.float64), factor))
    return np.stack(channels)


def sample_action(logits, temperature=1.0, rng=None):
    rng = check_random_state(rng)
    probs = softmax(np.asarray(logits, dtype=np.float64) / temperature)
    return int(rng.choice(probs.size, p=probs))


def greedy_action(logits):
    return int(np.argmax(logits))


class NetPolicy:
    """Acts with a :class:`PolicyNet`; greedy by default, sampled otherwise."""

    def __init__(self, net, kind, greedy=True, temperature=1.0, rng=None):
        self.net = net
        self.kind = AgentKind(kind)
        self.greedy = greedy
        self.temperature = temperature
        self.rng = check_random_state(rng)

    def act(self, env):
        obs = encode_observation(env.state, self.kind, self.net.input_size)
        logits, _ = self.net.forward(obs)
        if self.greedy:
            return greedy_action(logits)
        return sample_action(logits, self.temperature, self.rng)


class RandomPolicy:
    def __init__(self, rng=None):
        self.rng = check_random_state(rng)

    def act(self, env):
        return int(self.rng.integers(env.action_count))


class StopPolicy:
    """Emits the stop action immediately (a no-op corrector)."""

    def act(self, env):
        return env.stop_action


# ----------------------------------------------------------------- oracles

def _require_oracle(env):
    if env.oracle is None:
        raise ProofreadError("oracle policies need ground truth")
    return env.oracle


def _revisit_memory(env, score=None):
    """Track actions whose last use did not help.

    Without ``score`` an action is "dead" when its last use left the map
    unchanged, and the set resets on any change. With ``score`` an action is
    dead when its last use did not push the score below the best value seen
    so far, and the set resets only when a new best is reached; two windows
    that keep undoing each other therefore both end up dead.
    """
    memo = env.scratch.setdefault("oracle", {"dead": set(), "last": None, "best": np.inf})
    last = memo["last"]
    if score is not None:
        if score < memo["best"] - IMPROVE_EPS:
            memo["best"] = score
            memo["dead"].clear()
        elif last is not None:
            memo["dead"].add(last[0])
    elif last is not None:
        prev_action, prev_label, _ = last
        if prev_label is env.state.label or np.array_equal(prev_label, env.state.label):
            memo["dead"].add(prev_action)
        else:
            memo["dead"].clear()
    return memo


def oracle_locator(env):
    """Highest-scoring patch in the error set that one edit can improve.

    Patches whose last visit did not lower the sub-image score below its
    best value so far are skipped until some other visit does.
    """
    _require_oracle(env)
    memo = _revisit_memory(env, env.cremi)
    scores = env.patch_scores()
    candidates = [k for k in np.argsort(-scores, kind="stable")
                  if scores[k] > env.config.tau_err and k not in memo["dead"]]
    if len(candidates) > 1:
        candidates = _rank_by_containment(env, candidates)
    # two fruitless visits in a row end an eval episode, so probe before visiting
    action = next((int(k) for k in candidates if _patch_fixable(env, k)), None)
    if action is None:
        memo["last"] = None
        return env.stop_action
    memo["last"] = (action, env.state.label, env.cremi)
    return action


def _patch_fixable(env, k):
    """Whether some single split or merge lowers the CREMI of patch ``k``.

    Runs the corrector oracles' searches on a detached copy of the patch, so
    nothing is counted as an invocation. Results are cached per patch until
    its labels change.
    """
    cache = env.scratch.setdefault("fixable", {})
    ref = env.patches[k]
    labels = crop(env.state.label, ref)
    hit = cache.get(k)
    if hit is not None and np.array_equal(hit[0], labels):
        return hit[1]
    em, gt = crop(env.state.em, ref), crop(env.oracle.gt, ref)
    ok = (best_merge(MergerEnv(em, labels, gt, env.config)) is not None
          or best_split(SplitterEnv(em, labels, gt, env.config)) is not None)
    cache[k] = (labels, ok)
    return ok


def error_groups(gt, labels):
    """Segments involved in errors, grouped into connected error clusters.

    Two segments share a group when they overlap a common ground-truth
    label, chained transitively; only groups that are not a clean one-to-one
    match are returned, as a list of label sets.
    """
    table = contingency(gt, labels)
    parent = {}

    def find(x):
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for g, s in zip(table.gt_ids.tolist(), table.seg_ids.tolist()):
        parent[find(("s", s))] = find(("g", g))
    groups = {}
    for node in list(parent):
        groups.setdefault(find(node), []).append(node)
    out = []
    for nodes in groups.values():
        segs = {n[1] for n in nodes if n[0] == "s"}
        if len(nodes) > 2:
            out.append(segs)
    return out


def _rank_by_containment(env, candidates):
    """Reorder candidate windows so edits do not strand parts of an error.

    Edits only land inside the window, so a window that holds a whole error
    cluster and cuts through as few others as possible goes first; ties keep
    the score order.
    """
    groups = error_groups(env.oracle.gt, env.state.label)
    if not groups:
        return candidates
    slices = ndimage.find_objects(env.state.label)
    boxes = []
    for segs in groups:
        parts = [slices[s - 1] for s in segs]
        boxes.append((min(p[1].start for p in parts), max(p[1].stop for p in parts),
                      min(p[0].start for p in parts), max(p[0].stop for p in parts)))
    keyed = []
    for rank, k in enumerate(candidates):
        ref = env.patches[k]
        x0, y0 = ref.origin_x, ref.origin_y
        x1, y1 = x0 + ref.size, y0 + ref.size
        present = set(np.unique(env.state.label[ref.slices]).tolist())
        whole = cut = 0
        for segs, (bx0, bx1, by0, by1) in zip(groups, boxes):
            if not segs & present:
                continue
            if bx0 >= x0 and bx1 <= x1 and by0 >= y0 and by1 <= y1:
                whole += 1
            else:
                cut += 1
        keyed.append((whole == 0, cut, -whole, rank, k))
    return [item[-1] for item in sorted(keyed)]


def oracle_selector(env):
    oracle = _require_oracle(env)
    memo = _revisit_memory(env)
    report = cremi_score(oracle.gt, env.state.label) if np.any(oracle.gt) else None
    if report is None or report.cremi <= env.config.tau_err:
        memo["last"] = None
        return SELECT_STOP
    prefer = SELECT_MERGER if report.voi_split > report.voi_merge else SELECT_SPLITTER
    other = SELECT_SPLITTER if prefer == SELECT_MERGER else SELECT_MERGER
    for action in (prefer, other):
        if action not in memo["dead"]:
            memo["last"] = (action, env.state.label, None)
            return action
    memo["last"] = None
    return SELECT_STOP


def _grid_labels(env):
    pts = env.grid.pixels()
    return env.state.label[pts[:, 1], pts[:, 0]]


def impure_segments(gt, labels):
    """Segments overlapping more than one ground-truth label.

    Splitting any other segment can never lower the score, so split trials
    are restricted to these.
    """
    segs, counts = np.unique(contingency(gt, labels).seg_ids, return_counts=True)
    return set(segs[counts > 1].tolist())


def best_split(env):
    """``(action, score)`` of the grid split that lowers patch CREMI most, or ``None``."""
    oracle = _require_oracle(env)
    labels = env.state.label
    inc = IncrementalCremi(oracle.gt, labels)
    current = inc.score()
    impure = impure_segments(oracle.gt, labels)
    if not impure:
        return None
    hit = _grid_labels(env)
    best = None
    for action in range(env.grid.size):
        seg = int(hit[action])
        if seg not in impure:
            continue
        try:
            basins = split_basins(labels, env.altitude, env.grid.pixel(action))
        except NoOpEdit:
            continue
        moved = inc.gt_counts(basins == 2)
        score = inc.score_columns([seg], [inc.column(seg) - moved, moved])
        if best is None or score < best[1]:
            best = (action, score)
    if best is None or best[1] >= current - IMPROVE_EPS:
        return None
    return best


def oracle_splitter(env):
    found = best_split(env)
    return env.stop_action if found is None else found[0]


def best_merge(env, first=None):
    """Best ``(keep, absorb)`` label pair reachable from grid points, or ``None``.

    With ``first`` given, only pairs containing that label are considered.
    """
    oracle = _require_oracle(env)
    labels = env.state.label
    inc = IncrementalCremi(oracle.gt, labels)
    current = inc.score()
    reachable = set(int(v) for v in _grid_labels(env) if v != 0)
    best = None
    for a, b in adjacency_pairs(labels):
        if a not in reachable or b not in reachable:
            continue
        if first is not None and first not in (a, b):
            continue
        score = inc.score_columns([a, b], [inc.column(a) + inc.column(b)])
        if best is None or score < best[2]:
            best = (a, b, score)
    if best is None or best[2] >= current - IMPROVE_EPS:
        return None
    a, b, _ = best
    if first is not None:
        return (first, b if a == first else a)
    # absorb the label with less of itself on the patch rim: a part lying wholly
    # inside the window is then relabelled everywhere, not just in the window
    rim = np.concatenate([labels[0], labels[-1], labels[1:-1, 0], labels[1:-1, -1]])
    key = lambda lab: (np.count_nonzero(rim == lab), np.count_nonzero(labels == lab))
    if key(b) > key(a):
        a, b = b, a
    return a, b


def _first_grid_point(env, label):
    hit = np.flatnonzero(_grid_labels(env) == label)
    return int(hit[0]) if hit.size else None


def oracle_merger(env):
    pending = env.state.pending
    if pending is None:
        pair = best_merge(env)
        if pair is None:
            return env.stop_action
        return _first_grid_point(env, pair[0])
    pair = best_merge(env, first=pending) if pending != 0 else None
    if pair is None:
        # nothing useful pairs with the pending pick; repeat it (a no-op) to close the pair
        hit = _first_grid_point(env, pending)
        return env.stop_action if hit is None else hit
    return _first_grid_point(env, pair[1])


_ORACLES = {
    AgentKind.LOCATOR: oracle_locator,
    AgentKind.SELECTOR: oracle_selector,
    AgentKind.SPLITTER: oracle_splitter,
    AgentKind.MERGER: oracle_merger,
}


class OraclePolicy:
    """Scripted policy reading the environment's ground truth."""

    def __init__(self, kind):
        self.kind = AgentKind(kind)
        self._act = _ORACLES[self.kind]

    def act(self, env):
        return self._act(env)


def oracle_policy(kind, env):
    """One oracle decision for ``env``."""
    return _ORACLES[AgentKind(kind)](env)


def oracle_policies():
    return {kind: OraclePolicy(kind) for kind in AgentKind}


# ------------------------------------------------------------- checkpoints

def new_policy_net(kind, config, seed=0, **kw):
    """Network sized for ``kind`` under an :class:`~proofrl.env.EnvConfig`."""
    return PolicyNet(channels_for(kind), config.action_count(kind),
                     input_size=config.patch_size, seed=seed, **kw)


def save_policy(path, net, kind, **extra):
    meta = {"agent": AgentKind(kind).value, "channels": net.in_channels,
            "action_count": net.action_count, "seed": net.seed, "net": net.config()}
    meta.update(extra)
    write_checkpoint(path, net.params, meta)


def load_policy(path):
    """Return ``(net, metadata)``; parameters come back as float32-exact values."""
    params, meta = read_checkpoint(path)
    net = PolicyNet(**meta["net"])
    if params.size != net.params.size:
        raise ParameterError(f"{path}: checkpoint has {params.size} parameters, "
                             f"architecture needs {net.params.size}")
    net.set_params(params.astype(net.dtype))
    return net, meta


def param_hash(net):
    return hashlib.sha256(np.ascontiguousarray(net.params).tobytes()).hexdigest()


CHECKPOINT_SUFFIX = ".rlcw"


def policy_path(directory, kind):
    return os.path.join(os.fspath(directory), AgentKind(kind).value + CHECKPOINT_SUFFIX)


def load_policy_dir(directory, kinds=tuple(AgentKind)):
    """Greedy :class:`NetPolicy` objects for every ``<kind>.rlcw`` found in ``directory``."""
    out = {}
    for kind in kinds:
        path = policy_path(directory, kind)
        if os.path.exists(path):
            net, meta = load_policy(path)
            if meta.get("agent", AgentKind(kind).value) != AgentKind(kind).value:
                raise ParameterError(f"{path} holds a {meta['agent']} policy")
            out[AgentKind(kind)] = NetPolicy(net, kind, greedy=True)
    return out
