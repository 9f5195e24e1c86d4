"""Advantage actor-critic training, bottom-up over the agent hierarchy.

Correctors (merger, splitter) train first on patches, the selector then
trains against frozen correctors, and the locator last against a frozen
selector. Each update uses one finished episode: n-step returns bootstrapped
from the critic, an entropy bonus, and Adam on the flat parameter vector.

With ``workers > 1`` several threads roll out episodes on private
environments. Each snapshots the shared parameters before a rollout and
applies its gradient under a lock, in the A3C style; only ``workers = 1``
is bit-reproducible.
"""
from dataclasses import dataclass, field
import math
import threading

import numpy as np

from .env import AgentKind, CORRECTORS, EnvConfig, Hierarchy, run_episode
from .exceptions import ParameterError, StageError, TrainingFault
from .network import log_softmax
from .policy import encode_observation, new_policy_net, param_hash, save_policy
from .validation import check_random_state

# agents each kind delegates to; they must be trained (or oracles) first
PREREQUISITES = {
    AgentKind.MERGER: (),
    AgentKind.SPLITTER: (),
    AgentKind.SELECTOR: CORRECTORS,
    AgentKind.LOCATOR: (AgentKind.SELECTOR,) + CORRECTORS,
}
STAGE_ORDER = (CORRECTORS, (AgentKind.SELECTOR,), (AgentKind.LOCATOR,))

LOG_FIELDS = ("episode", "steps", "return", "cremi_after")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    gamma: float = 0.99
    n_step: int = 5
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    workers: int = 1
    episodes: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.gamma <= 1:
            raise ParameterError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.n_step < 1:
            raise ParameterError(f"n_step must be at least 1, got {self.n_step}")
        if self.workers < 1:
            raise ParameterError(f"workers must be at least 1, got {self.workers}")
        if self.episodes < 0:
            raise ParameterError(f"episodes must be non-negative, got {self.episodes}")
        if self.entropy_coef < 0 or self.value_coef < 0:
            raise ParameterError("loss coefficients must be non-negative")


@dataclass
class TrainStage:
    """Policies already available to the agent being trained.

    ``frozen`` maps agent kinds to policies (trained networks wrapped in
    :class:`NetPolicy`, or oracles standing in for them).
    """

    frozen: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frozen = {AgentKind(k): v for k, v in self.frozen.items()}

    def require(self, kind):
        kind = AgentKind(kind)
        missing = [k.value for k in PREREQUISITES[kind] if k not in self.frozen]
        if missing:
            raise StageError(f"cannot train the {kind.value} before: {', '.join(missing)}")
        return kind

    def hashes(self):
        return {k: param_hash(p.net) for k, p in self.frozen.items() if hasattr(p, "net")}


# ---------------------------------------------------------------- returns

def compute_returns(rewards, values, gamma=0.99, n_step=5, bootstrap_value=0.0):
    """n-step discounted returns and advantages for one trajectory.

    ``R_t = sum_{k<m} gamma^k r_{t+k} + gamma^m V_{t+m}`` with
    ``m = min(n_step, T - t)``; ``V_T`` is ``bootstrap_value`` (0 when the
    episode ended, the critic's estimate when it was cut).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.size == 0:
        raise ParameterError("trajectory is empty")
    if values.shape != rewards.shape:
        raise ParameterError("rewards and values differ in length")
    T = rewards.size
    tail = np.append(values, bootstrap_value)
    returns = np.empty(T)
    for t in range(T):
        m = min(n_step, T - t)
        acc = tail[t + m]
        for k in range(m - 1, -1, -1):
            acc = rewards[t + k] + gamma * acc
        returns[t] = acc
    return returns, returns - values


# ------------------------------------------------------------------ loss

@dataclass
class Batch:
    obs: np.ndarray        # (N, C, S, S)
    actions: np.ndarray    # (N,)
    returns: np.ndarray    # (N,)
    advantages: np.ndarray  # (N,)

    def __len__(self):
        return int(self.actions.size)


def loss_and_gradients(net, batch, config, params=None):
    """Return ``(loss, grad, parts)``.

    ``loss = -mean(log pi(a|s) A) + value_coef mean((R - V)^2)
    - entropy_coef mean(H(pi(.|s)))``. Advantages are constants.
    """
    n = len(batch)
    if n == 0:
        raise ParameterError("batch is empty")
    logits, values, cache = net.forward_cache(batch.obs, params)
    logp = log_softmax(logits)
    p = np.exp(logp)
    rows = np.arange(n)
    adv = np.asarray(batch.advantages, dtype=np.float64)
    ret = np.asarray(batch.returns, dtype=np.float64)
    entropy = -(p * logp).sum(axis=1)
    parts = {
        "policy": float(-np.mean(logp[rows, batch.actions] * adv)),
        "value": float(config.value_coef * np.mean((ret - values) ** 2)),
        "entropy": float(-config.entropy_coef * np.mean(entropy)),
    }
    loss = parts["policy"] + parts["value"] + parts["entropy"]
    if not math.isfinite(loss):
        raise TrainingFault("non-finite loss", dump={"parts": parts,
                                                     "logits_max": float(np.max(np.abs(logits)))})
    onehot = np.zeros_like(p)
    onehot[rows, batch.actions] = 1.0
    dlogits = -(onehot - p) * adv[:, None] / n
    dlogits += config.entropy_coef * p * (logp + entropy[:, None]) / n
    dvalues = config.value_coef * 2.0 * (values - ret) / n
    grad = net.backward(cache, dlogits, dvalues)
    if not np.all(np.isfinite(grad)):
        raise TrainingFault("non-finite gradient", dump={"parts": parts})
    return loss, grad, parts


# ------------------------------------------------------------------ adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_update(params, grad, state, config):
    """One bias-corrected Adam step; returns ``(params, state)`` as new objects."""
    params = np.asarray(params)
    grad = np.asarray(grad)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ParameterError("parameter, gradient and moment shapes differ")
    t = state.t + 1
    m = config.beta1 * state.m + (1 - config.beta1) * grad
    v = config.beta2 * state.v + (1 - config.beta2) * grad * grad
    m_hat = m / (1 - config.beta1 ** t)
    v_hat = v / (1 - config.beta2 ** t)
    new = params - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
    return new.astype(params.dtype, copy=False), AdamState(m, v, t)


# -------------------------------------------------------------- rollouts

@dataclass
class EpisodeRecord:
    episode: int
    steps: int
    ret: float
    cremi_after: float


def format_log(records):
    lines = ["\t".join(LOG_FIELDS)]
    lines += [f"{r.episode}\t{r.steps}\t{r.ret:.12g}\t{r.cremi_after:.12g}" for r in records]
    return "\n".join(lines) + "\n"


def parse_log(text):
    out = []
    for line in text.strip().splitlines()[1:]:
        ep, steps, ret, cr = line.split("\t")
        out.append(EpisodeRecord(int(ep), int(steps), float(ret), float(cr)))
    return out


class _Recorder:
    """Samples actions and keeps what the update needs."""

    def __init__(self, net, kind, rng):
        self.net, self.kind, self.rng = net, kind, rng
        self.obs, self.actions, self.values = [], [], []

    def act(self, env):
        obs = encode_observation(env.state, self.kind, self.net.input_size)
        logits, value = self.net.forward(obs)
        if not (np.all(np.isfinite(logits)) and math.isfinite(value)):
            raise TrainingFault("non-finite policy output")
        p = np.exp(log_softmax(logits))
        action = int(self.rng.choice(p.size, p=p))
        self.obs.append(obs)
        self.actions.append(action)
        self.values.append(value)
        return action


def rollout(net, kind, env, rng, config):
    """Run one sampled episode; return ``(batch, record_fields)``."""
    rec = _Recorder(net, kind, rng)
    _, traj = run_episode(env, rec)
    rewards = [tr.reward for tr in traj]
    returns, adv = compute_returns(rewards, rec.values, config.gamma, config.n_step, 0.0)
    batch = Batch(np.stack(rec.obs), np.asarray(rec.actions), returns, adv)
    return batch, (len(traj), float(np.sum(rewards)), float(traj[-1].info["cremi_after"]))


class _SharedParams:
    """Parameter store with snapshot reads and serialised Adam applies."""

    def __init__(self, params, config):
        self.params = params.copy()
        self.state = AdamState.zeros(params.size)
        self.config = config
        self.lock = threading.Lock()
        self.last_finite = params.copy()

    def snapshot(self):
        with self.lock:
            return self.params.copy()

    def apply(self, grad):
        with self.lock:
            new, state = adam_update(self.params, grad, self.state, self.config)
            if not np.all(np.isfinite(new)):
                raise TrainingFault("parameters diverged",
                                    dump={"params": self.last_finite.copy(), "step": state.t})
            self.params, self.state = new, state
            self.last_finite = new


def train_agent(kind, stage, config, env_factory, env_config=None, net=None, fault_path=None):
    """Train the ``kind`` policy; returns ``(net, log)``.

    ``env_factory(rng, hierarchy)`` must return a fresh training environment
    of ``kind``; ``hierarchy`` runs nested episodes with the frozen policies
    of ``stage``. On divergence the last finite parameters are written to
    ``fault_path`` (if given) before :class:`TrainingFault` propagates.
    """
    kind = stage.require(kind)
    env_config = env_config or EnvConfig()
    if net is None:
        net = new_policy_net(kind, env_config, seed=config.seed)
    before = stage.hashes()
    shared = _SharedParams(net.params, config)
    seeds = np.random.SeedSequence(config.seed).spawn(config.workers)
    log = []
    log_lock = threading.Lock()
    counter = iter(range(config.episodes))
    errors = []

    def worker(seq):
        rng = np.random.default_rng(seq)
        local = net.copy()
        hierarchy = Hierarchy(stage.frozen, env_config, mode="train")
        while not errors:
            with log_lock:
                episode = next(counter, None)
            if episode is None:
                return
            local.set_params(shared.snapshot())
            env = env_factory(rng, hierarchy)
            batch, (steps, ret, cremi_after) = rollout(local, kind, env, rng, config)
            _, grad, _ = loss_and_gradients(local, batch, config)
            shared.apply(grad)
            with log_lock:
                log.append(EpisodeRecord(episode, steps, ret, cremi_after))

    def guarded(seq):
        try:
            worker(seq)
        except Exception as exc:  # surfaced in the calling thread
            errors.append(exc)

    if config.workers == 1:
        try:
            worker(seeds[0])
        except TrainingFault as exc:
            errors.append(exc)
    else:
        threads = [threading.Thread(target=guarded, args=(s,), daemon=True) for s in seeds]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
    if errors:
        exc = errors[0]
        if isinstance(exc, TrainingFault) and fault_path is not None:
            net.set_params(shared.last_finite)
            save_policy(fault_path, net, kind, fault=str(exc))
        raise exc
    if stage.hashes() != before:
        raise TrainingFault("frozen inner-agent parameters changed during training")
    net.set_params(shared.params)
    log.sort(key=lambda r: r.episode)
    return net, log


# ------------------------------------------------------------ evaluation

def evaluate_policy(policy, env_factory, episodes, seed=0, stage=None, env_config=None):
    """Mean undiscounted return of ``policy`` over ``episodes`` fresh environments.

    The environment stream depends only on ``seed``, so two policies
    evaluated with the same seed face the same episodes.
    """
    env_rng = check_random_state(seed)
    hierarchy = Hierarchy((stage or TrainStage()).frozen, env_config or EnvConfig(), mode="eval")
    returns = []
    for _ in range(episodes):
        env = env_factory(env_rng, hierarchy)
        _, traj = run_episode(env, policy)
        returns.append(sum(tr.reward for tr in traj))
    return float(np.mean(returns))


def patch_env_factory(kind, examples):
    """Factory drawing a random example per episode from a patch test set.

    Episode mode (train or eval) follows the hierarchy passed in.
    """
    kind = AgentKind(kind)
    if kind is AgentKind.LOCATOR:
        raise ParameterError("the locator trains on sub-images, not patches")

    def make(rng, hierarchy):
        ex = examples[int(rng.integers(len(examples)))]
        return hierarchy.make_env(kind, ex.em, ex.seg, ex.gt)

    return make


def image_env_factory(examples):
    """Locator environments over random sub-images of full-size examples."""

    def make(rng, hierarchy):
        size = hierarchy.config.sub_size
        ex = examples[int(rng.integers(len(examples)))]
        h, w = ex.gt.shape
        y = int(rng.integers(h - size + 1))
        x = int(rng.integers(w - size + 1))
        win = (slice(y, y + size), slice(x, x + size))
        return hierarchy.make_env(AgentKind.LOCATOR, ex.em[win], ex.seg[win], ex.gt[win])

    return make

