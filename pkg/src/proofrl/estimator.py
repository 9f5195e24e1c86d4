"""scikit-learn style front end to the proofreading pipelines."""
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .env import AgentKind, EnvConfig
from .exceptions import DimensionError, ParameterError
from .metrics import cremi_score
from .pipeline import PipelineConfig, normalize_mode, run_pipeline
from .policy import load_policy_dir, oracle_policies
from .validation import check_em_image, check_label_map, check_same_shape


def _check_pairs(X):
    """``X`` is a sequence of ``(em, labels)`` pairs of equal-shape rasters."""
    if isinstance(X, tuple) and len(X) == 2 and np.ndim(X[0]) == 2:
        X = [X]
    out = []
    for i, item in enumerate(X):
        try:
            em, labels = item
        except (TypeError, ValueError):
            raise DimensionError(f"sample {i} is not an (em, labels) pair") from None
        em = check_em_image(em)
        labels = check_label_map(labels)
        check_same_shape(em, labels, names=("em", "labels"))
        out.append((em, labels))
    if not out:
        raise DimensionError("no samples given")
    return out


def _check_targets(y, pairs):
    if y is None:
        return [None] * len(pairs)
    if np.ndim(y) == 2:
        y = [y]
    if len(y) != len(pairs):
        raise DimensionError(f"{len(y)} ground-truth maps for {len(pairs)} samples")
    out = []
    for (em, _), gt in zip(pairs, y):
        gt = check_label_map(gt, "ground truth")
        check_same_shape(em, gt, names=("em", "ground truth"))
        out.append(gt)
    return out


class Proofreader(TransformerMixin, BaseEstimator):
    """Correct merge and split errors in label maps.

    Parameters
    ----------
    mode : {"locator_selector", "sliding_selector", "sliding_static"}
    policies : "oracle", a directory of ``<agent>.rlcw`` checkpoints, or a
        mapping from agent name to policy object. Oracles need ground truth
        at transform time.
    static_order : corrector order for ``sliding_static``.
    stride : sub-image stride in pixels.
    tau_err : error-set threshold on patch CREMI.

    ``fit`` resolves and checks the policies; it does not train them (see
    :func:`proofrl.train.train_agent`). ``transform`` returns corrected
    label maps and keeps one :class:`~proofrl.pipeline.RunReport` per
    image in ``reports_``.
    """

    def __init__(self, mode="locator_selector", policies="oracle",
                 static_order=("merger", "splitter"), stride=256, tau_err=0.02):
        self.mode = mode
        self.policies = policies
        self.static_order = static_order
        self.stride = stride
        self.tau_err = tau_err

    def _resolve_policies(self):
        if isinstance(self.policies, str) and self.policies == "oracle":
            return oracle_policies(), True
        if isinstance(self.policies, dict):
            return {AgentKind(k): v for k, v in self.policies.items()}, False
        return load_policy_dir(self.policies), False

    def fit(self, X, y=None):
        pairs = _check_pairs(X)
        _check_targets(y, pairs)
        policies, oracle = self._resolve_policies()
        self.config_ = PipelineConfig(
            mode=normalize_mode(self.mode), static_order=tuple(self.static_order),
            policies=policies, env_config=EnvConfig(tau_err=self.tau_err), stride=self.stride)
        self.uses_oracle_ = oracle
        self.n_samples_seen_ = len(pairs)
        return self

    def transform(self, X, y=None):
        check_is_fitted(self, "config_")
        pairs = _check_pairs(X)
        gts = _check_targets(y, pairs)
        if self.uses_oracle_ and any(g is None for g in gts):
            raise ParameterError("oracle policies need ground truth: pass y to transform")
        out, self.reports_ = [], []
        for (em, labels), gt in zip(pairs, gts):
            fixed, report = run_pipeline(em, labels, self.config_, gt)
            out.append(fixed)
            self.reports_.append(report)
        return out

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y, **fit_params).transform(X, y)

    def score(self, X, y):
        """Negative mean CREMI after correction (higher is better)."""
        gts = _check_targets(y, _check_pairs(X))
        fixed = self.transform(X, y)
        return -float(np.mean([cremi_score(g, f).cremi for g, f in zip(gts, fixed)]))
