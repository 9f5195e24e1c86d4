import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from proofrl import Proofreader
from proofrl.exceptions import DimensionError, ParameterError, ProofreadError
from proofrl.metrics import cremi_score
from proofrl.policy import StopPolicy
from proofrl.synth import gen_ground_truth, inject_split_error


@pytest.fixture(scope="module")
def sample():
    em, gt = gen_ground_truth(512, 512, 30, 6)
    seg, _ = inject_split_error(gt, np.random.default_rng(1))
    return em, gt, seg


def test_params_and_clone():
    est = Proofreader(mode="sliding_static", stride=128)
    params = est.get_params()
    assert params["mode"] == "sliding_static" and params["stride"] == 128
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(tau_err=0.05)
    assert est.tau_err == 0.05


def test_transform_before_fit(sample):
    em, _, seg = sample
    with pytest.raises(NotFittedError):
        Proofreader().transform([(em, seg)])


def test_oracle_fit_transform_improves(sample):
    em, gt, seg = sample
    est = Proofreader(mode="sliding-static")
    out = est.fit_transform([(em, seg)], [gt])
    assert len(out) == 1 and out[0].shape == seg.shape
    assert cremi_score(gt, out[0]).cremi < cremi_score(gt, seg).cremi
    assert est.reports_[0].corrector_episodes > 0
    assert est.n_samples_seen_ == 1 and est.uses_oracle_


def test_oracle_needs_ground_truth(sample):
    em, _, seg = sample
    est = Proofreader().fit([(em, seg)])
    with pytest.raises(ParameterError):
        est.transform([(em, seg)])


def test_single_pair_and_policy_mapping(sample):
    em, gt, seg = sample
    stop = StopPolicy()
    est = Proofreader(mode="sliding_static", policies={"merger": stop, "splitter": stop})
    out = est.fit((em, seg)).transform((em, seg))
    assert np.array_equal(out[0], seg)
    assert est.score((em, seg), gt) == pytest.approx(-cremi_score(gt, seg).cremi)


def _poke(arr, value):
    arr[0, 0] = value
    return arr


@pytest.mark.parametrize("bad", [
    lambda em, seg: [(em, seg[:, :-1])],
    lambda em, seg: [(em,)],
    lambda em, seg: [],
    lambda em, seg: [(em.astype(np.float32) + 200, seg)],
    lambda em, seg: [(_poke(em.astype(float), np.nan), seg)],
    lambda em, seg: [(em, _poke(seg.astype(np.int64), -1))],
])
def test_validation_errors(sample, bad):
    em, _, seg = sample
    with pytest.raises(ProofreadError):
        Proofreader(policies={"merger": None, "splitter": None},
                    mode="sliding_static").fit(bad(em, seg))


def test_target_count_mismatch(sample):
    em, gt, seg = sample
    with pytest.raises(DimensionError):
        Proofreader().fit([(em, seg)], [gt, gt])


def test_unknown_mode(sample):
    em, _, seg = sample
    with pytest.raises(ParameterError):
        Proofreader(mode="locator").fit([(em, seg)])
