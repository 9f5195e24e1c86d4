import numpy as np
import pytest
from scipy import ndimage

from proofrl.exceptions import InjectionError, ParameterError
from proofrl.metrics import cremi_score, patch_cremi
from proofrl.synth import (ErrorScript, apply_script, gen_ground_truth, inject_errors,
                           inject_merge_error, inject_split_error, make_image_set,
                           make_patch_testset)


def _components(labels, lab):
    return ndimage.label(labels == lab)[1]


def test_two_seed_voronoi():
    em, gt = gen_ground_truth(64, 64, 2, 3)
    assert set(np.unique(gt)) == {1, 2}
    boundary = np.zeros(gt.shape, bool)
    boundary[:, 1:] |= gt[:, 1:] != gt[:, :-1]
    boundary[1:, :] |= gt[1:, :] != gt[:-1, :]
    assert em[boundary].mean() < em[~boundary].mean() - 50


def test_generation_is_deterministic():
    a = gen_ground_truth(96, 80, 9, 42)
    b = gen_ground_truth(96, 80, 9, 42)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    assert a[1].shape == (80, 96)


def test_fifty_connected_segments():
    _, gt = gen_ground_truth(512, 512, 50, 1)
    ids = np.unique(gt)
    np.testing.assert_array_equal(ids, np.arange(1, 51))
    assert all(_components(gt, lab) == 1 for lab in ids)


def test_needs_two_seeds():
    with pytest.raises(ParameterError):
        gen_ground_truth(32, 32, 1, 0)


def test_merge_injection(voronoi_128):
    _, gt = voronoi_128
    seg, script = inject_merge_error(gt, np.random.default_rng(0))
    assert np.unique(seg).size == np.unique(gt).size - 1
    (a, b), = script.merges
    assert np.array_equal(seg != gt, gt == b)
    r = cremi_score(gt, seg)
    assert r.voi_split == 0.0 and r.voi_merge > 0
    assert apply_script(gt, script).tobytes() == seg.tobytes()


def test_merge_needs_adjacent_pair():
    with pytest.raises(InjectionError):
        inject_merge_error(np.ones((4, 4)), np.random.default_rng(0))


def test_split_injection(voronoi_128):
    _, gt = voronoi_128
    seg, script = inject_split_error(gt, np.random.default_rng(0))
    assert np.unique(seg).size == np.unique(gt).size + 1
    cut, = script.splits
    changed = seg != gt
    assert np.all(gt[changed] == cut.label) and np.all(seg[changed] == cut.fresh)
    assert _components(seg, cut.label) == 1 and _components(seg, cut.fresh) == 1
    r = cremi_score(gt, seg)
    assert r.voi_merge == 0.0 and r.voi_split > 0
    assert apply_script(gt, script).tobytes() == seg.tobytes()


def test_split_smallest_segment():
    gt = np.array([[1, 1]], np.uint32)
    seg, _ = inject_split_error(gt, np.random.default_rng(0))
    assert sorted(seg.ravel().tolist()) == [1, 2]


def test_split_needs_splittable_segment():
    with pytest.raises(InjectionError):
        inject_split_error(np.array([[1, 2]]), np.random.default_rng(0))


def test_script_dict_round_trip(voronoi_128):
    _, gt = voronoi_128
    seg, script = inject_errors(gt, 2, 2, np.random.default_rng(4))
    again = ErrorScript.from_dict(script.to_dict())
    assert apply_script(gt, again).tobytes() == seg.tobytes()


def test_isolated_injections_touch_distinct_segments(voronoi_128):
    _, gt = voronoi_128
    seg, script = inject_errors(gt, 1, 2, np.random.default_rng(8), isolate=True)
    touched = [m for pair in script.merges for m in pair] + [c.label for c in script.splits]
    assert len(set(touched)) == len(touched)


@pytest.mark.parametrize("kind", ["merge", "split", "combined"])
def test_patch_testset(kind):
    ts = make_patch_testset(kind, 20, 5)
    assert len(ts) == 20
    for ex in ts:
        assert ex.em.shape == ex.gt.shape == ex.seg.shape == (128, 128)
        r = cremi_score(ex.gt, ex.seg)
        assert r.cremi > 0
        if kind == "merge":
            assert r.voi_split == 0.0
        elif kind == "split":
            assert r.voi_merge == 0.0
        else:
            assert len(ex.script.merges) == 1 and len(ex.script.splits) == 1
    again = make_patch_testset(kind, 3, 5)
    assert all(a.seg.tobytes() == b.seg.tobytes() for a, b in zip(ts, again))


def test_image_set_error_counts():
    for ex in make_image_set(6, 2):
        n = len(ex.script.merges) + len(ex.script.splits)
        assert 1 <= n <= 5
        assert patch_cremi(ex.gt, ex.seg) > 0
        assert apply_script(ex.gt, ex.script).tobytes() == ex.seg.tobytes()
