"""One test per acceptance criterion; each records a PASS/FAIL line."""
import itertools
import time

import numpy as np
import pytest

from conftest import dumbbell
from oracles import brute_arand, brute_voi, finite_difference_grad, minimax_costs
from test_io import GOLDEN_CKPT, GOLDEN_LABELS
from proofrl.core import locator_patch
from proofrl.editops import gaussian_smooth, merge_segments, split_basins, watershed_split
from proofrl.env import (EnvConfig, GridSpec, MergerEnv, corrector_reward, locator_reward,
                         r_diff, selector_reward)
from proofrl.exceptions import NoOpEdit
from proofrl.io import (KIND_EM, KIND_LABELS, KIND_POINTS, checkpoint_from_bytes,
                        checkpoint_to_bytes, raster_from_bytes, read_checkpoint, read_raster,
                        write_checkpoint, write_raster)
from proofrl.metrics import arand, contingency, cremi_score, patch_cremi, voi
from proofrl.network import PolicyNet
from proofrl.pipeline import PipelineConfig, eval_patch_suite, run_pipeline
from proofrl.policy import NetPolicy, RandomPolicy, oracle_policies, param_hash
from proofrl.synth import (gen_ground_truth, inject_merge_error, inject_split_error,
                           make_image_set, make_patch_testset)
from proofrl.train import (Batch, TrainConfig, TrainStage, evaluate_policy, format_log,
                           loss_and_gradients, patch_env_factory, train_agent)


def test_criterion_01_metric_oracles(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    ok = True
    for _ in range(100):
        k_g, k_s = rng.integers(1, 9, 2)
        gt = rng.integers(0, k_g + 1, (16, 16)).astype(np.uint32)
        gt[0, 0] = max(gt[0, 0], 1)  # at least one foreground pixel
        seg = rng.integers(0, k_s + 1, (16, 16)).astype(np.uint32)
        table = contingency(gt, seg)
        got = (*voi(table), arand(table))
        want = (*brute_voi(gt, seg), brute_arand(gt, seg))
        for g, w in zip(got, want):
            err = abs(g - w) / abs(w) if w != 0 else abs(g)
            worst = max(worst, err)
            ok &= np.isclose(g, w, rtol=1e-10, atol=1e-14)
    elapsed = time.perf_counter() - start
    verdict(1, bool(ok) and elapsed < 10,
            f"100 pairs, worst rel err {worst:.2e}, {elapsed:.2f}s")


def test_criterion_02_metric_axioms(verdict):
    rng = np.random.default_rng(7)
    ok, n = True, 0
    for i in range(50):
        _, gt = gen_ground_truth(96, 96, int(rng.integers(6, 20)), 1000 + i)
        ok &= cremi_score(gt, gt).cremi == 0.0
        merged, _ = inject_merge_error(gt, rng)
        r = cremi_score(gt, merged)
        ok &= r.voi_merge > 0 and r.voi_split == 0.0 and r.cremi > 0
        split, _ = inject_split_error(gt, rng)
        r = cremi_score(gt, split)
        ok &= r.voi_split > 0 and r.voi_merge == 0.0 and r.cremi > 0
        n += 2
    verdict(2, bool(ok), f"{n} fixtures: self-score 0, merge/split sign structure")


# explicit expectations: (before, after) -> reward when an edit happens inside E_t
_EDITS = {(0.4, 0.1): 1.75, (0.2, 0.0): 2.0, (0.3, 0.15): 1.5, (0.2, 0.2): -1.0,
          (0.1, 0.3): -1.0, (0.0, 0.0): -1.0, (0.0, 0.2): -1.0}


def test_criterion_03_reward_tables(verdict):
    cases = 0
    ok = True
    for (b, a), edit in _EDITS.items():
        for stop, stop_ok, in_err in itertools.product((True, False), repeat=3):
            if stop:
                loc, sel, cor = ((2.0, 1.0, 1.0) if stop_ok else (-2.0, -1.0, -1.0))
            else:
                loc = edit if in_err else -2.0
                sel = edit
                cor = edit if in_err else -1.0
            ok &= locator_reward(stop, stop_ok, in_err, b, a) == pytest.approx(loc, abs=1e-12)
            ok &= selector_reward(stop, stop_ok, b, a) == pytest.approx(sel, abs=1e-12)
            for agent in ("splitter", "merger"):
                got = corrector_reward(agent, stop, stop_ok, in_err, b, a)
                ok &= got == pytest.approx(cor, abs=1e-12)
            cases += 4
    ok &= r_diff(0.0, 0.5) == 0.0 and r_diff(0.5, 0.5) == 0.0
    # merger: the first click of a pair only selects, reward 0
    gt = np.ones((128, 128), np.uint32)
    gt[:, 64:] = 2
    seg = gt.copy()
    seg[:, 32:64] = 3
    env = MergerEnv(np.full(gt.shape, 200, np.uint8), seg, gt)
    ok &= env.step(0).reward == 0.0 and env.step(75).reward == 2.0
    verdict(3, bool(ok), f"{cases} table cases plus r_diff boundaries and merger pairing")


def test_criterion_04_edit_round_trip_and_saddle(verdict):
    rng = np.random.default_rng(11)
    trips, ok = 0, True
    seed = 0
    while trips < 120:
        em, gt = gen_ground_truth(128, 128, 15, 300 + seed)
        seed += 1
        alt = gaussian_smooth(em)
        for _ in range(20):
            x, y = (int(v) for v in rng.integers(0, 128, 2))
            fresh = int(gt.max()) + 1
            try:
                out = watershed_split(gt, alt, (x, y), fresh_label=fresh)
            except NoOpEdit:
                continue
            ok &= cremi_score(gt, out).cremi > 0
            back = merge_segments(out, int(gt[y, x]), fresh)
            ok &= cremi_score(gt, back).cremi == 0.0
            trips += 1
    saddles = 0
    for trial in range(30):
        labels, alt, (q, row) = dumbbell(32, neck_row=int(rng.integers(4, 20)))
        inside = labels == 1
        alt[inside] += rng.integers(0, 200, inside.sum())
        ys, xs = np.nonzero(inside)
        k = int(rng.integers(ys.size))
        target = (int(ys[k]), int(xs[k]))
        basins = split_basins(labels, alt, (target[1], target[0]))
        far = _farthest(inside, target)
        cost_t = minimax_costs(alt, inside, target)
        cost_f = minimax_costs(alt, inside, far)
        ok &= bool(np.all(basins[inside & (cost_t < cost_f)] == 1))
        ok &= bool(np.all(basins[inside & (cost_f < cost_t)] == 2))
        saddles += 1
    verdict(4, bool(ok), f"{trips} split/merge round trips, {saddles} dumbbell minimax checks")


def _farthest(member, start):
    from collections import deque
    dist = np.full(member.shape, -1)
    dist[start] = 0
    queue = deque([start])
    while queue:
        y, x = queue.popleft()
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            q = (y + dy, x + dx)
            if (0 <= q[0] < member.shape[0] and 0 <= q[1] < member.shape[1]
                    and member[q] and dist[q] < 0):
                dist[q] = dist[y, x] + 1
                queue.append(q)
    ys, xs = np.nonzero(dist == dist.max())
    return int(ys[0]), int(xs[0])


def test_criterion_05_oracle_end_to_end(verdict):
    start = time.perf_counter()
    images = make_image_set(100, 123)
    cfg = PipelineConfig(mode="locator_selector", policies=oracle_policies())
    before, after, split_only = [], [], []
    for ex in images:
        _, rep = run_pipeline(ex.em, ex.seg, cfg, ex.gt)
        before.append(rep.before.cremi)
        after.append(rep.after.cremi)
        if ex.source["kind"] == "split":
            split_only.append(rep.after.cremi)
    elapsed = time.perf_counter() - start
    med_b, med_a = float(np.median(before)), float(np.median(after))
    nonzero = sum(v != 0.0 for v in split_only)
    ok = med_a <= 0.4 * med_b and nonzero == 0 and elapsed < 300
    verdict(5, ok, f"median {med_b:.4f} -> {med_a:.4f} (ratio {med_a / med_b:.3f}), "
                   f"{nonzero}/{len(split_only)} split-only images nonzero, {elapsed:.1f}s")


def _error_fraction(ex, grid):
    bad = [patch_cremi(ex.gt[p.slices], ex.seg[p.slices]) > 0
           for p in (locator_patch(grid, k) for k in range(grid.size))]
    return float(np.mean(bad))


def test_criterion_06_invocation_efficiency(verdict):
    grid = GridSpec.locator(512, 7)
    pool = make_image_set(12, 606, max_errors=2)
    images = [ex for ex in pool if _error_fraction(ex, grid) <= 0.2][:4]
    pol = oracle_policies()
    totals = {}
    for mode in ("locator_selector", "sliding_static"):
        cfg = PipelineConfig(mode=mode, policies=pol)
        reps = [run_pipeline(ex.em, ex.seg, cfg, ex.gt)[1] for ex in images]
        totals[mode] = (sum(r.corrector_episodes for r in reps), sum(r.seconds for r in reps))
    loc, sta = totals["locator_selector"], totals["sliding_static"]
    ok = len(images) >= 3 and loc[0] < sta[0]
    verdict(6, ok, f"{len(images)} images: corrector episodes locator {loc[0]} ({loc[1]:.2f}s) "
                   f"vs static {sta[0]} ({sta[1]:.2f}s)")


def test_criterion_07_gradient_check(verdict):
    start = time.perf_counter()
    net = PolicyNet(4, 7, input_size=16, width=4, fc_size=8, seed=3)
    rng = np.random.default_rng(77)
    net.set_params(rng.normal(0, 0.5, net.params.size))
    batch = Batch(rng.random((3, 4, 16, 16)), rng.integers(0, 7, 3), rng.normal(size=3),
                  rng.normal(size=3))
    cfg = TrainConfig(entropy_coef=0.05)
    _, grad, _ = loss_and_gradients(net, batch, cfg)
    fd = finite_difference_grad(lambda p: loss_and_gradients(net, batch, cfg, params=p)[0],
                                net.params)
    errs = {name: np.linalg.norm(grad[sl] - fd[sl]) / max(np.linalg.norm(fd[sl]), 1e-12)
            for name, sl in net.group_slices().items()}
    worst = max(errs, key=errs.get)
    elapsed = time.perf_counter() - start
    ok = errs[worst] <= 1e-4 and elapsed < 120
    verdict(7, ok, f"{len(errs)} groups, {net.params.size} params, worst {worst} "
                   f"{errs[worst]:.2e}, {elapsed:.1f}s")


def _smoke_run(train_set, cfg):
    tc = TrainConfig(learning_rate=1e-3, episodes=300, seed=1)
    return train_agent("splitter", TrainStage(), tc, patch_env_factory("splitter", train_set),
                       cfg)


def test_criterion_08_training_smoke(verdict):
    cfg = EnvConfig.small()
    geometry = dict(image_size=128, n_seeds=30, patch_size=32, corrector_n=3)
    train_set = make_patch_testset("merge", 256, 11, **geometry)
    test_set = make_patch_testset("merge", 200, 12, **geometry)
    start = time.perf_counter()
    net_a, log_a = _smoke_run(train_set, cfg)
    train_seconds = time.perf_counter() - start
    net_b, log_b = _smoke_run(train_set, cfg)
    same = format_log(log_a) == format_log(log_b) and param_hash(net_a) == param_hash(net_b)
    factory = patch_env_factory("splitter", test_set)
    trained = evaluate_policy(NetPolicy(net_a, "splitter"), factory, 200, seed=5, env_config=cfg)
    random = evaluate_policy(RandomPolicy(0), factory, 200, seed=5, env_config=cfg)
    ok = trained - random >= 0.5 and same and train_seconds < 600
    verdict(8, ok, f"trained {trained:.3f} vs random {random:.3f} over 200 episodes, "
                   f"bit-identical reruns {same}, train {train_seconds:.1f}s")


def test_criterion_09_selector_not_worse_than_static(verdict):
    testset = make_patch_testset("combined", 1000, 909)
    # tau 0: neither scheme may stop on a patch that is merely below the error threshold
    cfg = EnvConfig(tau_err=0.0)
    pol = oracle_policies()
    static = eval_patch_suite(testset, pol, "static", env_config=cfg)
    selector = eval_patch_suite(testset, pol, "selector", env_config=cfg)
    worse = int(np.sum(selector.after > static.after + 1e-12))
    ok = selector.mean_after <= static.mean_after
    verdict(9, ok, f"1000 patches: before {static.mean_before:.4f}, static "
                   f"{static.mean_after:.4f}, selector {selector.mean_after:.4f}; "
                   f"selector worse on {worse}")


def test_criterion_10_file_formats(verdict, tmp_path):
    rng = np.random.default_rng(10)
    ok = True
    ok &= raster_from_bytes(GOLDEN_LABELS)[0].tolist() == [[0x04030201, 0xFFFFFFFF]]
    params, meta = checkpoint_from_bytes(GOLDEN_CKPT)
    ok &= params.tolist() == [1.0, -2.0] and meta == {"agent": 1}
    ok &= checkpoint_to_bytes(np.array([1.0, -2.0], np.float32), {"agent": 1}) == GOLDEN_CKPT
    rasters = {KIND_LABELS: rng.integers(0, 2**32, (33, 17), dtype=np.uint32),
               KIND_EM: rng.integers(0, 256, (5, 40), dtype=np.uint8),
               KIND_POINTS: rng.random((9, 9)).astype(np.float32)}
    for kind, arr in rasters.items():
        path = tmp_path / f"r{kind}.rlc"
        write_raster(path, arr.astype(arr.dtype.newbyteorder(">")), kind)
        back = read_raster(path, kind)
        ok &= back.dtype == arr.dtype and back.tobytes() == arr.tobytes()
    weights = rng.normal(size=1000).astype(np.float32)
    write_checkpoint(tmp_path / "w.rlcw", weights, {"agent": "merger"})
    back, meta = read_checkpoint(tmp_path / "w.rlcw")
    ok &= back.tobytes() == weights.tobytes() and meta == {"agent": "merger"}
    verdict(10, bool(ok), "golden RLC1/RLCW bytes and round trips for every kind")
