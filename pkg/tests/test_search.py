import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smsframes.errors import ArgumentError, BudgetError, CapacityError
from smsframes.features import FeatureMatrix
from smsframes.oracle import LinearProbe, ProbeOracle, per_frame_losses, probe_loss
from smsframes.search import (GlsConfig, GlsTrace, SearchSpace, brute_force, canonical, cosine_distance,
                              count_multisets, flat_search, guided_local_search, hierarchical_search,
                              random_baseline, stage3_search, uniform_baseline)

from helpers import counted, probe_world


class CountedObjective:
    def __init__(self, fn):
        self.fn = fn
        self.calls = []

    def __call__(self, comb):
        self.calls.append(tuple(comb))
        return self.fn(comb)


# ---- small pieces

def test_cosine_distance():
    assert cosine_distance([1, 0], [2, 0]) == 0.0
    assert cosine_distance([1, 0], [0, 3]) == pytest.approx(1.0)
    assert cosine_distance([1, 1], [-1, -1]) == pytest.approx(2.0)
    with pytest.raises(ArgumentError):
        cosine_distance([0, 0], [1, 0])


def test_count_multisets_matches_enumeration():
    for m in range(1, 7):
        for n in range(1, 5):
            assert count_multisets(m, n) == len(list(itertools.combinations_with_replacement(range(m), n)))
    assert count_multisets(10, 3) == 220


def test_search_space():
    assert SearchSpace.flat(3, 2).per_slot == ((0, 1, 2), (0, 1, 2))
    assert SearchSpace.flat(3, 2).is_flat()
    assert not SearchSpace(((0, 1), (2, 3))).is_flat()
    with pytest.raises(ArgumentError):
        SearchSpace(((0,), ()))
    with pytest.raises(ArgumentError):
        SearchSpace(())


@pytest.mark.parametrize("kwargs", [dict(lambda_alpha=0), dict(max_evaluations=0), dict(patience=0),
                                    dict(clip_share=1.5)])
def test_bad_config(kwargs):
    with pytest.raises(ArgumentError):
        GlsConfig(**kwargs).validate()


def test_trace_best_within():
    trace = GlsTrace([(1, 5.0), (3, 2.0), (9, 1.0)])
    assert trace.best_within(0) == math.inf
    assert trace.best_within(2) == 5.0
    assert trace.best_within(8) == 2.0
    assert trace.best_objective == 1.0


# ---- brute force and baselines

def test_brute_force_separable():
    prior = np.array([0.7, 0.2, 0.9, 0.2, 0.5])
    best, val = brute_force((5, 3), lambda c: float(prior[c].sum()))
    assert best == (1, 1, 1) and val == pytest.approx(0.6)


def test_brute_force_enumerates_each_multiset_once():
    obj = CountedObjective(lambda c: 0.0)
    best, _ = brute_force((4, 3), obj)
    assert len(obj.calls) == 20 == len(set(obj.calls))
    assert best == (0, 0, 0)


def test_brute_force_slot_space():
    space = SearchSpace(((0, 1), (5, 6)))
    best, val = brute_force(space, lambda c: abs(sum(c) - 6.5))
    assert best == (0, 6) and val == 0.5


def test_brute_force_capacity():
    with pytest.raises(CapacityError):
        brute_force((120, 8), lambda c: 0.0)
    with pytest.raises(CapacityError):
        brute_force((10, 3), lambda c: 0.0, cap=219)
    assert brute_force((10, 3), lambda c: 0.0, cap=220)[0] == (0, 0, 0)


def test_uniform_baseline():
    assert uniform_baseline(32, 8) == (2, 6, 10, 14, 18, 22, 26, 30)
    assert uniform_baseline(120, 8) == tuple(range(7, 120, 15))
    sel = uniform_baseline(3, 8)
    assert len(sel) == 8 and set(sel) == {0, 1, 2}
    with pytest.raises(ArgumentError):
        uniform_baseline(0, 3)


def test_random_baseline(rng):
    for _ in range(20):
        sel = random_baseline(32, 8, rng)
        assert len(sel) == 8 and all(4 * k <= f < 4 * k + 4 for k, f in enumerate(sel))
    assert random_baseline(3, 5, np.random.default_rng(0)) == random_baseline(3, 5, np.random.default_rng(0))


# ---- guided local search

def test_gls_separable_objective_finds_cheapest_repeated():
    prior = np.array([0.7, 0.3, 0.9, 0.1, 0.5, 0.4])
    obj = CountedObjective(lambda c: float(prior[c].sum()))
    best, trace = guided_local_search([0, 2, 4], SearchSpace.flat(6, 3), obj, prior,
                                      GlsConfig(max_evaluations=100))
    assert best == (3, 3, 3)
    assert trace.best_objective == pytest.approx(0.3)
    assert trace.evaluations == len(obj.calls) <= 100
    assert len(set(obj.calls)) == len(obj.calls)  # memoised


def test_gls_trace_monotone(rng):
    table = rng.random((8, 8, 8))
    obj = lambda c: float(table[tuple(sorted(c))])
    _, trace = guided_local_search([0, 1, 2], SearchSpace.flat(8, 3), obj, rng.random(8),
                                   GlsConfig(max_evaluations=60, seed=1))
    counts = [c for c, _ in trace.best_objective_by_eval]
    values = [v for _, v in trace.best_objective_by_eval]
    assert counts == sorted(set(counts)) and counts[-1] <= 60
    assert all(a > b for a, b in zip(values, values[1:]))


def test_gls_penalises_at_local_optima(rng):
    table = rng.random((6, 6, 6))
    obj = lambda c: float(table[tuple(sorted(c))])
    _, trace = guided_local_search([0, 1, 2], SearchSpace.flat(6, 3), obj, np.arange(6) + 1.0,
                                   GlsConfig(max_evaluations=40))
    assert sum(trace.penalties.values()) > 0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(1, 60), st.integers(0, 10**6))
def test_gls_respects_budget(m, n, budget, seed):
    table = np.random.default_rng(seed).random(m ** n)
    obj = CountedObjective(lambda c: float(table[np.ravel_multi_index(sorted(c), (m,) * n)]))
    init = [seed % m] * n
    best, trace = guided_local_search(init, SearchSpace.flat(m, n), obj, np.zeros(m),
                                      GlsConfig(max_evaluations=budget, seed=seed, patience=3))
    assert len(obj.calls) <= budget and trace.evaluations == len(obj.calls)
    assert len(best) == n and best == canonical(best) and all(0 <= i < m for i in best)


def test_gls_slot_restricted_space():
    space = SearchSpace(((0, 1, 2), (10, 11), (20, 21, 22)))
    best, _ = guided_local_search([0, 10, 20], space, lambda c: float(sum(c)), lambda i: float(i),
                                  GlsConfig(max_evaluations=50))
    assert best == (0, 10, 20)
    best, _ = guided_local_search([2, 11, 20], space, lambda c: -float(sum(c)), lambda i: -float(i),
                                  GlsConfig(max_evaluations=50))
    assert best == (2, 11, 22)


def test_gls_bad_init():
    with pytest.raises(ArgumentError):
        guided_local_search([0, 1], SearchSpace.flat(3, 3), lambda c: 0.0, np.zeros(3), GlsConfig())
    with pytest.raises(ArgumentError):
        guided_local_search([0, 5, 1], SearchSpace.flat(3, 3), lambda c: 0.0, np.zeros(3), GlsConfig())


def test_gls_flat_landscape_terminates():
    obj = CountedObjective(lambda c: math.log(4))
    best, trace = guided_local_search([0, 0], SearchSpace.flat(5, 2), obj, np.full(5, math.log(4)),
                                      GlsConfig(max_evaluations=10**6, patience=5))
    assert len(best) == 2 and trace.evaluations <= count_multisets(5, 2)


def test_gls_matches_brute_force_on_probe(tmp_path):
    probe, videos, _ = probe_world(tmp_path, num_videos=10, m=10, d=8, classes=4, p=2, seed=42)
    hits = 0
    for vid, (fm, label) in videos.items():
        oracle = ProbeOracle.single(probe, fm, label)
        objective = lambda c: oracle.loss(vid, c)
        _, exact = brute_force((10, 3), objective)
        prior = per_frame_losses(oracle, vid, 10)
        _, trace = guided_local_search(list(np.argsort(prior)[:3]), SearchSpace.flat(10, 3), objective,
                                       prior, GlsConfig(max_evaluations=140))
        hits += abs(trace.best_objective - exact) <= 1e-9
    assert hits >= 9


# ---- stage-1 searches

def _video(tmp_path, m=120, seed=0, **kw):
    probe, videos, truth = probe_world(tmp_path, num_videos=12, m=m, d=16, classes=5, p=8, seed=seed, **kw)
    vid = sorted(videos)[0]
    fm, label = videos[vid]
    return probe, fm, label, truth[vid]


def test_hierarchical_budget_and_validity(tmp_path):
    probe, fm, label, _ = _video(tmp_path)
    for budget in (10, 50, 400):
        oracle = counted(ProbeOracle.single(probe, fm, label), budget)
        best, trace = hierarchical_search(fm, oracle, 30, 8, GlsConfig(max_evaluations=budget))
        assert oracle.eval_count <= budget and trace.evaluations == oracle.eval_count
        assert len(best) == 8 and all(0 <= f < 120 for f in best)
        assert trace.best_objective == pytest.approx(probe_loss(probe, fm, best, label), abs=1e-12)
        assert len(trace.phases["clips"]) == 8


def test_hierarchical_frames_stay_in_chosen_clips(tmp_path):
    probe, fm, label, _ = _video(tmp_path)
    oracle = counted(ProbeOracle.single(probe, fm, label), 400)
    best, trace = hierarchical_search(fm, oracle, 30, 8, GlsConfig(max_evaluations=400))
    allowed = {f for c in trace.phases["clips"] for f in range(30 * c, 30 * c + 30)}
    assert set(best) <= allowed


def test_hierarchical_beats_uniform(tmp_path):
    probe, fm, label, _ = _video(tmp_path)
    oracle = counted(ProbeOracle.single(probe, fm, label), 400)
    _, trace = hierarchical_search(fm, oracle, 30, 8, GlsConfig(max_evaluations=400))
    assert trace.best_objective <= probe_loss(probe, fm, uniform_baseline(120, 8), label)


def test_hierarchical_single_clip_equals_flat(tmp_path):
    probe, fm, label, _ = _video(tmp_path, m=24)
    cfg = GlsConfig(max_evaluations=200, seed=3)
    a = hierarchical_search(fm, counted(ProbeOracle.single(probe, fm, label), 200), 30, 4, cfg)
    b = flat_search(fm, counted(ProbeOracle.single(probe, fm, label), 200), 4, cfg)
    assert a[0] == b[0]
    assert a[1].best_objective_by_eval == b[1].best_objective_by_eval


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_hierarchical_without_vector_entry_point(tmp_path, seed):
    # a frame-list oracle (e.g. a remote one) must follow the identical search path
    probe, fm, label, _ = _video(tmp_path, seed=seed)
    inner = ProbeOracle.single(probe, fm, label)

    class FramesOnly:
        def loss(self, video_id, frames):
            return inner.loss(video_id, frames)

    cfg = GlsConfig(max_evaluations=300, seed=seed)
    a, ta = hierarchical_search(fm, counted(inner, 300), 30, 8, cfg)
    b, tb = hierarchical_search(fm, counted(FramesOnly(), 300), 30, 8, cfg)
    assert a == b and ta.best_objective_by_eval == tb.best_objective_by_eval


def test_hierarchical_tiny_budget(tmp_path):
    probe, fm, label, _ = _video(tmp_path)
    with pytest.raises(BudgetError):
        hierarchical_search(fm, ProbeOracle.single(probe, fm, label), 30, 8, GlsConfig(max_evaluations=1))
    # half of 7 cannot cover the 4 clip losses
    with pytest.raises(BudgetError):
        hierarchical_search(fm, ProbeOracle.single(probe, fm, label), 30, 8, GlsConfig(max_evaluations=7))
    # 8 covers the clips; the frame phase gets whatever is left
    oracle = counted(ProbeOracle.single(probe, fm, label), 8)
    best, _ = hierarchical_search(fm, oracle, 30, 8, GlsConfig(max_evaluations=8))
    assert len(best) == 8 and oracle.eval_count <= 8


def test_noise_free_single_frame_found(tmp_path):
    probe, videos, truth = probe_world(tmp_path, num_videos=20, m=16, d=8, classes=4, p=1, sigma=0.0)
    for vid, (fm, label) in list(videos.items())[:5]:
        oracle = counted(ProbeOracle.single(probe, fm, label), 100)
        best, _ = hierarchical_search(fm, oracle, 30, 1, GlsConfig(max_evaluations=100))
        assert best == (truth[vid][0],)


def test_zero_probe_search_terminates(rng):
    fm = FeatureMatrix("v", rng.standard_normal((40, 4)))
    oracle = counted(ProbeOracle.single(LinearProbe(np.zeros((3, 4)), np.zeros(3)), fm, 0), 300)
    best, trace = hierarchical_search(fm, oracle, 10, 4, GlsConfig(max_evaluations=300, patience=5))
    assert len(best) == 4 and trace.best_objective == pytest.approx(math.log(3))


def test_searches_deterministic(tmp_path):
    probe, fm, label, _ = _video(tmp_path)
    runs = [hierarchical_search(fm, ProbeOracle.single(probe, fm, label), 30, 8,
                                GlsConfig(max_evaluations=200, seed=9)) for _ in range(2)]
    assert runs[0][0] == runs[1][0]
    assert runs[0][1].best_objective_by_eval == runs[1][1].best_objective_by_eval


# ---- stage 3

def test_stage3_recovers_exact_target(rng):
    fm = FeatureMatrix("v", rng.standard_normal((10, 5)))
    target = fm.rows[[2, 7, 7]].mean(axis=0)
    best, trace = stage3_search(fm, target, 3, GlsConfig(max_evaluations=200))
    _, exact = brute_force((10, 3), lambda c: cosine_distance(fm.rows[c].mean(axis=0), target))
    assert trace.best_objective <= exact + 1e-6
    assert trace.evaluations <= 200


def test_stage3_single_frame_target(rng):
    fm = FeatureMatrix("v", rng.standard_normal((12, 6)))
    best, trace = stage3_search(fm, fm.rows[5] * 3.0, 1, GlsConfig(max_evaluations=50))
    assert best == (5,) and trace.best_objective == pytest.approx(0.0, abs=1e-12)


def test_stage3_errors(rng):
    fm = FeatureMatrix("v", rng.standard_normal((4, 3)))
    with pytest.raises(ArgumentError):
        stage3_search(fm, np.zeros(3), 2, GlsConfig())
    with pytest.raises(ArgumentError):
        stage3_search(fm, np.ones(4), 2, GlsConfig())
