"""Combinatorial frame search.

Combinations are multisets of frame (or clip) indices, held as sorted tuples.
Searches work slot by slot: a ``SearchSpace`` lists the candidates allowed in
each of the ``n`` positions, which is how the frame phase of hierarchical
search keeps position ``k`` inside the clip chosen for it.

Guided local search (GLS) here follows the classic penalty scheme.  Solution
features are the distinct indices present in a combination.  The augmented
objective adds ``lam * sum(penalty[i])`` over those indices; at every local
optimum the present indices with the largest ``prior_cost[i] / (1 + penalty[i])``
get their penalty bumped.  ``lam`` is fixed at the first local optimum to
``lambda_alpha * g(local_opt) / n``.

Objective values are memoised, and only cache misses are charged against the
evaluation budget.
"""

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, BudgetError, CapacityError
from .features import split_clips
from .oracle import per_clip_losses

DEFAULT_BRUTE_CAP = 10**6


def canonical(indices):
    return tuple(sorted(int(i) for i in indices))


def cosine_distance(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ArgumentError("cosine distance of a zero vector")
    cos = float(a @ b) / (na * nb)
    return 1.0 - min(1.0, max(-1.0, cos))


@dataclass(frozen=True)
class SearchSpace:
    per_slot: tuple

    def __post_init__(self):
        slots = tuple(tuple(int(i) for i in s) for s in self.per_slot)
        if not slots:
            raise ArgumentError("search space needs at least one slot")
        if any(len(s) == 0 for s in slots):
            raise ArgumentError("empty candidate list in search space")
        object.__setattr__(self, "per_slot", slots)

    @classmethod
    def flat(cls, m, n):
        return cls(tuple(tuple(range(m)) for _ in range(n)))

    @property
    def n(self):
        return len(self.per_slot)

    def is_flat(self):
        first = set(self.per_slot[0])
        return all(set(s) == first for s in self.per_slot[1:])


@dataclass
class GlsConfig:
    lambda_alpha: float = 0.3
    max_evaluations: int = 1000
    seed: int = 0
    # penalty rounds in a row that cost no new evaluation before giving up
    patience: int = 50
    # share of a hierarchical budget reserved for the clip phase
    clip_share: float = 0.5

    def validate(self):
        if not self.lambda_alpha > 0:
            raise ArgumentError("lambda_alpha must be > 0")
        if self.max_evaluations < 1:
            raise ArgumentError("max_evaluations must be >= 1")
        if self.patience < 1:
            raise ArgumentError("patience must be >= 1")
        if not 0 <= self.clip_share <= 1:
            raise ArgumentError("clip_share must lie in [0, 1]")


@dataclass
class GlsTrace:
    best_objective_by_eval: list = field(default_factory=list)
    penalties: dict = field(default_factory=dict)
    final: tuple = ()
    evaluations: int = 0
    phases: dict = field(default_factory=dict)

    @property
    def best_objective(self):
        return self.best_objective_by_eval[-1][1] if self.best_objective_by_eval else math.inf

    def best_within(self, evals):
        """Best objective reached using at most ``evals`` evaluations."""
        best = math.inf
        for count, value in self.best_objective_by_eval:
            if count > evals:
                break
            best = value
        return best


class _Exhausted(Exception):
    pass


class _Evaluator:
    def __init__(self, objective, budget, seed_cache=None):
        self.objective = objective
        self.budget = budget
        self.cache = dict(seed_cache or {})
        self.evals = 0
        self.best_key = None
        self.best_value = math.inf
        self.trace = []

    def __call__(self, key):
        value = self.cache.get(key)
        if value is None:
            if self.evals >= self.budget:
                raise _Exhausted
            self.evals += 1
            value = float(self.objective(list(key)))
            self.cache[key] = value
        if value < self.best_value:
            self.best_value, self.best_key = value, key
            if self.trace and self.trace[-1][0] == self.evals:
                self.trace[-1] = (self.evals, value)
            else:
                self.trace.append((self.evals, value))
        return value


def _prior_lookup(prior_costs):
    if callable(prior_costs):
        return prior_costs
    return lambda i: float(prior_costs[i])


def _gls(init, space, objective, prior_costs, config, budget, seed_cache=None):
    n = space.n
    slots = [int(i) for i in init]
    if len(slots) != n:
        raise ArgumentError(f"init has {len(slots)} slots, space has {n}")
    for k, (i, cands) in enumerate(zip(slots, space.per_slot)):
        if i not in cands:
            raise ArgumentError(f"init index {i} not allowed in slot {k}")
    prior = _prior_lookup(prior_costs)
    # candidates tried cheapest-prior first, ties to the lower index
    order = [sorted(set(c), key=lambda i: (prior(i), i)) for c in space.per_slot]

    ev = _Evaluator(objective, budget, seed_cache)
    penalties = defaultdict(int)
    lam = 0.0
    tol = 1e-12

    def augmented(key, g):
        if lam == 0.0:
            return g
        return g + lam * sum(penalties[i] for i in set(key))

    try:
        key = canonical(slots)
        g_cur = ev(key)
        stall = 0
        while True:
            before = ev.evals
            h_cur = augmented(key, g_cur)
            k, quiet = 0, 0
            while quiet < n:
                moved = False
                for cand in order[k]:
                    if cand == slots[k]:
                        continue
                    trial = slots.copy()
                    trial[k] = cand
                    tkey = canonical(trial)
                    g = ev(tkey)
                    h = augmented(tkey, g)
                    if h < h_cur - tol:
                        slots, key, g_cur, h_cur = trial, tkey, g, h
                        moved = True
                        break
                quiet = 0 if moved else quiet + 1
                k = (k + 1) % n

            if lam == 0.0:
                lam = config.lambda_alpha * g_cur / n
                if not lam > 0:
                    costs = [abs(prior(i)) for c in space.per_slot for i in c]
                    lam = config.lambda_alpha * (sum(costs) / len(costs)) / n or config.lambda_alpha
            present = set(slots)
            util = {i: prior(i) / (1 + penalties[i]) for i in present}
            top = max(util.values())
            for i, u in util.items():
                if u == top:
                    penalties[i] += 1

            stall = stall + 1 if ev.evals == before else 0
            if stall >= config.patience:
                break
    except _Exhausted:
        pass

    trace = GlsTrace(list(ev.trace), dict(penalties), ev.best_key, ev.evals)
    return ev.best_key, trace


def guided_local_search(init, space, objective, prior_costs, config):
    """Minimise ``objective`` over ``space`` starting from ``init``.

    Returns the best combination ever evaluated (sorted) and its trace.
    """
    config.validate()
    if not isinstance(space, SearchSpace):
        space = SearchSpace(space)
    return _gls(init, space, objective, prior_costs, config, config.max_evaluations)


# --------------------------------------------------------------------------
# stage 1: hierarchical search under a loss oracle

class _BudgetedOracle:
    """Charges oracle calls against a hard budget shared by both phases."""

    def __init__(self, oracle, budget):
        self.oracle = oracle
        self.budget = budget
        self.used = 0

    @property
    def remaining(self):
        return self.budget - self.used

    def _charge(self):
        if self.used >= self.budget:
            raise _Exhausted
        self.used += 1

    def loss(self, video_id, frames):
        self._charge()
        return self.oracle.loss(video_id, frames)

    @property
    def supports_vectors(self):
        return hasattr(self.oracle, "loss_vector") and getattr(self.oracle, "supports_vectors", True)

    def loss_vector(self, video_id, vector):
        self._charge()
        return self.oracle.loss_vector(video_id, vector)


def _frame_phase(features, oracle, slot_ranges, rng, config, fallback_prior=None):
    """GLS over frames with slot ``k`` restricted to ``slot_ranges[k]``."""
    vid = features.video_id
    n = len(slot_ranges)
    space = SearchSpace(tuple(tuple(range(s, e)) for s, e in slot_ranges))
    init = [int(rng.integers(s, e)) for s, e in slot_ranges]

    union = sorted(set().union(*(set(c) for c in space.per_slot)))
    seed_cache = {}
    if oracle.remaining >= len(union) + 1:
        prior = {i: oracle.loss(vid, [i]) for i in union}
        # mean pool of n copies of frame i is frame i itself
        for i, v in prior.items():
            seed_cache[(i,) * n] = v
    else:
        prior = {i: (fallback_prior(i) if fallback_prior else 0.0) for i in union}

    if oracle.remaining < 1 and canonical(init) not in seed_cache:
        raise BudgetError(f"{vid}: no budget left to evaluate the frame-phase initial solution")

    offset = oracle.used
    best, trace = _gls(init, space, lambda comb: oracle.oracle.loss(vid, comb), prior,
                       config, oracle.remaining, seed_cache)
    oracle.used += trace.evaluations
    trace.best_objective_by_eval = [(c + offset, v) for c, v in trace.best_objective_by_eval]
    trace.evaluations = oracle.used
    return best, trace


def flat_search(features, oracle, n, config):
    """Frame-level GLS over all frames: random init, per-frame loss priors."""
    config.validate()
    if n < 1:
        raise ArgumentError("n must be >= 1")
    budgeted = _BudgetedOracle(oracle, config.max_evaluations)
    rng = np.random.default_rng(config.seed)
    try:
        return _frame_phase(features, budgeted, [(0, features.m)] * n, rng, config)
    except _Exhausted:
        raise BudgetError(f"{features.video_id}: budget {config.max_evaluations} too small") from None


def hierarchical_search(features, oracle, K, n, config):
    """Clip-level GLS followed by frame-level GLS inside the chosen clips.

    The clip phase may spend at most ``clip_share`` of the budget; whatever it
    leaves goes to the frame phase.
    """
    config.validate()
    if n < 1:
        raise ArgumentError("n must be >= 1")
    part = split_clips(features.m, K)
    if len(part) == 1:
        return flat_search(features, oracle, n, config)

    vid = features.video_id
    nc = len(part)
    budgeted = _BudgetedOracle(oracle, config.max_evaluations)
    rng = np.random.default_rng(config.seed)
    clip_budget = int(config.max_evaluations * config.clip_share)
    if clip_budget < nc:
        raise BudgetError(f"{vid}: clip budget {clip_budget} cannot cover {nc} clip losses")

    clip_loss = per_clip_losses(budgeted, features, part)
    seed_cache = {(c,) * n: float(v) for c, v in enumerate(clip_loss)}
    init = [int(np.argmin(clip_loss))] * n

    def clip_objective(comb):
        frames = [f for c in comb for f in range(*part.ranges[c])]
        if budgeted.supports_vectors:
            # pooled exactly as a frame-list oracle would pool it
            return budgeted.oracle.loss_vector(vid, features.rows[frames].mean(axis=0))
        return budgeted.oracle.loss(vid, frames)

    clip_best, clip_trace = _gls(init, SearchSpace.flat(nc, n), clip_objective, clip_loss,
                                 config, clip_budget - budgeted.used, seed_cache)
    clip_trace.best_objective_by_eval = [(c + budgeted.used, v) for c, v in clip_trace.best_objective_by_eval]
    budgeted.used += clip_trace.evaluations
    clip_trace.evaluations = budgeted.used

    frame_to_clip = {f: c for c, (s, e) in enumerate(part.ranges) for f in range(s, e)}
    try:
        best, trace = _frame_phase(features, budgeted, [part.ranges[c] for c in clip_best], rng,
                                   config, fallback_prior=lambda f: float(clip_loss[frame_to_clip[f]]))
    except _Exhausted:
        raise BudgetError(f"{vid}: budget {config.max_evaluations} too small") from None
    trace.phases = {"clip": clip_trace, "clips": clip_best}
    return best, trace


# --------------------------------------------------------------------------
# stage 3: nearest combination to a predicted feature

def _safe_distance(vec, target):
    if not np.any(vec):
        return 1.0
    return cosine_distance(vec, target)


def stage3_search(features, target, n, config):
    """Frame-level GLS for the combination whose mean is closest to ``target``."""
    config.validate()
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (features.d,):
        raise ArgumentError(f"target has shape {target.shape}, features have d={features.d}")
    if not np.any(target):
        raise ArgumentError("zero-norm target")
    rows = features.rows
    prior = np.array([_safe_distance(r, target) for r in rows])
    order = np.lexsort((np.arange(features.m), prior))
    init = [int(order[k % features.m]) for k in range(n)]
    best, trace = guided_local_search(
        init, SearchSpace.flat(features.m, n),
        lambda comb: _safe_distance(rows[comb].mean(axis=0), target),
        prior, config)
    return best, trace


# --------------------------------------------------------------------------
# exhaustive and baseline selection

def count_multisets(m, n):
    return math.comb(m + n - 1, n)


def brute_force(space, objective, cap=DEFAULT_BRUTE_CAP):
    """Exact argmin over every canonical multiset; ties go to the lexicographically smallest.

    ``space`` is a ``SearchSpace`` or an ``(m, n)`` pair.
    """
    if isinstance(space, SearchSpace) and space.is_flat():
        m_cands, n = sorted(set(space.per_slot[0])), space.n
    elif isinstance(space, SearchSpace):
        m_cands, n = None, space.n
    else:
        m, n = space
        if m < 1 or n < 1:
            raise ArgumentError("brute force needs m >= 1 and n >= 1")
        m_cands = list(range(m))

    if m_cands is not None:
        total = count_multisets(len(m_cands), n)
        if total > cap:
            raise CapacityError(f"{total} multisets exceed cap {cap}")
        combos = itertools.combinations_with_replacement(m_cands, n)
    else:
        total = math.prod(len(s) for s in space.per_slot)
        if total > cap:
            raise CapacityError(f"{total} slot assignments exceed cap {cap}")
        combos = sorted({canonical(t) for t in itertools.product(*space.per_slot)})

    best, best_val = None, math.inf
    for comb in combos:
        v = float(objective(list(comb)))
        if v < best_val:
            best, best_val = tuple(comb), v
    return best, best_val


def _segments(m, n):
    for k in range(n):
        yield (k * m) // n, ((k + 1) * m) // n


def uniform_baseline(m, n):
    """Centre frame of each of ``n`` equal segments (TSN-style)."""
    if m < 1 or n < 1:
        raise ArgumentError("uniform_baseline needs m >= 1 and n >= 1")
    return canonical(min((s + e) // 2, m - 1) for s, e in _segments(m, n))


def random_baseline(m, n, rng):
    """One uniformly random frame from each of ``n`` equal segments."""
    if m < 1 or n < 1:
        raise ArgumentError("random_baseline needs m >= 1 and n >= 1")
    return canonical(int(rng.integers(s, max(e, s + 1))) for s, e in _segments(m, n))
