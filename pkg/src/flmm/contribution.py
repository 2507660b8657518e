"""Participant contribution measurement.

Exact Shapley by coalition enumeration (memoized, 2^n evaluations),
a weighted-truncated permutation-sampling approximation with efficiency
renormalization, and per-block masking attribution. The coalition value in
FL replays the logged per-party updates instead of retraining per coalition.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from flmm.aggregation import AggregationPlan, apply_block_mask, fedavg_adapters, \
    snapshot_blocks
from flmm.errors import HistoryError, IdentityError, SamplingError, SizeError
from flmm.metrics import recall_at_k
from flmm.model import ModelSnapshot
from flmm.rng import SplitMix64


@dataclass
class CoalitionValueFn:
    """Deterministic coalition -> value mapping with a subset memo."""

    parties: list
    evaluate: object  # callable(frozenset) -> float
    cache: dict = field(default_factory=dict)

    def __call__(self, coalition) -> float:
        key = frozenset(coalition)
        if key not in self.cache:
            self.cache[key] = float(self.evaluate(key))
        return self.cache[key]

    @property
    def evaluations(self) -> int:
        return len(self.cache)


@dataclass(frozen=True)
class ShapleyResult:
    values: dict  # party -> value
    method: str  # "exact" | "wtdp"
    samples_used: int
    truncation_tolerance: float
    party_weights: dict

    def efficiency_residual(self, v_grand: float, v_empty: float) -> float:
        return abs(sum(self.values.values()) - (v_grand - v_empty))


def exact_shapley(fn: CoalitionValueFn) -> ShapleyResult:
    """phi_i = sum over S excluding i of |S|!(n-|S|-1)!/n! * marginal."""
    n = len(fn.parties)
    if n > 10:
        raise SizeError(f"{n} parties: enumeration capped at 10, use wtdp_shapley")
    values = {p: 0.0 for p in fn.parties}
    fact = math.factorial
    denom = fact(n)
    others = {p: [q for q in fn.parties if q != p] for p in fn.parties}
    for p in fn.parties:
        for k in range(n):
            coeff = fact(k) * fact(n - k - 1) / denom
            for subset in itertools.combinations(others[p], k):
                s = frozenset(subset)
                values[p] += coeff * (fn(s | {p}) - fn(s))
    return ShapleyResult(values=values, method="exact", samples_used=0,
                         truncation_tolerance=0.0,
                         party_weights={p: 1.0 for p in fn.parties})


def wtdp_shapley(fn: CoalitionValueFn, weights: dict, budget: int,
                 tolerance: float, seed: int) -> ShapleyResult:
    """Weighted-truncated permutation sampling.

    Walks seeded random permutations accumulating marginals; a walk stops
    early once the prefix value is within ``tolerance`` of the grand value
    (remaining marginals credited zero). Per-party means are scaled by the
    given weights, then renormalized so the values sum to
    v(grand) - v(empty).
    """
    if budget < 1:
        raise SamplingError("budget must be >= 1")
    for p, w in weights.items():
        if w <= 0:
            raise SamplingError(f"weight for {p!r} must be positive")
    parties = list(fn.parties)
    v_grand = fn(frozenset(parties))
    v_empty = fn(frozenset())
    rng = SplitMix64(seed)
    sums = {p: 0.0 for p in parties}
    completed = 0
    for _ in range(budget):
        perm = list(parties)
        rng.shuffle(perm)
        prefix: set = set()
        v_prev = v_empty
        for p in perm:
            if abs(v_prev - v_grand) < tolerance:
                break  # truncated: rest credited zero
            prefix.add(p)
            v_cur = fn(frozenset(prefix))
            sums[p] += v_cur - v_prev
            v_prev = v_cur
        completed += 1
    if completed == 0:
        raise SamplingError("no permutation samples completed")
    raw = {p: weights.get(p, 1.0) * sums[p] / completed for p in parties}
    total = sum(raw.values())
    target = v_grand - v_empty
    if total != 0.0:
        values = {p: v * target / total for p, v in raw.items()}
    else:
        values = {p: target / len(parties) for p in parties}
    return ShapleyResult(values=values, method="wtdp", samples_used=completed,
                         truncation_tolerance=tolerance,
                         party_weights=dict(weights))


def block_mask_attribution(snapshot: ModelSnapshot, baseline: ModelSnapshot,
                           eval_fn, blocks: list[str]) -> dict:
    """Metric drop when each block's delta is reverted to the baseline."""
    cur = snapshot_blocks(snapshot)
    base = snapshot_blocks(baseline)
    if set(cur) != set(base):
        raise IdentityError("snapshot and baseline have different block structure")
    for name in cur:
        if cur[name].shape != base[name].shape:
            raise IdentityError(f"block {name!r} shape differs from baseline")
    full = eval_fn(snapshot)
    out = {}
    for name in blocks:
        masked = dict(cur)
        masked[name] = base[name]
        masked_snap = apply_block_mask(masked, snapshot)
        out[name] = full - eval_fn(masked_snap)
    return out


@dataclass(frozen=True)
class LoggedRound:
    """One round's recorded inputs, sufficient for coalition replay."""

    round: int
    plan: AggregationPlan
    updates: tuple  # ClientUpdate per contributing party


def replay_coalition(initial: ModelSnapshot, rounds: list[LoggedRound],
                     coalition: frozenset) -> ModelSnapshot:
    """Re-aggregate only the coalition's logged updates, round by round."""
    model = initial
    for rec in rounds:
        subset = [u for u in rec.updates if u.client_id in coalition]
        if not subset:
            continue
        # rebase logged deltas onto the replayed model's version
        rebased = [ClientUpdateRebased(u, model.version) for u in subset]
        delta = fedavg_adapters(rebased, rec.plan)
        base = snapshot_blocks(model)
        model = apply_block_mask({n: base[n] + d for n, d in delta.items()}, model)
    return model


class ClientUpdateRebased:
    """View of a logged update with its base version mapped to the replay."""

    def __init__(self, update, version: int):
        self.client_id = update.client_id
        self.base_version = version
        self.deltas = update.deltas
        self.sample_count = update.sample_count
        self.submitted_round = update.submitted_round


def fl_value_function(initial: ModelSnapshot, rounds: list[LoggedRound],
                      eval_set, parties: list[str]) -> CoalitionValueFn:
    """Coalition value = recall@1 of the coalition-replayed model."""
    if any(not rec.updates for rec in rounds):
        raise HistoryError("round log has a round with no recorded updates")

    def evaluate(coalition: frozenset) -> float:
        model = replay_coalition(initial, rounds, coalition)
        return recall_at_k(model, eval_set, 1)

    return CoalitionValueFn(parties=list(parties), evaluate=evaluate)
