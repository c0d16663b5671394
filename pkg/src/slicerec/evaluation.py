"""Ranking evaluation: sampled-negative protocol and HR@k / NDCG@k / MRR.

Each (user, ground-truth item) pair in the target slice is one case: the
positive is scored against 100 sampled negatives and its 1-indexed rank
feeds the metrics. Ties break pessimistically (a negative scoring equal to
the positive counts as ranked above it). Negatives are drawn uniformly,
with replacement, from the items the user did not touch in the target
slice; the draw is keyed by (seed, user, item, slice) so reports are
reproducible case by case.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import model as model_mod
from .dataset import InteractionLog, SliceSplit
from .errors import ContractError
from .rng import stream


@dataclass
class EvalReport:
    hr_at_k: float
    ndcg_at_k: float
    mrr: float
    k: int
    num_cases: int
    negatives_per_case: int
    seed: int

    def as_dict(self):
        return asdict(self)


def rank_from_scores(pos_score: float, neg_scores: np.ndarray) -> int:
    """1-indexed pessimistic rank of the positive among the candidates."""
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    return 1 + int(np.count_nonzero(neg_scores >= pos_score))


def rank_case(user, positive_item, negatives, states, params, config,
              allow_duplicates: bool = False) -> int:
    """Score 1 positive against its negatives and return the positive's rank."""
    negatives = np.asarray(negatives, dtype=np.intp)
    if np.any(negatives == positive_item):
        raise ContractError("negatives must exclude the positive item")
    if not allow_duplicates and np.unique(negatives).size != negatives.size:
        raise ContractError("duplicate candidates in the negative sample")
    items = np.concatenate([[positive_item], negatives])
    users = np.full(items.size, user, dtype=np.intp)
    scores = model_mod.predict(users, items, states, params, config).values.ravel()
    return rank_from_scores(scores[0], scores[1:])


def metrics(ranks, k: int, negatives_per_case: int = 100, seed: int = 0) -> EvalReport:
    """HR@k, NDCG@k (single relevant item), MRR over 1-indexed ranks."""
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise ContractError("metrics need at least one ranked case")
    if ranks.min() < 1:
        raise ContractError("ranks are 1-indexed")
    hit = ranks <= k
    hr = float(np.mean(hit))
    ndcg = float(np.mean(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)))
    mrr = float(np.mean(1.0 / ranks))
    return EvalReport(hr_at_k=hr, ndcg_at_k=ndcg, mrr=mrr, k=k,
                      num_cases=int(ranks.size), negatives_per_case=negatives_per_case,
                      seed=seed)


def _target_cases(log: InteractionLog, target_slice: int):
    mask = log.slices == target_slice
    pairs = np.unique(np.stack([log.users[mask], log.items[mask]], axis=1), axis=0)
    return pairs  # (cases, 2), one case per distinct (user, ground-truth item)


def sample_negatives(log: InteractionLog, user: int, target_slice: int,
                     count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws (with replacement) from items the user did not interact
    with in the target slice."""
    mask = (log.slices == target_slice) & (log.users == user)
    seen = np.unique(log.items[mask])
    allowed = np.setdiff1d(np.arange(log.num_items), seen, assume_unique=False)
    if allowed.size == 0:
        raise ContractError(f"user {user} interacted with every item in slice {target_slice}")
    return allowed[rng.integers(0, allowed.size, size=count)]


def evaluate(log: InteractionLog, split: SliceSplit, slice_graphs, params, config,
             target: str = "test", seed: int = 0, k: int = 10,
             negatives_per_case: int = 100) -> EvalReport:
    """Rank every target-slice case using only history strictly before it."""
    target_slice = split.test_slice if target == "test" else split.valid_slice
    states = model_mod.forward_all(slice_graphs, params, config, num_history=target_slice)
    cases = _target_cases(log, target_slice)
    if cases.shape[0] == 0:
        raise ContractError(f"no interactions in slice {target_slice} to evaluate")

    all_users = []
    all_items = []
    for user, item in cases:
        rng = stream(seed, "eval", int(user), int(item), target_slice)
        negs = sample_negatives(log, int(user), target_slice, negatives_per_case, rng)
        items = np.concatenate([[item], negs])
        all_users.append(np.full(items.size, user, dtype=np.intp))
        all_items.append(items)
    users_flat = np.concatenate(all_users)
    items_flat = np.concatenate(all_items)
    scores = model_mod.predict(users_flat, items_flat, states, params, config).values.ravel()

    width = negatives_per_case + 1
    ranks = np.empty(cases.shape[0], dtype=np.int64)
    for c in range(cases.shape[0]):
        block = scores[c * width:(c + 1) * width]
        ranks[c] = rank_from_scores(block[0], block[1:])
    return metrics(ranks, k, negatives_per_case=negatives_per_case, seed=seed)
