"""HR@K and NDCG@K under the random-100 and all-unrated candidate pools."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import History, TransitionSet
from .errors import UndefinedMetricError

RAND_POOL_SIZE = 100


@dataclass
class CandidatePool:
    kind: str
    items: np.ndarray
    true_item: int
    shrunk: bool = False


def rank_of(scores: np.ndarray, pool: np.ndarray, true_item: int) -> int:
    """1-based rank of ``true_item`` in ``pool``; ties go to the smaller id.

    ``scores[i - 1]`` is the score of item ``i``.
    """
    pool = np.asarray(pool)
    others = pool[pool != true_item]
    s_true = scores[true_item - 1]
    s = scores[others - 1]
    return 1 + int(np.count_nonzero((s > s_true) | ((s == s_true) & (others < true_item))))


def top_k(scores: np.ndarray, pool: Iterable[int], k: int = 10) -> list[int]:
    """Highest-scoring ``k`` pool items, descending, ties by ascending id."""
    pool = np.asarray(sorted(set(int(i) for i in pool)), dtype=np.int64)
    if pool.size == 0:
        raise ValueError("empty candidate pool")
    order = np.lexsort((pool, -scores[pool - 1]))
    return [int(i) for i in pool[order[:k]]]


def _check(ranks):
    ranks = np.asarray(list(ranks), dtype=np.float64)
    if ranks.size == 0:
        raise UndefinedMetricError("no positive-target samples (n+ = 0)")
    return ranks


def hr_at_k(ranks: Iterable[int], k: int = 10) -> float:
    ranks = _check(ranks)
    return float(np.mean(ranks <= k))


def ndcg_at_k(ranks: Iterable[int], k: int = 10) -> float:
    ranks = _check(ranks)
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(np.mean(gains))


def build_rand_pool(unrated: Iterable[int], true_item: int, rng: np.random.Generator,
                    size: int = RAND_POOL_SIZE) -> CandidatePool:
    """``size`` unrated items drawn without replacement, plus the true item."""
    cand = np.asarray(sorted(set(int(i) for i in unrated) - {int(true_item)}), dtype=np.int64)
    shrunk = cand.size < size
    picked = cand if shrunk else rng.choice(cand, size=size, replace=False)
    return CandidatePool("rand", np.append(np.sort(picked), true_item), int(true_item), shrunk)


def build_all_pool(unrated: Iterable[int], true_item: int) -> CandidatePool:
    items = np.asarray(sorted(set(int(i) for i in unrated) | {int(true_item)}), dtype=np.int64)
    return CandidatePool("all", items, int(true_item))


@dataclass
class MetricReport:
    n_pos: int
    k: int = 10
    hr10: float | None = None
    ndcg10: float | None = None
    hr10_rand: float | None = None
    ndcg10_rand: float | None = None
    shrunk_pools: int = 0
    by_event: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["by_event"] = {k: v.to_dict() for k, v in self.by_event.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def score_states(policy, states: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Policy logits for each window, as float64 numpy (dropout disabled)."""
    was_training = policy.training
    policy.eval()
    out = []
    try:
        with torch.no_grad():
            for i in range(0, len(states), batch_size):
                out.append(policy(torch.from_numpy(np.ascontiguousarray(states[i:i + batch_size]))).double().numpy())
    finally:
        policy.train(was_training)
    n_items = getattr(policy, "n_items", 0)
    return np.concatenate(out) if out else np.zeros((0, n_items))


def sample_ranks(scores: np.ndarray, eval_set: TransitionSet, history: History,
                 pools: Sequence[str] = ("all", "rand"), seed: int = 0):
    """Per-sample rank of the true item in each requested pool.

    The rand pool for sample ``j`` is drawn from a generator seeded by
    ``(seed, j)`` so results do not depend on evaluation order.
    """
    n_items = scores.shape[1]
    rank_all = np.zeros(len(eval_set), dtype=np.int64)
    rank_rand = np.zeros(len(eval_set), dtype=np.int64)
    shrunk = np.zeros(len(eval_set), dtype=bool)
    all_ids = np.arange(1, n_items + 1)
    for j in range(len(eval_set)):
        true = int(eval_set.actions[j])
        seen = history.seen_before(eval_set.actors[j], eval_set.timestamps[j])
        mask = np.ones(n_items + 1, dtype=bool)
        mask[0] = False
        mask[seen] = False
        mask[true] = True
        if "all" in pools:
            rank_all[j] = rank_of(scores[j], all_ids[mask[1:]], true)
        if "rand" in pools:
            mask[true] = False
            pool = build_rand_pool(all_ids[mask[1:]], true, np.random.default_rng([seed, j]))
            rank_rand[j] = rank_of(scores[j], pool.items, true)
            shrunk[j] = pool.shrunk
    return rank_all, rank_rand, shrunk


def _report(rank_all, rank_rand, shrunk, pools, k) -> MetricReport:
    rep = MetricReport(n_pos=len(rank_all), k=k, shrunk_pools=int(shrunk.sum()))
    if "all" in pools:
        rep.hr10, rep.ndcg10 = hr_at_k(rank_all, k), ndcg_at_k(rank_all, k)
    if "rand" in pools:
        rep.hr10_rand, rep.ndcg10_rand = hr_at_k(rank_rand, k), ndcg_at_k(rank_rand, k)
    return rep


def evaluate_policy(policy, eval_set: TransitionSet, history: History | None = None,
                    pools: Sequence[str] = ("all", "rand"), seed: int = 0, k: int = 10,
                    scores: np.ndarray | None = None, return_ranks: bool = False):
    """Evaluate on the positive-reward samples of ``eval_set``.

    ``policy`` may be a network or any callable mapping a ``(n, window)``
    state array to ``(n, I)`` scores. When events are present, click-only
    and purchase-only sub-reports are attached.
    """
    pos = eval_set.positive()
    if history is None:
        history = History([eval_set])
    if scores is None:
        scores = score_states(policy, pos.states) if isinstance(policy, torch.nn.Module) else np.asarray(policy(pos.states))
    rank_all, rank_rand, shrunk = sample_ranks(scores, pos, history, pools, seed)
    rep = _report(rank_all, rank_rand, shrunk, pools, k)
    for ev in sorted(set(pos.events) - {""}):
        sel = pos.events == ev
        rep.by_event[ev] = _report(rank_all[sel], rank_rand[sel], shrunk[sel], pools, k)
    if return_ranks:
        return rep, (pos, rank_all, rank_rand)
    return rep


def write_sample_csv(path, pos: TransitionSet, rank_all, rank_rand) -> None:
    with open(path, "w") as fh:
        fh.write("sample_id,event,rank_all,rank_rand\n")
        for j in range(len(pos)):
            fh.write(f"{j},{pos.events[j]},{int(rank_all[j])},{int(rank_rand[j])}\n")


def validation_hr(policy, valid: TransitionSet, history: History, k: int = 10) -> tuple[float, float]:
    """(HR@K, NDCG@K) over the all-unrated pool; used for checkpoint selection."""
    rep = evaluate_policy(policy, valid, history, pools=("all",), k=k)
    return rep.hr10, rep.ndcg10
