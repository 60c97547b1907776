"""Self-contained oracle and property suites behind ``crrec verify``.

Each suite returns a list of :class:`Check` results; a suite passes when
every check does.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import PAD, Catalog, InteractionRecord, RewardSpec, build_transitions
from .metrics import build_all_pool, build_rand_pool, hr_at_k, ndcg_at_k, rank_of
from .networks import Block, PolicyNetwork, ValueNetwork
from .oracle import exact_advantage, exact_policy_eval, bellman_residual, random_mdp
from .substrate import cross_entropy, finite_diff_check, float64_mode

GRAD_TOL = 1e-4
FD_EPS = 1e-5


@dataclass
class Check:
    name: str
    ok: bool
    value: float
    tolerance: float
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.ok else "FAIL"
        return f"{tag}  {self.name}: {self.value:.3g} (tol {self.tolerance:g}, {self.seconds:.1f}s)"


def _timed(name, fn, tol, compare="le"):
    t0 = time.perf_counter()
    value = float(fn())
    ok = value <= tol if compare == "le" else value >= tol
    return Check(name, ok, value, tol, time.perf_counter() - t0)


# --------------------------------------------------------------------------- gradients

def _gradient_cases(seed=0):
    g = torch.Generator().manual_seed(seed)
    B, T, d, I = 3, 4, 6, 7
    states = torch.randint(0, I + 1, (B, T), generator=g)
    states[0, :2] = PAD
    actions = torch.randint(1, I + 1, (B,), generator=g)

    def case_embedding():
        emb = nn.Embedding(I + 1, d)
        w = torch.randn(d, generator=g, dtype=torch.float64)
        return (lambda: torch.tanh(emb(states) @ w).sum()), [emb.weight]

    def case_dense():
        lin = nn.Linear(d, 5)
        x = torch.randn(B, d, generator=g, dtype=torch.float64)
        return (lambda: torch.sin(lin(x)).sum()), list(lin.parameters())

    def case_attention_block():
        torch.manual_seed(seed)
        blk = Block(d, 2)
        x = torch.randn(B, T, d, generator=g, dtype=torch.float64, requires_grad=True)
        w = torch.randn(B, T, d, generator=g, dtype=torch.float64)
        return (lambda: (blk(x) * w).sum()), list(blk.parameters()) + [x]

    def case_recurrent_cell():
        torch.manual_seed(seed)
        cell = nn.LSTM(d, 5, num_layers=1, batch_first=True)
        x = torch.randn(B, T, d, generator=g, dtype=torch.float64, requires_grad=True)
        w = torch.randn(B, T, 5, generator=g, dtype=torch.float64)
        return (lambda: (cell(x)[0] * w).sum()), list(cell.parameters()) + [x]

    def case_softmax_xent():
        logits = torch.randn(B, I, generator=g, dtype=torch.float64, requires_grad=True)
        wts = torch.rand(B, generator=g, dtype=torch.float64)
        return (lambda: cross_entropy(logits, actions - 1, weights=wts)), [logits]

    def case_policy():
        torch.manual_seed(seed)
        pol = PolicyNetwork(I, T, dim=d, n_blocks=1, n_heads=2, head_init_std=0.3)
        return (lambda: cross_entropy(pol(states), actions - 1)), list(pol.parameters())

    def case_critic():
        torch.manual_seed(seed)
        cr = ValueNetwork(I, T, dim=d, hidden=5, n_layers=1)
        y = torch.randn(B, generator=g, dtype=torch.float64)
        return (lambda: ((cr(states, actions) - y) ** 2).mean()), \
            [p for p in cr.parameters() if p.requires_grad]

    return {
        "embedding": case_embedding,
        "dense": case_dense,
        "attention_block": case_attention_block,
        "recurrent_cell": case_recurrent_cell,
        "softmax_cross_entropy": case_softmax_xent,
        "policy_1block": case_policy,
        "critic_1layer": case_critic,
    }


def gradient_suite(seed=0) -> list[Check]:
    """Central-difference checks in float64 for every layer type and both networks."""
    checks = []
    with float64_mode():
        for name, build in _gradient_cases(seed).items():
            fn, params = build()
            checks.append(_timed(f"grad/{name}", lambda: finite_diff_check(fn, params, FD_EPS), GRAD_TOL))
    return checks


# --------------------------------------------------------------------------- metrics

def _reference_rank(scores, pool, true_item):
    """Full sort by (score desc, id asc)."""
    order = sorted(pool, key=lambda i: (-scores[i - 1], i))
    return order.index(true_item) + 1


def _reference_metrics(rank, k):
    hr = 1.0 if rank <= k else 0.0
    return hr, (1.0 / np.log2(rank + 1) if rank <= k else 0.0)


def metric_suite(n_instances=1000, seed=0, k=10) -> list[Check]:
    """Compare HR/NDCG to a brute-force sort; check NDCG <= HR and rand >= all per instance."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    mismatch = 0
    ndcg_gt_hr = 0
    rand_lt_all = 0
    for _ in range(n_instances):
        n_items = int(rng.integers(2, 400))
        # coarse integer scores force plenty of ties
        scores = rng.integers(0, int(rng.integers(1, 20)), size=n_items).astype(np.float64)
        true = int(rng.integers(1, n_items + 1))
        seen = rng.choice(np.arange(1, n_items + 1), size=int(rng.integers(0, n_items)), replace=False)
        unrated = np.setdiff1d(np.arange(1, n_items + 1), np.append(seen, true))
        all_pool = build_all_pool(unrated, true)
        rand_pool = build_rand_pool(unrated, true, rng)
        r_all = rank_of(scores, all_pool.items, true)
        r_rand = rank_of(scores, rand_pool.items, true)
        for r, pool in ((r_all, all_pool), (r_rand, rand_pool)):
            ref = _reference_rank(scores, list(pool.items), true)
            hr, nd = hr_at_k([r], k), ndcg_at_k([r], k)
            ref_hr, ref_nd = _reference_metrics(ref, k)
            if r != ref or hr != ref_hr or nd != ref_nd:
                mismatch += 1
            if nd > hr:
                ndcg_gt_hr += 1
        if hr_at_k([r_rand], k) < hr_at_k([r_all], k) or ndcg_at_k([r_rand], k) < ndcg_at_k([r_all], k):
            rand_lt_all += 1
    dt = time.perf_counter() - t0
    return [
        Check(f"metrics/brute_force_mismatches[{n_instances}]", mismatch == 0, mismatch, 0, dt),
        Check("metrics/ndcg_exceeds_hr", ndcg_gt_hr == 0, ndcg_gt_hr, 0, 0.0),
        Check("metrics/rand_below_all", rand_lt_all == 0, rand_lt_all, 0, 0.0),
    ]


# --------------------------------------------------------------------------- transitions

def _random_stream(rng, n_items, window):
    n_actors = int(rng.integers(1, 6))
    records = []
    for actor in range(n_actors):
        t = int(rng.integers(0, 1000))
        for _ in range(int(rng.integers(1, 3 * window + 3))):
            records.append(InteractionRecord(f"u{actor}", str(int(rng.integers(1, n_items + 1))),
                                             float(rng.choice(np.arange(1, 11) / 2)), t))
            t += int(rng.integers(1, 5))
    rng.shuffle(records)
    return records


def transition_suite(n_cases=100_000, seed=0) -> list[Check]:
    """Window length, positive-append, zero-reward fixpoint and replay self-consistency.

    Every emitted transition counts as one case; streams are generated until
    ``n_cases`` transitions have been checked.
    """
    rng = np.random.default_rng(seed)
    spec = RewardSpec("rating", 3.5)
    t0 = time.perf_counter()
    cases = 0
    violations = {"window_length": 0, "positive_append": 0, "zero_reward_fixpoint": 0,
                  "replay": 0, "zero_reward_in_state": 0}
    while cases < n_cases:
        window = int(rng.integers(1, 8))
        n_items = int(rng.integers(1, 30))
        records = _random_stream(rng, n_items, window)
        catalog = Catalog([str(i) for i in range(1, n_items + 1)])
        ts = build_transitions(records, catalog, window, spec)
        zero_items = {}
        replay = {}
        for j in range(len(ts)):
            s, a, r, s2 = ts.states[j], int(ts.actions[j]), ts.rewards[j], ts.next_states[j]
            actor = ts.actors[j]
            if len(s) != window or len(s2) != window:
                violations["window_length"] += 1
            if r > 0:
                if list(s2) != list(s[1:]) + [a]:
                    violations["positive_append"] += 1
            elif not np.array_equal(s, s2):
                violations["zero_reward_fixpoint"] += 1
            # replay the action/reward stream from the all-PAD window
            win = replay.get(actor, [PAD] * window)
            if list(s) != win:
                violations["replay"] += 1
            replay[actor] = win[1:] + [a] if r > 0 else win
            # an item only rated poorly so far can never sit in the window
            if r == 0:
                zero_items.setdefault(actor, set()).add(a)
            cases += 1
        # positivity filter: window entries must all come from positive actions
        pos_items = {}
        for j in range(len(ts)):
            if ts.rewards[j] > 0:
                pos_items.setdefault(ts.actors[j], set()).add(int(ts.actions[j]))
        for j in range(len(ts)):
            real = set(int(x) for x in ts.next_states[j] if x != PAD)
            if not real <= pos_items.get(ts.actors[j], set()):
                violations["zero_reward_in_state"] += 1
    dt = time.perf_counter() - t0
    return [Check(f"transitions/{k}[{cases}]", v == 0, v, 0, dt if k == "replay" else 0.0)
            for k, v in violations.items()]


# --------------------------------------------------------------------------- tabular

def tabular_suite(n_mdps=100, seed=0, n_states=5, n_actions=4, gamma=0.9) -> list[Check]:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst_res = 0.0
    worst_adv = 0.0
    for _ in range(n_mdps):
        mdp = random_mdp(n_states, n_actions, gamma, rng)
        pi = rng.dirichlet(np.ones(n_actions), size=n_states)
        pi /= pi.sum(axis=1, keepdims=True)
        V = exact_policy_eval(mdp, pi)
        worst_res = max(worst_res, bellman_residual(mdp, pi, V))
        A = exact_advantage(mdp, pi)
        worst_adv = max(worst_adv, float(np.max(np.abs((pi * A).sum(axis=1)))))
    dt = time.perf_counter() - t0
    return [
        Check(f"tabular/bellman_residual[{n_mdps}]", worst_res <= 1e-10, worst_res, 1e-10, dt),
        Check(f"tabular/advantage_mean_zero[{n_mdps}]", worst_adv <= 1e-10, worst_adv, 1e-10, 0.0),
    ]


SUITES = {
    "gradients": gradient_suite,
    "metrics": metric_suite,
    "transitions": transition_suite,
    "tabular": tabular_suite,
}


def run_suite(name: str) -> list[Check]:
    return SUITES[name]()
