"""Ground truth: exact tabular MDP solvers and planted-structure logs.

Tabular states and actions enter the neural pipeline as item tokens:
state ``s`` is the length-1 window ``[s + 1]`` and action ``a`` is item
``a + 1``, over a catalog of ``max(S, A)`` items.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .data import InteractionRecord, TransitionSet
from .errors import ConfigError, NumericError


@dataclass
class TabularMdp:
    P: np.ndarray  # (S, A, S)
    r: np.ndarray  # (S, A)
    gamma: float
    mu0: np.ndarray | None = None

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        S, A, S2 = self.P.shape
        if S != S2 or self.r.shape != (S, A):
            raise ConfigError(f"inconsistent shapes P{self.P.shape} r{self.r.shape}", field="mdp")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=2) - 1)) > 1e-12:
            raise ConfigError("transition rows must be distributions", field="mdp.P")
        if not np.all(np.isfinite(self.r)):
            raise ConfigError("rewards must be finite", field="mdp.r")
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must be in [0, 1)", field="mdp.gamma")
        self.mu0 = np.full(S, 1.0 / S) if self.mu0 is None else np.asarray(self.mu0, dtype=np.float64)

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def to_json(self) -> str:
        return json.dumps({"P": self.P.tolist(), "r": self.r.tolist(), "gamma": self.gamma,
                           "mu0": self.mu0.tolist()}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        d = json.loads(text)
        return cls(np.array(d["P"]), np.array(d["r"]), float(d["gamma"]), np.array(d["mu0"]))


def random_mdp(n_states, n_actions, gamma, rng, reward_scale=1.0, concentration=1.0) -> TabularMdp:
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    P /= P.sum(axis=2, keepdims=True)
    r = rng.uniform(0, reward_scale, size=(n_states, n_actions))
    return TabularMdp(P, r, gamma)


def _check_policy(mdp, pi):
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (mdp.n_states, mdp.n_actions) or np.max(np.abs(pi.sum(axis=1) - 1)) > 1e-12 or np.any(pi < 0):
        raise ConfigError("policy rows must be distributions over actions", field="policy")
    return pi


def exact_policy_eval(mdp: TabularMdp, pi) -> np.ndarray:
    """Solve ``(I - gamma P_pi) V = r_pi`` directly."""
    pi = _check_policy(mdp, pi)
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    r_pi = (pi * mdp.r).sum(axis=1)
    try:
        return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)
    except np.linalg.LinAlgError as exc:
        raise NumericError(str(exc), op="exact_policy_eval") from exc


def exact_q(mdp: TabularMdp, pi) -> np.ndarray:
    V = exact_policy_eval(mdp, pi)
    return mdp.r + mdp.gamma * mdp.P @ V


def exact_advantage(mdp: TabularMdp, pi) -> np.ndarray:
    V = exact_policy_eval(mdp, pi)
    return mdp.r + mdp.gamma * mdp.P @ V - V[:, None]


def bellman_residual(mdp: TabularMdp, pi, V) -> float:
    pi = _check_policy(mdp, pi)
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    r_pi = (pi * mdp.r).sum(axis=1)
    return float(np.max(np.abs(V - (r_pi + mdp.gamma * P_pi @ V))))


def q_bellman_residual(mdp: TabularMdp, pi, Q) -> float:
    """``max |Q - (r + gamma P^pi Q)|`` for an arbitrary Q table."""
    pi = _check_policy(mdp, pi)
    v_next = (pi * Q).sum(axis=1)
    return float(np.max(np.abs(Q - (mdp.r + mdp.gamma * mdp.P @ v_next))))


def expected_return(mdp: TabularMdp, pi) -> float:
    return float(mdp.mu0 @ exact_policy_eval(mdp, pi))


def optimal_policy(mdp: TabularMdp, max_iter=1000) -> np.ndarray:
    """Deterministic optimal policy (one-hot rows) by policy iteration."""
    pi = np.zeros((mdp.n_states, mdp.n_actions))
    pi[:, 0] = 1.0
    for _ in range(max_iter):
        greedy = exact_q(mdp, pi).argmax(axis=1)
        new = np.eye(mdp.n_actions)[greedy]
        if np.array_equal(new, pi):
            return pi
        pi = new
    return pi


def epsilon_greedy(pi_det, eps) -> np.ndarray:
    pi_det = np.asarray(pi_det, dtype=np.float64)
    return (1 - eps) * pi_det + eps / pi_det.shape[1]


def generate_logged_data(mdp: TabularMdp, behavior, n_episodes, horizon, rng,
                         truncation_terminal=True) -> TransitionSet:
    """Roll out i.i.d. episodes from ``mu0`` under ``behavior``.

    The last step of each episode is flagged terminal unless
    ``truncation_terminal`` is false (horizon cut of a continuing task).
    """
    behavior = _check_policy(mdp, behavior)
    S, A = mdp.n_states, mdp.n_actions
    n = n_episodes * horizon
    states = np.empty(n, dtype=np.int64)
    actions = np.empty(n, dtype=np.int64)
    nexts = np.empty(n, dtype=np.int64)
    cum_pi = np.cumsum(behavior, axis=1)
    cum_P = np.cumsum(mdp.P, axis=2)
    k = 0
    for _ in range(n_episodes):
        s = int(rng.choice(S, p=mdp.mu0))
        for _ in range(horizon):
            a = min(int(np.searchsorted(cum_pi[s], rng.random(), side="right")), A - 1)
            s2 = min(int(np.searchsorted(cum_P[s, a], rng.random(), side="right")), S - 1)
            states[k], actions[k], nexts[k] = s, a, s2
            s = s2
            k += 1
    terminal = np.zeros(n, dtype=bool)
    if truncation_terminal:
        terminal[horizon - 1::horizon] = True
    episode = np.repeat(np.arange(n_episodes), horizon).astype(str)
    step = np.tile(np.arange(horizon), n_episodes)
    return TransitionSet((states + 1)[:, None], actions + 1, mdp.r[states, actions],
                         (nexts + 1)[:, None], terminal, None, episode, step)


def tabular_n_items(mdp: TabularMdp) -> int:
    return max(mdp.n_states, mdp.n_actions)


def tabular_policy_from_network(policy, n_states, n_actions) -> np.ndarray:
    """Action distribution per state, renormalised over the real action items."""
    was = policy.training
    policy.eval()
    with torch.no_grad():
        states = torch.arange(1, n_states + 1).unsqueeze(1).expand(-1, policy.window)
        probs = torch.softmax(policy(states.contiguous()).double(), dim=1)[:, :n_actions].numpy()
    policy.train(was)
    return probs / probs.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------- sessions

@dataclass(frozen=True)
class AffineRule:
    """``next = (mult * (prev - 1) + shift) mod I + 1`` on 1-based item ids."""

    n_items: int
    mult: int = 7
    shift: int = 3

    def __call__(self, prev):
        return (self.mult * (np.asarray(prev) - 1) + self.shift) % self.n_items + 1


def generate_synthetic_sessions(rule: AffineRule, n_actors, session_length, noise, rng,
                                schema="sessions", purchase_prob=0.1, time_span=100_000):
    """Planted-rule interaction log.

    With probability ``1 - noise`` the next item is ``rule(previous positive
    item)``; otherwise it is uniform over the catalog. In the ratings schema
    rule-following items are rated 4-5 and noise items uniformly in
    0.5..5.0. Raw ids are the strings ``"1".."I"``.
    """
    if schema not in ("sessions", "ratings"):
        raise ConfigError(f"unknown schema {schema!r}", field="synth.schema")
    I = rule.n_items
    records = []
    for actor in range(n_actors):
        t = int(rng.integers(0, time_span))
        prev = int(rng.integers(1, I + 1))
        for step in range(session_length):
            if step == 0:
                item, follows = prev, False
            elif rng.random() < noise:
                item, follows = int(rng.integers(1, I + 1)), False
            else:
                item, follows = int(rule(prev)), True
            if schema == "sessions":
                feedback = "purchase" if rng.random() < purchase_prob else "click"
                positive = True
            else:
                feedback = float(rng.choice([4.0, 4.5, 5.0])) if follows or step == 0 else \
                    float(rng.choice(np.arange(1, 11) / 2))
                positive = feedback >= 3.5
            records.append(InteractionRecord(str(actor + 1), str(item), feedback, t))
            if positive:
                prev = item
            t += int(rng.integers(1, 61))
    return records


class RuleOracle:
    """Scores the rule's successor of the newest window item highest."""

    def __init__(self, rule: AffineRule):
        self.rule = rule
        self.n_items = rule.n_items

    def __call__(self, states):
        states = np.asarray(states)
        scores = np.zeros((len(states), self.n_items))
        last = states[:, -1]
        has = last > 0
        scores[np.nonzero(has)[0], self.rule(last[has]) - 1] = 1.0
        return scores
