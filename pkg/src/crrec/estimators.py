"""scikit-learn style wrappers around the two training stages.

``InteractionEncoder`` turns raw interaction records into a split
:class:`~crrec.data.Dataset`; ``NextItemRecommender`` is stage one and
``CRRRecommender`` stage two. Both recommenders consume a ``Dataset`` (or
a bare ``TransitionSet``) in ``fit`` and ``(n, window)`` state arrays in
``predict``/``predict_proba``/``decision_function``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .crr import CrrConfig, CrrTrainer, make_critic
from .data import (Catalog, Dataset, History, InteractionRecord, RewardSpec, SplitSpec,
                   dedupe_simultaneous, ingest, parse_log)
from .errors import ConfigError, DataError
from .metrics import evaluate_policy, score_states
from .networks import PolicyNetwork, load_network
from .pretrain import PretrainConfig, pretrain
from .validation import check_k, check_states, check_transitions


def _records(X) -> list[InteractionRecord]:
    if isinstance(X, (str, Path)):
        return parse_log(X)
    records = list(X)
    if not records or not all(isinstance(r, InteractionRecord) for r in records):
        raise DataError("expected a non-empty sequence of InteractionRecord or a CSV path")
    return records


class InteractionEncoder(TransformerMixin, BaseEstimator):
    """Raw records -> deduplicated, chronologically split transitions.

    ``fit`` learns the item catalog; ``transform`` builds the dataset with
    that catalog, so items unseen during ``fit`` are rejected.
    """

    def __init__(self, window=30, reward_scheme="auto", threshold=3.5, click_reward=1.0,
                 purchase_reward=3.0, split=(0.99, 0.002, 0.008), emit_cold_start=True):
        self.window = window
        self.reward_scheme = reward_scheme
        self.threshold = threshold
        self.click_reward = click_reward
        self.purchase_reward = purchase_reward
        self.split = split
        self.emit_cold_start = emit_cold_start

    def fit(self, X, y=None):
        records = dedupe_simultaneous(_records(X))
        self.schema_ = "sessions" if isinstance(records[0].feedback, str) else "ratings"
        self.catalog_ = Catalog.from_records(records)
        self.n_items_ = len(self.catalog_)
        return self

    def _reward_spec(self):
        scheme = self.reward_scheme
        if scheme == "auto":
            scheme = "event" if self.schema_ == "sessions" else "rating"
        return RewardSpec(scheme, self.threshold,
                          {"purchase": self.purchase_reward, "click": self.click_reward})

    def transform(self, X) -> Dataset:
        check_is_fitted(self, "catalog_")
        if self.window < 1:
            raise ConfigError("must be >= 1", field="window")
        return ingest(_records(X), self.window, self._reward_spec(), SplitSpec(*self.split),
                      self.emit_cold_start, catalog=self.catalog_)


class _PolicyScorer:
    """predict / predict_proba / decision_function / score on top of ``policy_``."""

    def decision_function(self, states) -> np.ndarray:
        check_is_fitted(self, "policy_")
        return score_states(self.policy_, check_states(states, self.window_, self.n_items_))

    def predict_proba(self, states) -> np.ndarray:
        logits = self.decision_function(states)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, states, k=10) -> np.ndarray:
        """Top-``k`` item ids per state, best first; ties go to the smaller id."""
        check_is_fitted(self, "policy_")
        k = check_k(k, self.n_items_)
        logits = self.decision_function(states)
        ids = np.arange(1, self.n_items_ + 1)
        order = np.lexsort((np.broadcast_to(ids, logits.shape), -logits), axis=1)
        return ids[order[:, :k]]

    def score(self, X, y=None, history: History | None = None) -> float:
        """HR@10 over the all-unrated pool on the positive samples of ``X``.

        A ``Dataset`` is scored on its test split with its full history.
        """
        check_is_fitted(self, "policy_")
        if isinstance(X, Dataset):
            history, X = X.history(), X.test
        check_transitions(X)
        return evaluate_policy(self.policy_, X, history, pools=("all",)).hr10


class NextItemRecommender(_PolicyScorer, BaseEstimator):
    """Stage one: causal transformer trained by next-item cross-entropy."""

    def __init__(self, dim=64, n_blocks=2, n_heads=4, head_layers=1, dropout=0.0, lr=1e-4,
                 batch_size=128, epochs=30, schedule="constant", random_state=0):
        self.dim = dim
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.head_layers = head_layers
        self.dropout = dropout
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.schedule = schedule
        self.random_state = random_state

    def fit(self, X, y=None, valid=None, n_items=None):
        train, ds_valid, ds = check_transitions(X)
        valid = valid if valid is not None else ds_valid
        n_items = n_items or (ds.n_items if ds is not None else int(train.actions.max()))
        config = PretrainConfig(self.lr, self.batch_size, self.epochs, self.dropout, self.schedule,
                                self.random_state)
        torch.manual_seed(self.random_state)
        policy = PolicyNetwork(n_items, train.window, self.dim, self.n_blocks, self.n_heads,
                               self.dropout, self.head_layers)
        history = ds.history() if ds is not None else None
        res = pretrain(policy, train, valid, config, history)
        self.policy_ = res.policy
        self.n_items_, self.window_ = n_items, train.window
        self.best_epoch_, self.best_score_, self.curve_ = res.best_epoch, res.best_hr10, res.curve
        return self


class CRRRecommender(_PolicyScorer, BaseEstimator):
    """Stage two: Critic Regularized Regression.

    ``init`` may be a fitted :class:`NextItemRecommender`, a policy
    module, a policy checkpoint path, or ``None`` for random
    initialisation (the architecture then comes from ``dim``/``n_blocks``/
    ``n_heads``/``head_layers``).
    """

    def __init__(self, init=None, gamma=0.6, filter="exponential", beta=1.0, clip=20.0, m=4,
                 m_target=4, tau=0.01, batch_size=128, iterations=5000, eval_every=1000, lr=1e-4,
                 schedule="cosine", dropout=None, critic_hidden=256, critic_layers=2,
                 critic_head_layers=2, dim=64, n_blocks=2, n_heads=4, head_layers=1, random_state=0):
        self.init = init
        self.gamma = gamma
        self.filter = filter
        self.beta = beta
        self.clip = clip
        self.m = m
        self.m_target = m_target
        self.tau = tau
        self.batch_size = batch_size
        self.iterations = iterations
        self.eval_every = eval_every
        self.lr = lr
        self.schedule = schedule
        self.dropout = dropout
        self.critic_hidden = critic_hidden
        self.critic_layers = critic_layers
        self.critic_head_layers = critic_head_layers
        self.dim = dim
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.head_layers = head_layers
        self.random_state = random_state

    def _initial_policy(self, n_items, window):
        init = self.init
        if init is None:
            torch.manual_seed(self.random_state)
            return PolicyNetwork(n_items, window, self.dim, self.n_blocks, self.n_heads, 0.0,
                                 self.head_layers)
        if isinstance(init, NextItemRecommender):
            check_is_fitted(init, "policy_")
            init = init.policy_
        elif isinstance(init, (str, Path)):
            init, _ = load_network(init)
        if not isinstance(init, torch.nn.Module):
            raise ConfigError(f"unsupported init {type(init).__name__}", field="init")
        if init.n_items != n_items or init.window != window:
            raise DataError(f"init policy is for {init.n_items} items / window {init.window}")
        # never train the caller's module in place
        policy = type(init)(**init.arch).to(next(init.parameters()).dtype)
        policy.load_state_dict(init.state_dict())
        return policy

    def fit(self, X, y=None, valid=None, n_items=None):
        train, ds_valid, ds = check_transitions(X)
        valid = valid if valid is not None else ds_valid
        n_items = n_items or (ds.n_items if ds is not None else int(train.actions.max()))
        config = CrrConfig(self.gamma, self.filter, self.beta, self.clip, self.m, self.m_target,
                           self.tau, self.batch_size, self.iterations, self.eval_every, self.lr,
                           self.schedule, self.dropout, self.random_state)
        policy = self._initial_policy(n_items, train.window)
        critic = make_critic(policy, self.critic_hidden, self.critic_layers, self.critic_head_layers,
                             0.0, self.random_state)
        history = ds.history() if ds is not None else None
        trainer = CrrTrainer(policy, critic, train, config, valid, history)
        res = trainer.train()
        self.policy_ = res.policy
        self.critic_ = trainer.critic.online
        self.n_items_, self.window_ = n_items, train.window
        self.best_iteration_, self.best_score_, self.curve_ = res.best_iteration, res.best_hr10, res.curve
        self.skipped_actor_steps_ = res.skipped_actor_steps
        return self
