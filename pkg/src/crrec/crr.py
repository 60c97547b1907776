"""Stage two: Critic Regularized Regression with soft-updated target networks.

Each iteration samples a minibatch uniformly with replacement, estimates
advantages with the online actor and critic, takes one filtered
log-likelihood step on the actor, one TD step on the critic, then moves
both target networks toward their online counterparts.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import checkpoint
from .data import History, TransitionSet
from .errors import ConfigError, DataError, NumericError
from .metrics import validation_hr
from .networks import TargetPair, ValueNetwork, policy_sample, set_dropout
from .substrate import SCHEDULES, AdamState, adam_step, backward, cross_entropy

log = logging.getLogger(__name__)

FILTERS = ("exponential", "binary", "constant")
CURVE_FIELDS = ["iteration", "actor_loss", "critic_loss", "mean_filter_weight", "val_hr10", "val_ndcg10"]


@dataclass
class CrrConfig:
    gamma: float = 0.6
    filter: str = "exponential"
    beta: float = 1.0
    clip: float = 20.0
    m: int = 4
    m_target: int = 4
    tau: float = 0.01
    batch_size: int = 128
    iterations: int = 5000
    eval_every: int = 1000
    lr: float = 1e-4
    schedule: str = "cosine"
    dropout: float | None = None
    seed: int = 0

    def __post_init__(self):
        checks = [
            ("gamma", 0 <= self.gamma < 1, "must be in [0, 1)"),
            ("filter", self.filter in FILTERS, f"must be one of {FILTERS}"),
            ("beta", self.beta > 0, "must be > 0"),
            ("clip", self.clip > 0, "must be > 0"),
            ("m", self.m >= 1, "must be >= 1"),
            ("m_target", self.m_target >= 1, "must be >= 1"),
            ("tau", 0 < self.tau <= 1, "must be in (0, 1]"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("iterations", self.iterations >= 0, "must be >= 0"),
            ("eval_every", self.eval_every >= 1, "must be >= 1"),
            ("lr", self.lr > 0, "must be > 0"),
            ("schedule", self.schedule in SCHEDULES, f"must be one of {tuple(SCHEDULES)}"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{msg}, got {getattr(self, name)!r}", field=f"crr.{name}")

    @property
    def filter_spec(self) -> "FilterSpec":
        return FilterSpec(self.filter, self.beta, self.clip)


@dataclass(frozen=True)
class FilterSpec:
    kind: str = "exponential"
    beta: float = 1.0
    clip: float = 20.0


def filter_weight(adv: torch.Tensor, spec: FilterSpec) -> torch.Tensor:
    """Non-negative, advantage-monotone weight for each logged action.

    ``exponential``: ``min(exp(adv / beta), clip)``, kept strictly positive;
    ``binary``: ``1[adv > 0]``; ``constant``: 1 (behaviour cloning).
    """
    adv = torch.as_tensor(adv)
    if not adv.is_floating_point():
        adv = adv.to(torch.get_default_dtype())
    if spec.kind == "exponential":
        # bound the exponent first so huge advantages cannot overflow to inf
        x = torch.clamp(adv / spec.beta, max=math.log(spec.clip) + 1.0)
        w = torch.clamp(torch.exp(x), max=spec.clip)
        return torch.clamp(w, min=torch.finfo(w.dtype).tiny)
    if spec.kind == "binary":
        return (adv > 0).to(adv.dtype)
    if spec.kind == "constant":
        return torch.ones_like(adv)
    raise ConfigError(f"unknown filter {spec.kind!r}", field="crr.filter")


def estimate_advantage(critic, policy, states, actions, m, generator=None, enc=None, logits=None):
    """``Q(s, a) - mean_j Q(s, a_j)`` with ``a_j`` drawn from the online policy."""
    with torch.no_grad():
        if enc is None:
            enc = critic.encode(states)
        enc = enc.detach()
        sampled = policy_sample(policy, states, m, generator, logits=logits)
        q_sa = critic.q(enc, actions)
        baseline = critic.q(enc, sampled).mean(dim=1)
    return q_sa - baseline


def td_target(rewards, next_states, terminal, target_policy, target_critic, gamma, m, generator=None):
    """``r + gamma * mean_j Q'(s', a'_j)`` with ``a'_j ~ pi'(.|s')``; ``r`` alone at terminals."""
    with torch.no_grad():
        rewards = rewards.to(torch.get_default_dtype())
        if gamma == 0:
            return rewards.clone()
        sampled = policy_sample(target_policy, next_states, m, generator)
        boot = target_critic.q(target_critic.encode(next_states), sampled).mean(dim=1).to(rewards.dtype)
        return rewards + gamma * (~terminal).to(rewards.dtype) * boot


def actor_loss(policy, states, actions, weights, logits=None):
    if logits is None:
        logits = policy(states)
    return cross_entropy(logits, actions - 1, weights=weights)


def actor_step(policy, opt, states, actions, weights, lr, logits=None) -> float | None:
    """One Adam step on ``-(1/b) sum_j w_j log pi(a_j|s_j)``; ``None`` if every weight is 0."""
    if not torch.any(weights > 0):
        return None
    opt.zero_grad()
    loss = actor_loss(policy, states, actions, weights, logits)
    backward(loss)
    adam_step(opt, lr)
    return loss.item()


def critic_step(critic, opt, states, actions, y, lr, enc=None) -> float:
    opt.zero_grad()
    if enc is None:
        enc = critic.encode(states)
    q = critic.q(enc, actions)
    loss = ((q - y.to(q.dtype)) ** 2).mean()
    if not torch.isfinite(loss):
        raise NumericError(
            f"critic loss {loss.item()} (|q|max={q.abs().max().item():.3g}, |y|max={y.abs().max().item():.3g})",
            op="critic_step")
    backward(loss)
    adam_step(opt, lr)
    return loss.item()


def make_critic(policy, hidden=256, n_layers=2, head_layers=2, dropout=0.0, seed=0) -> ValueNetwork:
    """Randomly initialised critic whose frozen embeddings copy the policy's."""
    torch.manual_seed(seed)
    dim = policy.item_emb.weight.shape[1]
    critic = ValueNetwork(policy.n_items, policy.window, dim, hidden, n_layers, dropout, head_layers)
    critic = critic.to(policy.item_emb.weight.dtype)
    critic.load_embeddings(policy.item_emb.weight.detach())
    return critic


@dataclass
class CrrResult:
    policy: torch.nn.Module
    best_iteration: int
    best_hr10: float
    curve: list = field(default_factory=list)
    skipped_actor_steps: int = 0


class CrrTrainer:
    """Owns the online/target actor and critic plus their optimisers."""

    def __init__(self, policy, critic, data: TransitionSet, config: CrrConfig,
                 valid: TransitionSet | None = None, history: History | None = None,
                 freeze_embeddings: bool = True):
        if len(data) == 0:
            raise DataError("empty transition set")
        self.config = config
        self.data = data
        self.valid = valid if valid is not None and len(valid.positive()) else None
        self.history = history if history is not None else (
            History([data] + ([valid] if valid is not None else [])))
        if config.dropout is not None:
            set_dropout(policy, config.dropout)
            set_dropout(critic, config.dropout)
        if freeze_embeddings and hasattr(policy, "item_emb"):
            policy.item_emb.weight.requires_grad_(False)
        self.actor = TargetPair.from_online(policy, config.tau)
        self.critic = TargetPair.from_online(critic, config.tau)
        self.actor.target.eval()
        self.critic.target.eval()
        self.actor_opt = AdamState(policy.parameters())
        self.critic_opt = AdamState(critic.parameters())
        self.schedule = SCHEDULES[config.schedule]
        torch.manual_seed(config.seed)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.iteration = 0
        self.skipped = 0
        self.curve = []
        self.best_state = copy.deepcopy(policy.state_dict())
        self.best_hr = float("-inf")
        self.best_iteration = 0
        self._window = {"actor": [], "critic": [], "w": []}

    @property
    def policy(self):
        return self.actor.online

    def lr(self) -> float:
        return self.schedule(self.iteration, max(1, self.config.iterations), self.config.lr)

    def step(self) -> dict:
        cfg = self.config
        policy, critic = self.actor.online, self.critic.online
        policy.train()
        critic.train()
        idx = torch.randint(len(self.data), (cfg.batch_size,), generator=self.generator)
        s, a, r, s2, term = self.data.batch(idx.numpy())
        lr = self.lr()

        logits = policy(s)
        enc = critic.encode(s)
        adv = estimate_advantage(critic, policy, s, a, cfg.m, self.generator, enc=enc, logits=logits)
        w = filter_weight(adv, cfg.filter_spec)
        a_loss = actor_step(policy, self.actor_opt, s, a, w, lr, logits=logits)
        if a_loss is None:
            self.skipped += 1
            log.debug("iteration %d: all filter weights zero, actor step skipped", self.iteration)

        y = td_target(r, s2, term, self.actor.target, self.critic.target, cfg.gamma, cfg.m_target,
                      self.generator)
        c_loss = critic_step(critic, self.critic_opt, s, a, y, lr, enc=enc)

        self.actor.update()
        self.critic.update()
        self.iteration += 1
        out = {"actor_loss": a_loss, "critic_loss": c_loss, "mean_filter_weight": w.mean().item()}
        self._window["actor"].append(a_loss if a_loss is not None else float("nan"))
        self._window["critic"].append(c_loss)
        self._window["w"].append(out["mean_filter_weight"])
        return out

    def evaluate(self) -> dict:
        if self.valid is not None:
            hr, ndcg = validation_hr(self.actor.online, self.valid, self.history)
        else:
            hr, ndcg = float("nan"), float("nan")
        win = self._window
        row = {
            "iteration": self.iteration,
            "actor_loss": float(np.nanmean(win["actor"])) if not all(np.isnan(win["actor"])) else float("nan"),
            "critic_loss": float(np.mean(win["critic"])),
            "mean_filter_weight": float(np.mean(win["w"])),
            "val_hr10": hr,
            "val_ndcg10": ndcg,
        }
        self._window = {"actor": [], "critic": [], "w": []}
        self.curve.append(row)
        if hr > self.best_hr or (np.isnan(hr) and self.iteration == self.config.iterations):
            self.best_hr, self.best_iteration = hr, self.iteration
            self.best_state = copy.deepcopy(self.actor.online.state_dict())
        log.info("iter %d actor %.4f critic %.4f w %.3f val HR@10 %.4f", self.iteration,
                 row["actor_loss"], row["critic_loss"], row["mean_filter_weight"], hr)
        return row

    def train(self, on_eval=None) -> CrrResult:
        cfg = self.config
        while self.iteration < cfg.iterations:
            self.step()
            if self.iteration % cfg.eval_every == 0 or self.iteration == cfg.iterations:
                self.evaluate()
                if on_eval is not None:
                    on_eval(self)
        best = copy.deepcopy(self.actor.online)
        best.load_state_dict(self.best_state)
        best.eval()
        return CrrResult(best, self.best_iteration, self.best_hr, list(self.curve), self.skipped)

    # ------------------------------------------------------------ resumability

    def state_tensors(self):
        tensors = {}
        for prefix, net in (("actor", self.actor.online), ("actor_target", self.actor.target),
                            ("critic", self.critic.online), ("critic_target", self.critic.target)):
            for k, v in net.state_dict().items():
                tensors[f"{prefix}.{k}"] = v
        for k, v in self.best_state.items():
            tensors[f"best.{k}"] = v
        for prefix, opt in (("actor_opt", self.actor_opt), ("critic_opt", self.critic_opt)):
            for i, p in enumerate(opt.optimizer.param_groups[0]["params"]):
                m1, m2 = opt.moments(p)
                if m1 is not None:
                    tensors[f"{prefix}.{i}.exp_avg"] = m1
                    tensors[f"{prefix}.{i}.exp_avg_sq"] = m2
                    tensors[f"{prefix}.{i}.step"] = opt.optimizer.state[p]["step"].reshape(1).to(torch.float64)
        tensors["rng.generator"] = self.generator.get_state().to(torch.int64)
        tensors["rng.global"] = torch.get_rng_state().to(torch.int64)
        return tensors

    def save_state(self, path) -> None:
        meta = {
            "iteration": self.iteration,
            "skipped": self.skipped,
            "best_hr": self.best_hr,
            "best_iteration": self.best_iteration,
            "curve": self.curve,
            "opt_steps": [self.actor_opt.step, self.critic_opt.step],
            "window": self._window,
        }
        checkpoint.save_checkpoint(path, self.state_tensors(), meta)

    def load_state(self, path) -> None:
        tensors, meta = checkpoint.load_checkpoint(path)

        def sub(prefix):
            n = len(prefix) + 1
            return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}

        self.actor.online.load_state_dict(sub("actor"))
        self.actor.target.load_state_dict(sub("actor_target"))
        self.critic.online.load_state_dict(sub("critic"))
        self.critic.target.load_state_dict(sub("critic_target"))
        self.best_state = sub("best")
        for prefix, opt in (("actor_opt", self.actor_opt), ("critic_opt", self.critic_opt)):
            for i, p in enumerate(opt.optimizer.param_groups[0]["params"]):
                key = f"{prefix}.{i}.exp_avg"
                if key in tensors:
                    opt.optimizer.state[p] = {
                        "step": tensors[f"{prefix}.{i}.step"].reshape(()).to(torch.float32),
                        "exp_avg": tensors[key].clone(),
                        "exp_avg_sq": tensors[f"{prefix}.{i}.exp_avg_sq"].clone(),
                    }
        self.generator.set_state(tensors["rng.generator"].to(torch.uint8))
        torch.set_rng_state(tensors["rng.global"].to(torch.uint8))
        self.iteration = meta["iteration"]
        self.skipped = meta["skipped"]
        self.best_hr = meta["best_hr"]
        self.best_iteration = meta["best_iteration"]
        self.curve = meta["curve"]
        self.actor_opt.step, self.critic_opt.step = meta["opt_steps"]
        self._window = {k: list(v) for k, v in meta.get("window", self._window).items()}


def train_crr(policy, data: TransitionSet, config: CrrConfig, valid=None, history=None, critic=None,
              critic_kwargs=None, on_eval=None) -> CrrResult:
    """Run stage two from ``policy``; returns the best-validation policy.

    With ``iterations == 0`` the returned policy equals the initial one.
    """
    if critic is None:
        critic = make_critic(policy, seed=config.seed, **(critic_kwargs or {}))
    trainer = CrrTrainer(policy, critic, data, config, valid, history)
    return trainer.train(on_eval)
