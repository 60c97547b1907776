"""Function approximators: the causal-attention policy and the LSTM critic.

Item ids are 1-based; id 0 is the PAD token. The policy's logit column
``k`` scores item ``k + 1`` so PAD never receives probability.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from . import checkpoint
from .errors import ContractViolation
from .substrate import softmax


def _check_ids(ids: torch.Tensor, n_items: int, what: str, allow_pad: bool) -> None:
    if ids.numel() == 0:
        return
    lo = 0 if allow_pad else 1
    if ids.min() < lo or ids.max() > n_items:
        raise IndexError(f"{what} ids must lie in [{lo}, {n_items}]")


class CausalSelfAttention(nn.Module):
    def __init__(self, dim, n_heads, dropout=0.0):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.attn_drop = nn.Dropout(dropout)
        self.resid_drop = nn.Dropout(dropout)

    def forward(self, x, last_only=False):
        B, T, C = x.shape
        hd = C // self.n_heads
        q, k, v = self.qkv(x).split(C, dim=2)
        if last_only:
            q = q[:, -1:]
        q = q.reshape(B, q.shape[1], self.n_heads, hd).transpose(1, 2)
        k = k.view(B, T, self.n_heads, hd).transpose(1, 2)
        v = v.view(B, T, self.n_heads, hd).transpose(1, 2)
        p = self.attn_drop.p if self.training else 0.0
        # the final query may attend to every position, so no mask is needed for it
        y = F.scaled_dot_product_attention(q, k, v, dropout_p=p, is_causal=not last_only)
        y = y.transpose(1, 2).reshape(B, q.shape[2], C)
        return self.resid_drop(self.proj(y))


class Block(nn.Module):
    """Pre-norm transformer block: attention then a 4x feed-forward."""

    def __init__(self, dim, n_heads, dropout=0.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, n_heads, dropout)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim),
            nn.GELU(),
            nn.Linear(4 * dim, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x, last_only=False):
        """With ``last_only`` only the final position is computed and returned."""
        h = self.attn(self.ln1(x), last_only)
        x = (x[:, -1:] if last_only else x) + h
        return x + self.mlp(self.ln2(x))


def _mlp(in_dim, hidden, out_dim, layers):
    if layers <= 1:
        return nn.Linear(in_dim, out_dim)
    mods = []
    d = in_dim
    for _ in range(layers - 1):
        mods += [nn.Linear(d, hidden), nn.ReLU()]
        d = hidden
    mods.append(nn.Linear(d, out_dim))
    return nn.Sequential(*mods)


class PolicyNetwork(nn.Module):
    """Item embeddings + learned positions + causal blocks + head over items.

    The recommendation for a window is read off the final position.
    """

    kind = "policy"

    def __init__(
        self,
        n_items,
        window=30,
        dim=64,
        n_blocks=2,
        n_heads=4,
        dropout=0.0,
        head_layers=1,
        head_init_std=1e-3,
    ):
        super().__init__()
        self.n_items = int(n_items)
        self.window = int(window)
        self.arch = dict(
            n_items=self.n_items,
            window=self.window,
            dim=dim,
            n_blocks=n_blocks,
            n_heads=n_heads,
            dropout=dropout,
            head_layers=head_layers,
            head_init_std=head_init_std,
        )
        self.item_emb = nn.Embedding(self.n_items + 1, dim)
        self.pos_emb = nn.Parameter(torch.zeros(self.window, dim))
        self.drop = nn.Dropout(dropout)
        self.blocks = nn.ModuleList(Block(dim, n_heads, dropout) for _ in range(n_blocks))
        self.ln_f = nn.LayerNorm(dim)
        self.head = _mlp(dim, dim, self.n_items, head_layers)
        self._init_weights(head_init_std)

    def _init_weights(self, head_init_std):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Embedding):
                nn.init.normal_(m.weight, std=0.02)
        nn.init.normal_(self.pos_emb, std=0.02)
        last = self.head if isinstance(self.head, nn.Linear) else self.head[-1]
        nn.init.normal_(last.weight, std=head_init_std)

    @property
    def embedding(self) -> nn.Parameter:
        return self.item_emb.weight

    def _embed(self, states):
        if states.dim() != 2 or states.shape[1] != self.window:
            raise ContractViolation(f"expected states of shape (B, {self.window}), got {tuple(states.shape)}")
        _check_ids(states, self.n_items, "state", allow_pad=True)
        return self.drop(self.item_emb(states) + self.pos_emb)

    def features(self, states):
        """Per-position features ``(B, window, dim)`` after the final norm."""
        x = self._embed(states)
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def forward(self, states):
        x = self._embed(states)
        for block in self.blocks[:-1]:
            x = block(x)
        if len(self.blocks):
            x = self.blocks[-1](x, last_only=True)
        return self.head(self.ln_f(x[:, -1]))

    def distribution(self, states):
        return softmax(self(states))


class ValueNetwork(nn.Module):
    """Frozen item embeddings -> stacked LSTM -> MLP over [h_T ; e(action)]."""

    kind = "critic"

    def __init__(
        self,
        n_items,
        window=30,
        dim=64,
        hidden=256,
        n_layers=2,
        dropout=0.0,
        head_layers=2,
    ):
        super().__init__()
        self.n_items = int(n_items)
        self.window = int(window)
        self.arch = dict(
            n_items=self.n_items,
            window=self.window,
            dim=dim,
            hidden=hidden,
            n_layers=n_layers,
            dropout=dropout,
            head_layers=head_layers,
        )
        self.item_emb = nn.Embedding(self.n_items + 1, dim)
        self.item_emb.weight.requires_grad_(False)
        self.lstm = nn.LSTM(dim, hidden, num_layers=n_layers, batch_first=True,
                            dropout=dropout if n_layers > 1 else 0.0)
        self.head = _mlp(hidden + dim, hidden, 1, head_layers)

    @property
    def embedding(self) -> nn.Parameter:
        return self.item_emb.weight

    def load_embeddings(self, table: torch.Tensor) -> None:
        if table.shape != self.item_emb.weight.shape:
            raise ContractViolation(
                f"embedding shape {tuple(table.shape)} != {tuple(self.item_emb.weight.shape)}"
            )
        with torch.no_grad():
            self.item_emb.weight.copy_(table)

    def encode(self, states):
        if states.dim() != 2 or states.shape[1] != self.window:
            raise ContractViolation(f"expected states of shape (B, {self.window}), got {tuple(states.shape)}")
        _check_ids(states, self.n_items, "state", allow_pad=True)
        out, _ = self.lstm(self.item_emb(states))
        return out[:, -1]

    def q(self, enc, actions):
        """Q for each action given a state encoding; ``actions`` is ``(B,)`` or ``(B, m)``."""
        _check_ids(actions, self.n_items, "action", allow_pad=False)
        a = self.item_emb(actions)
        if actions.dim() == 2:
            enc = enc.unsqueeze(1).expand(-1, actions.shape[1], -1)
        return self.head(torch.cat([enc, a], dim=-1)).squeeze(-1)

    def forward(self, states, actions):
        return self.q(self.encode(states), actions)


class TabularPolicy(nn.Module):
    """Logit table indexed by the last window entry; plugs into the CRR trainer."""

    kind = "tabular_policy"

    def __init__(self, n_items, window=1, logits=None):
        super().__init__()
        self.n_items = int(n_items)
        self.window = int(window)
        self.arch = dict(n_items=self.n_items, window=self.window)
        init = torch.zeros(self.n_items + 1, self.n_items) if logits is None else torch.as_tensor(logits)
        self.table = nn.Parameter(init.clone().to(torch.get_default_dtype()))

    def forward(self, states):
        _check_ids(states, self.n_items, "state", allow_pad=True)
        return self.table[states[:, -1]]


class TabularCritic(nn.Module):
    """One free Q value per (last window entry, action) pair."""

    kind = "tabular_critic"

    def __init__(self, n_items, window=1):
        super().__init__()
        self.n_items = int(n_items)
        self.window = int(window)
        self.arch = dict(n_items=self.n_items, window=self.window)
        self.table = nn.Parameter(torch.zeros(self.n_items + 1, self.n_items))

    def encode(self, states):
        _check_ids(states, self.n_items, "state", allow_pad=True)
        return states[:, -1]

    def q(self, enc, actions):
        _check_ids(actions, self.n_items, "action", allow_pad=False)
        if actions.dim() == 2:
            enc = enc.unsqueeze(1).expand_as(actions)
        return self.table[enc, actions - 1]

    def forward(self, states, actions):
        return self.q(self.encode(states), actions)


def policy_forward(policy, states):
    """Return ``(logits, probabilities)`` for a batch of windows."""
    logits = policy(states)
    return logits, softmax(logits)


def policy_sample(policy, states, m, generator=None, logits=None):
    """Draw ``m`` item ids per state from the policy distribution."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if logits is None:
        with torch.no_grad():
            logits = policy(states)
    probs = softmax(logits.detach()).to(torch.float64)
    return torch.multinomial(probs, m, replacement=True, generator=generator) + 1


def value_forward(critic, states, actions):
    return critic(states, actions)


def set_dropout(module: nn.Module, p: float) -> None:
    """Set every dropout rate in ``module`` (including inter-layer LSTM dropout)."""
    if "dropout" in getattr(module, "arch", {}):
        module.arch["dropout"] = p
    for m in module.modules():
        if isinstance(m, nn.Dropout):
            m.p = p
        elif isinstance(m, nn.LSTM) and m.num_layers > 1:
            m.dropout = p


def soft_update(online: nn.Module, target: nn.Module, tau: float) -> None:
    """``target <- tau * online + (1 - tau) * target`` for every parameter and buffer."""
    src = list(online.parameters()) + list(online.buffers())
    dst = list(target.parameters()) + list(target.buffers())
    if len(src) != len(dst):
        raise ContractViolation("online and target have different parameter lists")
    for s, d in zip(src, dst):
        if s.shape != d.shape:
            raise ContractViolation(f"shape mismatch {tuple(s.shape)} vs {tuple(d.shape)}")
    with torch.no_grad():
        floats = [(s, d) for s, d in zip(src, dst) if d.is_floating_point()]
        for s, d in zip(src, dst):
            if not d.is_floating_point() or tau == 1.0:
                d.copy_(s)
        if floats and tau != 1.0:
            fs, fd = [s for s, _ in floats], [d for _, d in floats]
            torch._foreach_mul_(fd, 1.0 - tau)
            torch._foreach_add_(fd, fs, alpha=tau)


@dataclass
class TargetPair:
    online: nn.Module
    target: nn.Module
    tau: float = 0.01

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")

    @classmethod
    def from_online(cls, online, tau=0.01):
        target = copy.deepcopy(online)
        for p in target.parameters():
            p.requires_grad_(False)
        return cls(online, target, tau)

    def update(self) -> None:
        soft_update(self.online, self.target, self.tau)


_KINDS = {
    cls.kind: cls for cls in (PolicyNetwork, ValueNetwork, TabularPolicy, TabularCritic)
}


def save_network(path, net: nn.Module, extra=None) -> None:
    meta = {"kind": net.kind, "arch": net.arch}
    if extra:
        meta["extra"] = extra
    checkpoint.save_checkpoint(path, net.state_dict(), meta)


def load_network(path):
    """Rebuild a network from a checkpoint alone; returns ``(net, extra)``."""
    tensors, meta = checkpoint.load_checkpoint(path)
    cls = _KINDS[meta["kind"]]
    net = cls(**meta["arch"])
    dtype = next(iter(tensors.values())).dtype if tensors else torch.float32
    net = net.to(dtype)
    net.load_state_dict(tensors)
    if isinstance(net, ValueNetwork):
        net.item_emb.weight.requires_grad_(False)
    return net, meta.get("extra", {})
