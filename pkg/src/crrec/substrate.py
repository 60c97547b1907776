"""Differentiable-computation layer the networks and trainers build on.

Tensors, reverse-mode gradients and layer math come from torch; this module
adds the contracts the rest of the package relies on: finiteness checks,
freeze-aware Adam steps, the cosine schedule, a stabilised softmax /
cross-entropy pair and an independent central-difference gradient checker.
"""

from __future__ import annotations

import contextlib
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import torch
from torch import nn

from .errors import ConfigError, ContractViolation, NumericError

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def set_threads(n: int | None) -> None:
    """Cap intra-op parallelism; ``1`` is the bitwise-determinism mode."""
    if n is None:
        return
    if n < 1:
        raise ConfigError("must be >= 1", field="threads")
    torch.set_num_threads(n)


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


@contextlib.contextmanager
def float64_mode():
    """Temporarily make float64 the default dtype (gradient verification)."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def check_finite(tensor: torch.Tensor, op: str) -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise NumericError("non-finite value encountered", op=op)
    return tensor


def backward(loss: torch.Tensor, params: Iterable[nn.Parameter] | None = None) -> None:
    """Populate ``.grad`` on every parameter reachable from a scalar ``loss``.

    Parameters in ``params`` that the loss does not depend on receive an
    explicit zero gradient instead of ``None``.
    """
    if loss.dim() != 0 and loss.numel() != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    op = loss.grad_fn.name() if loss.grad_fn is not None else "loss"
    check_finite(loss.detach(), op)
    loss.backward()
    if params is None:
        return
    for i, p in enumerate(params):
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        elif not torch.isfinite(p.grad).all():
            raise NumericError("non-finite gradient", op=f"grad[{i}] of {op}")


@dataclass
class AdamState:
    """Adam optimiser over a fixed parameter list.

    Moment accumulators live inside the wrapped torch optimiser; ``step``
    counts completed updates.
    """

    params: list
    betas: tuple = ADAM_BETAS
    eps: float = ADAM_EPS
    step: int = 0
    optimizer: torch.optim.Adam = field(init=False, repr=False)

    def __post_init__(self):
        self.params = list(self.params)
        trainable = [p for p in self.params if p.requires_grad]
        if not trainable:
            raise ConfigError("no trainable parameters", field="optimizer.params")
        self.optimizer = torch.optim.Adam(
            trainable, lr=1.0, betas=self.betas, eps=self.eps, foreach=False
        )

    def moments(self, p: nn.Parameter):
        st = self.optimizer.state.get(p, {})
        return st.get("exp_avg"), st.get("exp_avg_sq")

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self):
        return {"step": self.step, "optimizer": self.optimizer.state_dict()}

    def load_state_dict(self, state):
        self.step = int(state["step"])
        self.optimizer.load_state_dict(state["optimizer"])


def adam_step(state: AdamState, lr: float, max_grad_norm: float | None = None) -> None:
    """One bias-corrected Adam update of the trainable parameters in ``state``."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}", field="lr")
    for p in state.params:
        if not p.requires_grad:
            p.grad = None
    if max_grad_norm is not None:
        torch.nn.utils.clip_grad_norm_([p for p in state.params if p.grad is not None], max_grad_norm)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    state.step += 1


def cosine_lr(step: int, total: int, base: float) -> float:
    if total <= 0:
        raise ConfigError(f"total steps must be > 0, got {total}", field="total")
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}", field="step")
    if step > total:
        warnings.warn(f"cosine_lr step {step} past total {total}; clamping to 0", stacklevel=2)
        return 0.0
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


def constant_lr(step: int, total: int, base: float) -> float:
    return base


SCHEDULES: dict[str, Callable[[int, int, float], float]] = {
    "cosine": cosine_lr,
    "constant": constant_lr,
}


def log_softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = logits - logits.max(dim=dim, keepdim=True).values.detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=dim, keepdim=True))


def softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = logits - logits.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def cross_entropy(
    logits: torch.Tensor,
    target: torch.Tensor | int,
    weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean of ``-w_j * log softmax(logits_j)[target_j]`` over the batch.

    Accepts a single logit vector with an int target, or a ``(B, I)`` batch.
    ``weights`` are treated as constants.
    """
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    target = torch.as_tensor(target, dtype=torch.long).reshape(-1)
    n_classes = logits.shape[-1]
    if target.numel() and (target.min() < 0 or target.max() >= n_classes):
        raise IndexError(f"target index out of range [0, {n_classes})")
    nll = -log_softmax(logits).gather(1, target.unsqueeze(1)).squeeze(1)
    if weights is not None:
        nll = nll * weights.detach().to(nll.dtype)
    return nll.mean()


def finite_diff_check(
    fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between autograd and central differences.

    ``fn`` must rebuild the scalar loss from the current parameter values
    on every call. The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    params = list(params)
    with torch.no_grad():
        base_a = fn().item()
        base_b = fn().item()
    if base_a != base_b:
        raise ContractViolation("function is not deterministic under a fixed seed")

    for p in params:
        p.grad = None
    loss = fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            analytic = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            flat_g = analytic.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                err = abs(flat_g[i].item() - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst
