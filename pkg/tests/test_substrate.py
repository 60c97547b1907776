import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from crrec.errors import ConfigError, ContractViolation, NumericError
from crrec.substrate import (AdamState, adam_step, backward, cosine_lr, cross_entropy,
                             finite_diff_check, float64_mode, log_softmax, softmax)


def test_backward_sum_gives_ones():
    p = nn.Parameter(torch.randn(3, 4))
    backward(p.sum())
    assert torch.equal(p.grad, torch.ones(3, 4))


def test_backward_half_square_norm_gives_value():
    p = nn.Parameter(torch.randn(5, dtype=torch.float64))
    backward(0.5 * (p ** 2).sum())
    assert torch.allclose(p.grad, p.detach(), rtol=0, atol=0)


def test_backward_unreachable_param_gets_zero():
    a = nn.Parameter(torch.randn(3))
    b = nn.Parameter(torch.randn(2))
    backward(a.sum(), [a, b])
    assert torch.equal(b.grad, torch.zeros(2))


def test_backward_rejects_non_scalar():
    p = nn.Parameter(torch.randn(3))
    with pytest.raises(ContractViolation):
        backward(p * 2)


def test_backward_nan_names_op():
    p = nn.Parameter(torch.tensor([-1.0]))
    with pytest.raises(NumericError) as exc:
        backward(torch.log(p).sum() * 0 + torch.sqrt(p).sum())
    assert "[" in str(exc.value)


def test_mlp_gradients_match_finite_differences():
    with float64_mode():
        torch.manual_seed(0)
        mlp = nn.Sequential(nn.Linear(4, 6), nn.Tanh(), nn.Linear(6, 5), nn.Tanh(), nn.Linear(5, 1))
        x = torch.randn(7, 4)
        err = finite_diff_check(lambda: (mlp(x) ** 2).mean(), list(mlp.parameters()))
    assert err <= 1e-4


class _WrongSquare(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x ** 2

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return 3 * x * g


def test_finite_diff_flags_wrong_gradient():
    with float64_mode():
        p = nn.Parameter(torch.tensor([0.7, -1.3]))
        assert finite_diff_check(lambda: _WrongSquare.apply(p).sum(), [p]) > 0.1


def test_finite_diff_rejects_nondeterministic_fn():
    with float64_mode():
        p = nn.Parameter(torch.tensor([1.0]))
        with pytest.raises(ContractViolation):
            finite_diff_check(lambda: (p * torch.rand(1)).sum(), [p])


def _hand_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
    return theta


def test_adam_single_scalar_matches_hand_formula():
    p = nn.Parameter(torch.tensor([0.3], dtype=torch.float64))
    opt = AdamState([p])
    grads = [0.5, -1.25, 2.0]
    for g in grads:
        p.grad = torch.tensor([g], dtype=torch.float64)
        adam_step(opt, 1e-2)
    assert abs(p.item() - _hand_adam(0.3, grads, 1e-2)) <= 1e-12
    assert opt.step == 3


def test_adam_zero_gradient_leaves_values():
    p = nn.Parameter(torch.randn(4))
    before = p.detach().clone()
    opt = AdamState([p])
    p.grad = torch.zeros(4)
    adam_step(opt, 1e-3)
    assert torch.equal(p.detach(), before)


def test_adam_frozen_parameter_untouched():
    a = nn.Parameter(torch.randn(3))
    b = nn.Parameter(torch.randn(3), requires_grad=False)
    before = b.detach().clone()
    opt = AdamState([a, b])
    a.grad = torch.ones(3)
    b.grad = torch.ones(3)
    adam_step(opt, 1e-1)
    assert torch.equal(b.detach(), before)
    assert opt.moments(b) == (None, None)
    assert opt.moments(a)[0].shape == a.shape


@pytest.mark.parametrize("lr", [0.0, -1e-3])
def test_adam_rejects_nonpositive_lr(lr):
    p = nn.Parameter(torch.randn(2))
    p.grad = torch.ones(2)
    with pytest.raises(ConfigError):
        adam_step(AdamState([p]), lr)


def test_adam_bitwise_deterministic():
    def run():
        torch.manual_seed(3)
        net = nn.Sequential(nn.Linear(5, 8), nn.ReLU(), nn.Linear(8, 2))
        opt = AdamState(net.parameters())
        g = torch.Generator().manual_seed(1)
        for _ in range(20):
            x = torch.randn(16, 5, generator=g)
            opt.zero_grad()
            backward((net(x) ** 2).mean())
            adam_step(opt, 1e-2)
        return [p.detach().clone() for p in net.parameters()]

    for a, b in zip(run(), run()):
        assert torch.equal(a, b)


def test_cosine_examples():
    assert cosine_lr(0, 1000, 1e-4) == 1e-4
    assert abs(cosine_lr(1000, 1000, 1e-4)) < 1e-20
    assert abs(cosine_lr(500, 1000, 1e-4) - 5e-5) < 1e-18


def test_cosine_past_total_warns_and_clamps():
    with pytest.warns(UserWarning):
        assert cosine_lr(1001, 1000, 1e-4) == 0.0


def test_cosine_rejects_bad_total():
    with pytest.raises(ConfigError):
        cosine_lr(0, 0, 1e-4)


@given(st.integers(1, 5000), st.floats(1e-6, 1.0))
def test_cosine_monotone(total, base):
    lrs = [cosine_lr(s, total, base) for s in range(0, total + 1, max(1, total // 50))]
    assert all(b <= a + 1e-18 for a, b in zip(lrs, lrs[1:]))


def test_uniform_cross_entropy_is_ln4():
    loss = cross_entropy(torch.zeros(4, dtype=torch.float64), 2)
    assert abs(loss.item() - math.log(4)) < 1e-12


def test_near_one_hot_cross_entropy():
    logits = torch.zeros(10, dtype=torch.float64)
    logits[3] = 50.0
    assert cross_entropy(logits, 3).item() < 1e-12


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(torch.zeros(2, 4), torch.tensor([0, 4]))


def test_softmax_matches_arbitrary_precision():
    rng = np.random.default_rng(0)
    mpmath.mp.dps = 50
    for _ in range(50):
        z = rng.normal(0, 10, size=int(rng.integers(2, 30)))
        p = softmax(torch.tensor(z)).numpy()
        ls = log_softmax(torch.tensor(z)).numpy()
        den = mpmath.fsum(mpmath.exp(mpmath.mpf(x)) for x in z)
        for i, x in enumerate(z):
            ref = mpmath.exp(mpmath.mpf(x)) / den
            assert abs(p[i] - float(ref)) <= 1e-6 * float(ref) + 1e-300
            ref_log = mpmath.log(ref)
            assert abs(ls[i] - float(ref_log)) <= 1e-6 * max(1.0, abs(float(ref_log)))


@settings(max_examples=200)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40), st.floats(-1e3, 1e3))
def test_softmax_properties(z, c):
    t = torch.tensor(z, dtype=torch.float64)
    p = softmax(t)
    assert abs(p.sum().item() - 1) <= 1e-6
    assert torch.all((p >= 0) & (p <= 1))
    assert torch.allclose(softmax(t + c), p, rtol=0, atol=1e-9)
