import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from cascade_sr.diffusion import (
    DiffusionSchedule,
    build_schedule,
    forward_marginal,
    reverse_step,
    scg_gradient,
    scg_loss,
    scg_update,
)
from cascade_sr.imaging import bicubic_resize


def mean_pool(x):
    return F.avg_pool2d(x, 2)


# ---------------------------------------------------------------- schedule


def test_two_step_schedule():
    s = build_schedule(2, 1.0, 0.01, 1.0)
    np.testing.assert_allclose(s.eta, [0.01, 1.0])
    np.testing.assert_allclose(s.alpha, [0.01, 0.99])


def test_default_schedule_matches_independent_spacing():
    s = build_schedule()
    assert s.n_steps == 15 and s.kappa == 2.0
    oracle = np.geomspace(math.sqrt(1e-3), math.sqrt(0.999), 15) ** 2
    np.testing.assert_allclose(s.eta, oracle, rtol=1e-12)
    ratios = np.sqrt(s.eta[1:]) / np.sqrt(s.eta[:-1])
    np.testing.assert_allclose(ratios, ratios[0], rtol=1e-10)
    assert np.all(np.diff(s.eta) > 0)


@pytest.mark.parametrize("T, eta_min, eta_max", [(2, 1e-3, 1.0), (15, 1e-3, 0.999), (50, 1e-4, 0.995), (7, 5e-3, 0.99)])
def test_alpha_telescopes(T, eta_min, eta_max):
    s = build_schedule(T, 1.5, eta_min, eta_max)
    assert s.alpha.sum() == pytest.approx(s.eta[-1], abs=1e-15)
    assert np.all(s.alpha > 0)
    assert s.alpha_at(1) == s.eta_at(1)
    assert s.eta_at(0) == 0.0


@pytest.mark.parametrize(
    "kwargs",
    [dict(n_steps=1), dict(eta_min=0.5, eta_max=0.4), dict(eta_min=0.0), dict(eta_max=1.2), dict(kappa=0.0)],
)
def test_schedule_rejects_bad_parameters(kwargs):
    with pytest.raises(ValueError):
        build_schedule(**kwargs)


def test_schedule_rejects_non_monotone_eta():
    with pytest.raises(ValueError):
        DiffusionSchedule(np.array([1e-3, 0.5, 0.4, 0.999]), 2.0)
    with pytest.raises(ValueError):
        DiffusionSchedule(np.array([0.1, 0.999]), 2.0)  # eta_1 too large
    with pytest.raises(ValueError):
        DiffusionSchedule(np.array([1e-3, 0.9]), 2.0)  # eta_T too small


def test_schedule_dict_roundtrip_and_immutable():
    s = build_schedule()
    r = DiffusionSchedule.from_dict(s.to_dict())
    assert r == s
    with pytest.raises(ValueError):
        s.eta[0] = 0.5


# ---------------------------------------------------------------- forward marginal


def test_forward_fully_shifted_returns_y0():
    s = DiffusionSchedule(np.array([1e-3, 0.5, 1.0]), 2.0)
    x0, y0 = torch.randn(3, 4, 4, dtype=torch.float64), torch.randn(3, 4, 4, dtype=torch.float64)
    out = forward_marginal(x0, y0, 3, s, torch.zeros_like(x0))
    assert torch.equal(out, y0)


def test_forward_first_step_near_x0():
    s = build_schedule()
    x0, y0 = torch.randn(3, 8, 8, dtype=torch.float64), torch.randn(3, 8, 8, dtype=torch.float64)
    out = forward_marginal(x0, y0, 1, s, torch.zeros_like(x0))
    assert float((out - x0).norm()) <= s.eta[0] * float((y0 - x0).norm()) + 1e-12


@pytest.mark.parametrize("t", [1, 5, 15])
def test_forward_monte_carlo_moments(t):
    s = build_schedule()
    g = torch.Generator().manual_seed(t)
    n = 100_000
    x0 = torch.full((n,), 0.3, dtype=torch.float64)
    y0 = torch.full((n,), -0.6, dtype=torch.float64)
    xt = forward_marginal(x0, y0, t, s, torch.randn(n, generator=g, dtype=torch.float64))
    eta = s.eta_at(t)
    var = s.kappa**2 * eta
    assert float(xt.var()) == pytest.approx(var, rel=0.02)
    # mean within 4 standard errors of the closed form
    assert abs(float(xt.mean()) - (0.3 + eta * (-0.9))) < 4 * math.sqrt(var / n)


def test_forward_batched_timesteps():
    s = build_schedule()
    x0, y0 = torch.zeros(4, 1, 2, 2), torch.ones(4, 1, 2, 2)
    t = torch.tensor([1, 2, 10, 15])
    out = forward_marginal(x0, y0, t, s, torch.zeros_like(x0))
    np.testing.assert_allclose(out[:, 0, 0, 0].numpy(), s.eta[[0, 1, 9, 14]], rtol=1e-6)


def test_forward_errors():
    s = build_schedule()
    a = torch.zeros(1, 4, 4)
    with pytest.raises(ValueError):
        forward_marginal(a, torch.zeros(1, 4, 5), 1, s, a)
    with pytest.raises(ValueError):
        forward_marginal(a, a, 0, s, a)
    with pytest.raises(ValueError):
        forward_marginal(a, a, 16, s, a)


# ---------------------------------------------------------------- reverse step


def test_reverse_first_step_is_identity_onto_estimate():
    s = build_schedule()
    x_t, x0_hat, noise = (torch.randn(3, 6, 6, dtype=torch.float64) for _ in range(3))
    assert torch.equal(reverse_step(x_t, x0_hat, 1, s, noise), x0_hat)


@pytest.mark.parametrize("T", [2, 15, 40])
def test_oracle_reverse_chain_recovers_x0(T):
    s = build_schedule(T)
    g = torch.Generator().manual_seed(T)
    x0 = torch.randn(3, 16, 16, generator=g, dtype=torch.float64)
    y0 = torch.randn(3, 16, 16, generator=g, dtype=torch.float64)
    x = x0 + s.eta_at(T) * (y0 - x0)
    zero = torch.zeros_like(x0)
    for t in range(T, 0, -1):
        x = reverse_step(x, x0, t, s, zero)
    assert float((x - x0).abs().max()) < 1e-9


@pytest.mark.parametrize("t", [2, 8, 15])
def test_reverse_monte_carlo_variance(t):
    s = build_schedule()
    g = torch.Generator().manual_seed(100 + t)
    n = 100_000
    x_t = torch.full((n,), 0.2, dtype=torch.float64)
    x0_hat = torch.full((n,), -0.1, dtype=torch.float64)
    out = reverse_step(x_t, x0_hat, t, s, torch.randn(n, generator=g, dtype=torch.float64))
    var = s.kappa**2 * s.eta_at(t - 1) / s.eta_at(t) * s.alpha_at(t)
    assert float(out.var()) == pytest.approx(var, rel=0.02)


def test_reverse_errors():
    s = build_schedule()
    a = torch.zeros(2, 2)
    with pytest.raises(ValueError):
        reverse_step(a, torch.zeros(2, 3), 2, s, a)
    with pytest.raises(ValueError):
        reverse_step(a, a, 0, s, a)
    with pytest.raises(ValueError):
        reverse_step(a, a, 16, s, a)


# ---------------------------------------------------------------- guidance


def test_scg_loss_zero_at_consistency():
    x = torch.randn(1, 3, 16, 16, dtype=torch.float64)
    ref = bicubic_resize(x, (8, 8))
    assert float(scg_loss(x, ref)) == pytest.approx(0.0, abs=1e-20)


def test_scg_mean_pool_hand_example():
    x = torch.ones(1, 1, 2, 2, dtype=torch.float64)
    ref = torch.full((1, 1, 1, 1), 2.0, dtype=torch.float64)
    assert float(scg_loss(x, ref, mean_pool)) == 1.0
    out = scg_update(x, ref, 0.5, mean_pool)
    assert torch.equal(out, torch.full_like(x, 1.25))


def test_scg_zero_step_unchanged():
    x = torch.randn(1, 3, 8, 8)
    ref = torch.randn(1, 3, 4, 4)
    assert torch.equal(scg_update(x, ref, 0.0), x)


def test_scg_rejects_negative_zeta_and_mismatch():
    x = torch.randn(1, 3, 8, 8)
    with pytest.raises(ValueError):
        scg_update(x, torch.randn(1, 3, 4, 4), -0.1)
    with pytest.raises(ValueError):
        scg_loss(x, torch.randn(1, 3, 3, 3), mean_pool)
    with pytest.raises(ValueError):
        scg_loss(x, torch.randn(1, 3, 3, 3), lambda z: bicubic_resize(z, (4, 4)))


def test_scg_loss_permutation_invariant():
    g = torch.Generator().manual_seed(5)
    x = torch.randn(1, 3, 8, 8, generator=g, dtype=torch.float64)
    ref = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64)
    perm = torch.randperm(48, generator=g)
    base = float(scg_loss(x, ref))
    down = bicubic_resize(x, (4, 4)).flatten()[perm]
    assert float(((ref.flatten()[perm] - down) ** 2).sum()) == pytest.approx(base, rel=1e-12)


def central_difference(x, ref, eps=1e-6):
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    for k in range(flat.numel()):
        old = flat[k].item()
        flat[k] = old + eps
        hi = float(scg_loss(x, ref))
        flat[k] = old - eps
        lo = float(scg_loss(x, ref))
        flat[k] = old
        grad.view(-1)[k] = (hi - lo) / (2 * eps)
    return grad


def test_scg_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(11)
    for _ in range(5):
        x = torch.randn(1, 1, 8, 8, generator=g, dtype=torch.float64)
        ref = torch.randn(1, 1, 4, 4, generator=g, dtype=torch.float64)
        auto = scg_gradient(x, ref)
        fd = central_difference(x.clone(), ref)
        assert float((auto - fd).norm() / fd.norm()) < 1e-4


def test_small_step_never_increases_loss():
    g = torch.Generator().manual_seed(12)
    for _ in range(100):
        x = torch.randn(1, 3, 8, 8, generator=g, dtype=torch.float64)
        ref = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64)
        before = float(scg_loss(x, ref))
        after = float(scg_loss(scg_update(x, ref, 1e-3), ref))
        assert after <= before


def test_scg_update_never_touches_grad_state():
    x = torch.randn(1, 3, 8, 8, requires_grad=True)
    out = scg_update(x, torch.randn(1, 3, 4, 4), 0.1)
    assert not out.requires_grad and x.grad is None
