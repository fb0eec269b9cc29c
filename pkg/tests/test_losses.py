import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from lulc_gan.losses import (
    GpSample,
    LogClampWarning,
    LossConfig,
    dcgan_discriminator_loss,
    dcgan_generator_loss,
    gradient_penalty,
    optimal_discriminator,
    vanilla_value,
    wgan_critic_loss,
    wgan_generator_loss,
)

LN2 = math.log(2)


class SmoothCritic(torch.nn.Module):
    """Random two-layer tanh network on flattened input, float64."""

    def __init__(self, n_in, hidden=6, seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.w1 = torch.nn.Parameter(torch.randn(n_in, hidden, generator=gen, dtype=torch.float64))
        self.b1 = torch.nn.Parameter(torch.randn(hidden, generator=gen, dtype=torch.float64))
        self.w2 = torch.nn.Parameter(torch.randn(hidden, generator=gen, dtype=torch.float64))

    def forward(self, x):
        return torch.tanh(x.reshape(len(x), -1) @ self.w1 + self.b1) @ self.w2


class ConstantCritic(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.value = torch.nn.Parameter(torch.tensor(3.0, dtype=torch.float64))

    def forward(self, x):
        return self.value.expand(len(x))


def finite_difference_penalty(critic, x_hat, lam, h=1e-5):
    flat = x_hat.detach().reshape(len(x_hat), -1).clone()
    norms = []
    with torch.no_grad():
        for b in range(len(flat)):
            grad = torch.empty(flat.shape[1], dtype=torch.float64)
            for i in range(flat.shape[1]):
                up, down = flat[b].clone(), flat[b].clone()
                up[i] += h
                down[i] -= h
                f_up = critic(up.reshape(1, *x_hat.shape[1:]))[0]
                f_down = critic(down.reshape(1, *x_hat.shape[1:]))[0]
                grad[i] = (f_up - f_down) / (2 * h)
            norms.append(float(grad.norm()))
    return lam * float(np.mean([(n - 1) ** 2 for n in norms]))


# ---------------------------------------------------------------- value / optimal D


def test_vanilla_value_equilibrium():
    assert float(vanilla_value(torch.full((5,), 0.5), torch.full((5,), 0.5))) == pytest.approx(-2 * LN2, abs=1e-6)


def test_vanilla_value_perfect_discriminator():
    assert float(vanilla_value([1.0, 1.0], [0.0, 0.0])) == pytest.approx(0.0, abs=1e-12)
    assert float(vanilla_value([1 - 1e-9], [1e-9])) == pytest.approx(0.0, abs=1e-6)


def test_vanilla_value_direct():
    assert float(vanilla_value([0.9], [0.2])) == pytest.approx(-0.328504, abs=1e-6)


def test_vanilla_value_clamps_with_warning():
    with pytest.warns(LogClampWarning):
        v = vanilla_value([0.0, 0.5], [0.5, 1.0])
    assert torch.isfinite(v)


def test_vanilla_value_rejects_non_probabilities():
    with pytest.raises(ValueError):
        vanilla_value([1.5], [0.5])


def test_optimal_discriminator_examples():
    assert optimal_discriminator(0.2, 0.2) == 0.5
    assert optimal_discriminator(0.3, 0.1) == pytest.approx(0.75)
    assert optimal_discriminator(0.4, 0.0) == 1.0
    with pytest.raises(ValueError):
        optimal_discriminator(0.0, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 1e6))
def test_optimal_discriminator_half_on_equal_densities(p):
    assert optimal_discriminator(p, p) == 0.5


@pytest.mark.parametrize("p_data, p_g", [(0.7, 0.3), (0.5, 0.5), (0.1, 0.9), (0.25, 0.25)])
def test_optimal_discriminator_maximizes_value_on_grid(p_data, p_g):
    # two-point toy: x in {a, b}, data puts mass on a, generator on b, both densities
    # evaluated at the same point; the pointwise objective is p_data log D + p_g log(1-D)
    grid = np.linspace(1e-4, 1 - 1e-4, 20001)
    objective = p_data * np.log(grid) + p_g * np.log(1 - grid)
    assert grid[objective.argmax()] == pytest.approx(optimal_discriminator(p_data, p_g), abs=1e-4)


# ---------------------------------------------------------------- DCGAN losses


def test_dcgan_generator_loss_examples():
    assert float(dcgan_generator_loss([1.0, 1.0])) == 0.0
    assert float(dcgan_generator_loss(torch.full((3,), 0.5))) == pytest.approx(-LN2, abs=1e-6)
    assert float(dcgan_generator_loss([0.25, 0.75])) == pytest.approx(-0.836988, abs=1e-6)
    assert float(dcgan_generator_loss([0.25, 0.75], "minimization")) == pytest.approx(0.836988, abs=1e-6)


def test_dcgan_discriminator_loss_examples():
    half = torch.full((4,), 0.5)
    assert float(dcgan_discriminator_loss(half, half)) == pytest.approx(-2 * LN2, abs=1e-6)
    assert float(dcgan_discriminator_loss(half, half, "minimization")) == pytest.approx(2 * LN2, abs=1e-6)
    assert float(dcgan_discriminator_loss([1.0], [0.0])) == 0.0
    assert float(dcgan_discriminator_loss([0.9], [0.2])) == pytest.approx(-0.328504, abs=1e-6)


def test_minimization_form_is_binary_cross_entropy():
    d_real, d_fake = torch.tensor([0.8, 0.6]), torch.tensor([0.3, 0.1])
    bce = torch.nn.functional.binary_cross_entropy
    expected = bce(d_real, torch.ones(2)) + bce(d_fake, torch.zeros(2))
    assert float(dcgan_discriminator_loss(d_real, d_fake, "minimization")) == pytest.approx(float(expected), abs=1e-6)


def test_unknown_convention_rejected():
    with pytest.raises(ValueError):
        dcgan_generator_loss([0.5], "maximize")


# ---------------------------------------------------------------- WGAN losses


def test_wgan_generator_loss_examples():
    assert float(wgan_generator_loss(torch.zeros(4))) == 0.0
    assert float(wgan_generator_loss([3.0, -1.0])) == -1.0
    with pytest.raises(ValueError):
        wgan_generator_loss([float("inf")])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(-100, 100))
def test_wgan_losses_are_linear(scores, c):
    s = torch.tensor(scores, dtype=torch.float64)
    assert float(wgan_generator_loss(c * s)) == pytest.approx(c * float(wgan_generator_loss(s)), abs=1e-6)
    diff = float(wgan_critic_loss(s, 2 * s))
    assert float(wgan_critic_loss(c * s, 2 * c * s)) == pytest.approx(c * diff, abs=1e-6)


def test_wgan_critic_loss_examples():
    assert float(wgan_critic_loss([5.0, 5.0], [2.0, 2.0], 0.0)) == -3.0
    assert float(wgan_critic_loss([1.0, -2.0], [1.0, -2.0], 0.0)) == 0.0
    assert float(wgan_critic_loss([0.0], [1.0], 10.0)) == 11.0
    with pytest.raises(ValueError):
        wgan_critic_loss([float("nan")], [0.0], 0.0)


# ---------------------------------------------------------------- gradient penalty


def test_penalty_zero_for_unit_gradient_linear_critic():
    gen = torch.Generator().manual_seed(0)
    w = torch.randn(12, generator=gen, dtype=torch.float64)
    w = w / w.norm()
    real = torch.randn(5, 3, 2, 2, generator=gen, dtype=torch.float64)
    fake = torch.randn(5, 3, 2, 2, generator=gen, dtype=torch.float64)
    for lam in (1.0, 10.0, 100.0):
        gp = gradient_penalty(lambda x: x.reshape(len(x), -1) @ w, GpSample.draw(real, fake, gen), LossConfig(lam))
        assert float(gp) < 1e-8


def test_penalty_equals_lambda_for_constant_critic():
    real = torch.randn(4, 3, 2, 2, dtype=torch.float64)
    gp = gradient_penalty(ConstantCritic(), GpSample.draw(real, torch.zeros_like(real)), LossConfig(10.0))
    assert float(gp) == 10.0


def test_penalty_matches_finite_differences():
    gen = torch.Generator().manual_seed(3)
    real = torch.randn(3, 2, 2, 2, generator=gen, dtype=torch.float64)
    fake = torch.randn(3, 2, 2, 2, generator=gen, dtype=torch.float64)
    critic = SmoothCritic(8, seed=5)
    samples = GpSample.draw(real, fake, gen)
    autodiff = gradient_penalty(critic, samples, LossConfig(10.0)).item()
    oracle = finite_difference_penalty(critic, samples.interpolate, 10.0)
    assert autodiff == pytest.approx(oracle, rel=1e-3)


def test_penalty_is_differentiable_in_critic_parameters():
    critic = SmoothCritic(8, seed=1)
    real = torch.randn(3, 8, dtype=torch.float64)
    gp = gradient_penalty(critic, GpSample.draw(real, -real))
    gp.backward()
    assert critic.w1.grad is not None and torch.isfinite(critic.w1.grad).all()


def test_penalty_symmetric_under_endpoint_swap():
    gen = torch.Generator().manual_seed(8)
    real = torch.randn(6, 8, generator=gen, dtype=torch.float64)
    fake = torch.randn(6, 8, generator=gen, dtype=torch.float64)
    eps = torch.rand(6, generator=gen, dtype=torch.float64)
    critic = SmoothCritic(8, seed=2)
    a = gradient_penalty(critic, GpSample(eps, real, fake))
    b = gradient_penalty(critic, GpSample(1 - eps, fake, real))
    assert a.item() == pytest.approx(b.item(), rel=1e-12)


def test_interpolate_lies_on_segment():
    real = torch.zeros(3, 2)
    fake = torch.ones(3, 2)
    s = GpSample(torch.tensor([0.0, 0.25, 1.0]), real, fake)
    assert torch.allclose(s.interpolate[:, 0], torch.tensor([1.0, 0.75, 0.0]))
    with pytest.raises(ValueError):
        GpSample(torch.tensor([1.5, 0.0, 0.0]), real, fake)


def test_penalty_requires_gradient_path():
    real = torch.randn(2, 4)
    with pytest.raises(ValueError, match="gradient"):
        gradient_penalty(lambda x: torch.zeros(len(x)), GpSample.draw(real, real))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(-1.0)
    assert LossConfig().lambda_gp == 10.0
