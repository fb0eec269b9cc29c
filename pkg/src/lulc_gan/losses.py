"""Adversarial objectives for DCGAN and WGAN-GP training.

Probability-based losses come in two sign conventions. ``"paper_value"``
returns the quantity each player ascends (e.g. ``E[log D(x)] +
E[log(1 - D(G(z)))]``); ``"minimization"`` returns its negation, which is what
the optimizers descend.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import torch

LOG_EPS = 1e-12
CONVENTIONS = ("paper_value", "minimization")


class LogClampWarning(RuntimeWarning):
    """A probability hit 0 or 1 and was clamped before taking its log."""


@dataclass(frozen=True)
class LossConfig:
    lambda_gp: float = 10.0
    sign_convention: str = "minimization"

    def __post_init__(self):
        if self.lambda_gp < 0:
            raise ValueError("lambda_gp must be non-negative")
        if self.sign_convention not in CONVENTIONS:
            raise ValueError(f"sign_convention must be one of {CONVENTIONS}")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.is_floating_point() else x.to(torch.float64)
    return torch.as_tensor(x, dtype=torch.float64)


def _probabilities(p, name: str) -> torch.Tensor:
    p = _as_tensor(p)
    if not torch.isfinite(p).all() or (p < 0).any() or (p > 1).any():
        raise ValueError(f"{name} must contain probabilities in [0, 1]")
    return p


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    if (p < LOG_EPS).any():
        warnings.warn("probability clamped to 1e-12 before log", LogClampWarning, stacklevel=3)
        p = p.clamp(min=LOG_EPS)
    return torch.log(p)


def _signed(value: torch.Tensor, sign_convention: str) -> torch.Tensor:
    if sign_convention not in CONVENTIONS:
        raise ValueError(f"sign_convention must be one of {CONVENTIONS}")
    return value if sign_convention == "paper_value" else -value


def vanilla_value(d_real, d_fake) -> torch.Tensor:
    """The min-max value ``mean(log d_real) + mean(log(1 - d_fake))``."""
    d_real = _probabilities(d_real, "d_real")
    d_fake = _probabilities(d_fake, "d_fake")
    return _safe_log(d_real).mean() + _safe_log(1 - d_fake).mean()


def optimal_discriminator(p_data_at_x, p_g_at_x):
    """Best response ``p_data / (p_data + p_g)`` for fixed densities at ``x``."""
    p_data = _as_tensor(p_data_at_x)
    p_g = _as_tensor(p_g_at_x)
    if (p_data < 0).any() or (p_g < 0).any():
        raise ValueError("densities must be non-negative")
    total = p_data + p_g
    if (total == 0).any():
        raise ValueError("optimal discriminator is undefined where both densities vanish")
    out = p_data / total
    return float(out) if out.ndim == 0 else out


def dcgan_generator_loss(d_fake, sign_convention: str = "paper_value") -> torch.Tensor:
    """``mean(log D(G(z)))``; the minimization form is the non-saturating BCE."""
    d_fake = _probabilities(d_fake, "d_fake")
    return _signed(_safe_log(d_fake).mean(), sign_convention)


def dcgan_discriminator_loss(d_real, d_fake, sign_convention: str = "paper_value") -> torch.Tensor:
    return _signed(vanilla_value(d_real, d_fake), sign_convention)


def wgan_generator_loss(critic_fake) -> torch.Tensor:
    critic_fake = _as_tensor(critic_fake)
    if not torch.isfinite(critic_fake).all():
        raise ValueError("critic scores must be finite")
    return -critic_fake.mean()


def wgan_critic_loss(critic_real, critic_fake, penalty=0.0) -> torch.Tensor:
    """``mean(critic_fake) - mean(critic_real) + penalty`` (minimized by the critic)."""
    critic_real = _as_tensor(critic_real)
    critic_fake = _as_tensor(critic_fake)
    penalty = _as_tensor(penalty)
    for name, t in [("critic_real", critic_real), ("critic_fake", critic_fake), ("penalty", penalty)]:
        if not torch.isfinite(t).all():
            raise ValueError(f"{name} must be finite")
    return critic_fake.mean() - critic_real.mean() + penalty


@dataclass
class GpSample:
    """Per-sample mixing weights and the two end points of each segment.

    ``epsilon`` has one entry per sample; the interpolate is
    ``epsilon * real_point + (1 - epsilon) * fake_point``.
    """

    epsilon: torch.Tensor
    real_point: torch.Tensor
    fake_point: torch.Tensor

    def __post_init__(self):
        if self.real_point.shape != self.fake_point.shape:
            raise ValueError("real and fake points must have the same shape")
        if self.epsilon.shape != (len(self.real_point),):
            raise ValueError("epsilon needs exactly one entry per sample")
        if (self.epsilon < 0).any() or (self.epsilon > 1).any():
            raise ValueError("epsilon must lie in [0, 1]")

    @classmethod
    def draw(cls, real, fake, generator: torch.Generator | None = None) -> "GpSample":
        eps = torch.rand(len(real), generator=generator, dtype=real.dtype, device=real.device)
        return cls(eps, real, fake)

    @property
    def interpolate(self) -> torch.Tensor:
        e = self.epsilon.reshape(-1, *([1] * (self.real_point.ndim - 1)))
        return e * self.real_point + (1 - e) * self.fake_point


def gradient_penalty(
    critic: Callable[[torch.Tensor], torch.Tensor],
    samples: GpSample,
    config: LossConfig = LossConfig(),
) -> torch.Tensor:
    """``lambda * mean((||grad critic(x_hat)||_2 - 1)^2)`` over interpolates.

    The graph is kept so the penalty can be back-propagated into the critic's
    parameters.
    """
    x_hat = samples.interpolate.detach().requires_grad_(True)
    scores = critic(x_hat)
    if not isinstance(scores, torch.Tensor) or not scores.requires_grad:
        raise ValueError("critic output carries no gradient information")
    (grad,) = torch.autograd.grad(
        scores.sum(), x_hat, create_graph=True, allow_unused=True
    )
    if grad is None:
        # output depends on parameters only: the input gradient is identically zero
        grad = torch.zeros_like(x_hat)
    norms = grad.reshape(len(grad), -1).norm(2, dim=1)
    return config.lambda_gp * ((norms - 1) ** 2).mean()
