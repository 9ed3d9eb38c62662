"""Contrastive objectives for the variational model and the student.

The energy model minimizes  mean E(t, s) - mean E(t~, s)  plus a squared-
output regularizer; its parameter gradient is the difference of positive-
and negative-phase energy gradients.  The student minimizes the same
contrast with the energy parameters frozen, which (up to the constant
entropy of the teacher variable) maximizes the variational lower bound on
the mutual information between teacher and student outputs.  Negatives t~
are always treated as constants: they are reused from the sampler step of
the same iteration, never differentiated through.

A fully-factorized Gaussian head is provided as the baseline variational
family, and a scalar quadratic-energy harness checks that contrastive
training with exact sampling recovers a known linear-Gaussian conditional.
"""

import contextlib
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .determinism import torch_generator
from .errors import ConfigError
from .images import check_same_shape

TARGET_SOURCES = ("real", "teacher")
VARIATIONAL_FAMILIES = ("ebm", "vid-gaussian")


@dataclass(frozen=True)
class VEMConfig:
    lambda_mi: float = 0.1
    alpha_reg: float = 1.0
    target_source: str = "real"
    variational: str = "ebm"
    enabled: bool = True

    def validate(self) -> "VEMConfig":
        if self.lambda_mi < 0:
            raise ConfigError(f"vem.lambda_mi must be >= 0, got {self.lambda_mi}")
        if self.alpha_reg < 0:
            raise ConfigError(f"vem.alpha_reg must be >= 0, got {self.alpha_reg}")
        if self.target_source not in TARGET_SOURCES:
            raise ConfigError(f"vem.target_source must be one of {TARGET_SOURCES}")
        if self.variational not in VARIATIONAL_FAMILIES:
            raise ConfigError(f"vem.variational must be one of {VARIATIONAL_FAMILIES}")
        return self


@contextlib.contextmanager
def frozen_params(module: nn.Module):
    """Temporarily stop gradient accumulation into a module's parameters."""
    states = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, state in zip(module.parameters(), states):
            p.requires_grad_(state)


def ebm_loss(model, t, s, t_neg, alpha_reg: float = 0.0) -> torch.Tensor:
    """Contrastive energy objective plus squared-output regularization.

    All three image arguments are detached: the loss trains only the
    energy parameters.  Positive and negative pairs go through a single
    forward pass so training mode refreshes power iteration exactly once.
    """
    check_same_shape(t, s, "ebm_loss t/s")
    check_same_shape(t_neg, s, "ebm_loss negatives/s")
    t = t.detach()
    s = s.detach()
    t_neg = t_neg.detach()
    energies = model(torch.cat([t, t_neg], dim=0), torch.cat([s, s], dim=0))
    e_pos, e_neg = energies.chunk(2, dim=0)
    loss = e_pos.mean() - e_neg.mean()
    if alpha_reg > 0:
        loss = loss + alpha_reg * (e_pos.pow(2).mean() + e_neg.pow(2).mean())
    return loss


def student_mi_surrogate(model, t, s, t_neg) -> torch.Tensor:
    """mean E(t, s) - mean E(t~, s) with gradient flowing only through s.

    Minimizing this over the student parameters maximizes the variational
    lower bound on I(T;S) up to the constant H(T).  The energy model is
    evaluated frozen and in eval mode so the student step cannot touch its
    parameters or power-iteration state.
    """
    check_same_shape(t, s, "mi_surrogate t/s")
    check_same_shape(t_neg, s, "mi_surrogate negatives/s")
    was_training = model.training
    model.eval()
    try:
        with frozen_params(model):
            # two separate forwards, so t_neg == t cancels exactly
            e_pos = model(t.detach(), s)
            e_neg = model(t_neg.detach(), s)
    finally:
        model.train(was_training)
    return e_pos.mean() - e_neg.mean()


def combined_student_loss(l_algo, mi_surrogate, lambda_mi: float):
    if lambda_mi < 0:
        raise ConfigError(f"lambda_mi must be >= 0, got {lambda_mi}")
    return l_algo + lambda_mi * mi_surrogate


class GaussianVariationalHead(nn.Module):
    """Fully-factorized Gaussian conditional: mean from two 3x3 convs on
    the student output, one learnable scale per channel."""

    def __init__(self, channels: int, hidden: int = 16, seed: int = 0):
        super().__init__()
        rng = torch_generator(seed, "vid_head")
        self.conv1 = nn.Conv2d(channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, channels, 3, padding=1)
        for conv in (self.conv1, self.conv2):
            with torch.no_grad():
                conv.weight.copy_(torch.empty_like(conv.weight).normal_(0.0, 0.02, generator=rng))
                conv.bias.zero_()
        self.raw_scale = nn.Parameter(torch.full((channels,), _inverse_softplus(1.0)))

    def mean(self, s: torch.Tensor) -> torch.Tensor:
        return self.conv2(F.leaky_relu(self.conv1(s), 0.2))

    def sigma(self) -> torch.Tensor:
        return F.softplus(self.raw_scale)

    def set_sigma(self, value: float) -> None:
        """Pin the per-channel scale so softplus(raw) reproduces ``value``
        bitwise (nudges the raw value by ulps until it does)."""
        raw = _inverse_softplus(value)
        for _ in range(8):
            got = F.softplus(torch.tensor(raw, dtype=self.raw_scale.dtype)).item()
            if got == value:
                break
            raw = math.nextafter(raw, math.inf if got < value else -math.inf)
        with torch.no_grad():
            self.raw_scale.fill_(raw)


def _inverse_softplus(y: float) -> float:
    return math.log(math.expm1(y))


def gaussian_nll(t: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Per-element mean of log sigma_c + (t - mu)^2 / (2 sigma_c^2)."""
    check_same_shape(t, mu, "gaussian_nll t/mu")
    sig = sigma.view(1, -1, 1, 1)
    return (torch.log(sig) + (t - mu) ** 2 / (2.0 * sig**2)).mean()


def vid_nll(head: GaussianVariationalHead, t: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Negative log likelihood of the factorized-Gaussian baseline; used
    both to train the head and as the student's surrogate in that path."""
    check_same_shape(t, s, "vid_nll t/s")
    return gaussian_nll(t, head.mean(s), head.sigma())


@dataclass
class Fit1D:
    a: float
    b: float
    sigma: float


def kl_gap_estimate_1d(
    t: torch.Tensor,
    s: torch.Tensor,
    steps: int = 1500,
    lr: float = 0.05,
    seed: int = 0,
) -> Fit1D:
    """Fit the quadratic energy E(t,s) = (t - a s - b)^2 / (2 sigma^2) to
    scalar pairs by the contrastive objective with exact Gaussian sampling
    in place of MCMC.  Recovers the linear-Gaussian conditional when the
    data follow one; a tractable harness, not a runtime component.
    """
    t = t.detach().double().flatten()
    s = s.detach().double().flatten()
    rng = torch_generator(seed, "kl_gap_1d")
    a = torch.zeros((), dtype=torch.float64, requires_grad=True)
    b = torch.zeros((), dtype=torch.float64, requires_grad=True)
    log_sigma = torch.zeros((), dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([a, b, log_sigma], lr=lr)
    for _ in range(steps):
        sigma = log_sigma.exp()
        with torch.no_grad():
            noise = torch.randn(s.shape, generator=rng, dtype=torch.float64)
            t_neg = a * s + b + sigma * noise
        e_pos = (t - a * s - b) ** 2 / (2.0 * sigma**2)
        e_neg = (t_neg - a * s - b) ** 2 / (2.0 * sigma**2)
        loss = e_pos.mean() - e_neg.mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return Fit1D(a=a.item(), b=b.item(), sigma=log_sigma.exp().item())
