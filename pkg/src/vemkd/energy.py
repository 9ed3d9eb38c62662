"""Joint energy network E(t, s) over teacher/student image pairs.

The network concatenates the two images along channels, downsamples once
with a 3x3 stride-2 average pool, then applies a ConvBlock of width C
followed by residual blocks of widths [2C, 4C, 4C, ...].  A residual block
average-pools its input by 2 whenever its width differs from the previous
block, which keeps the global-average-pool input at least 2x2 for 32x32
images.  Every convolution and linear weight is spectrally normalized via
power iteration with persistent left/right vectors; the vectors are
refreshed once per forward pass in training mode and left untouched in
evaluation mode, so evaluation is a pure function of the parameters.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .determinism import torch_generator
from .errors import ConfigError, ContractViolation
from .images import check_same_shape

SN_EPS = 1e-12


@dataclass(frozen=True)
class EnergyModelConfig:
    base_channels: int = 32
    num_res_blocks: int = 7
    leaky_slope: float = 0.2
    sn_power_iters: int = 1
    input_channels: int = 3

    def validate(self) -> "EnergyModelConfig":
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.num_res_blocks < 1:
            raise ConfigError(f"num_res_blocks must be >= 1, got {self.num_res_blocks}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}")
        if self.sn_power_iters < 1:
            raise ConfigError(f"sn_power_iters must be >= 1, got {self.sn_power_iters}")
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be >= 1, got {self.input_channels}")
        return self


def spectral_normalize(
    weight: torch.Tensor,
    u: torch.Tensor,
    v: torch.Tensor,
    iters: int,
    update: bool = True,
    eps: float = SN_EPS,
) -> torch.Tensor:
    """Divide a 2-D weight by its power-iteration top singular value.

    ``u`` ([out]) and ``v`` ([in]) are the persistent iteration vectors and
    are updated in place when ``update`` is true and ``iters`` > 0.  The
    estimate sigma = u^T W v is clamped below by ``eps`` so the all-zero
    weight degenerates to an all-zero output instead of dividing by zero.
    Gradients flow through W / sigma(W) with u, v treated as constants.
    """
    if weight.dim() != 2:
        raise ContractViolation(f"spectral_normalize expects 2-D weight, got {weight.dim()}-D")
    if update and iters > 0:
        with torch.no_grad():
            for _ in range(iters):
                v.copy_(F.normalize(weight.t().mv(u), dim=0, eps=eps))
                u.copy_(F.normalize(weight.mv(v), dim=0, eps=eps))
    sigma = torch.dot(u, weight.mv(v)).clamp_min(eps)
    return weight / sigma


def _init_weight(shape, rng: torch.Generator, std: float = 0.02) -> torch.Tensor:
    return torch.empty(shape).normal_(0.0, std, generator=rng)


def _warm_up(weight_2d: torch.Tensor, u: torch.Tensor, v: torch.Tensor, iters: int = 15) -> None:
    """Align fresh power-iteration vectors with the top singular pair, so
    evaluation-mode sigma estimates are sane before the first training step."""
    with torch.no_grad():
        spectral_normalize(weight_2d, u, v, iters)


class SNConv2d(nn.Module):
    """3x3/1x1 convolution with spectral normalization on the weight."""

    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, power_iters=1):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.power_iters = power_iters
        self.weight = nn.Parameter(_init_weight((out_ch, in_ch, kernel, kernel), rng))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.register_buffer("u", F.normalize(torch.randn(out_ch, generator=rng), dim=0))
        self.register_buffer("v", F.normalize(torch.randn(in_ch * kernel * kernel, generator=rng), dim=0))
        _warm_up(self.weight.view(out_ch, -1), self.u, self.v)

    def forward(self, x):
        w2d = self.weight.view(self.weight.shape[0], -1)
        wn = spectral_normalize(w2d, self.u, self.v, self.power_iters, update=self.training)
        return F.conv2d(x, wn.view_as(self.weight), self.bias, self.stride, self.padding)


class SNLinear(nn.Module):
    def __init__(self, in_features, out_features, rng, power_iters=1):
        super().__init__()
        self.power_iters = power_iters
        self.weight = nn.Parameter(_init_weight((out_features, in_features), rng))
        self.bias = nn.Parameter(torch.zeros(out_features))
        self.register_buffer("u", F.normalize(torch.randn(out_features, generator=rng), dim=0))
        self.register_buffer("v", F.normalize(torch.randn(in_features, generator=rng), dim=0))
        _warm_up(self.weight, self.u, self.v)

    def forward(self, x):
        wn = spectral_normalize(self.weight, self.u, self.v, self.power_iters, update=self.training)
        return F.linear(x, wn, self.bias)


class _ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, slope, rng, power_iters):
        super().__init__()
        self.conv = SNConv2d(in_ch, out_ch, 3, rng, padding=1, power_iters=power_iters)
        self.slope = slope

    def forward(self, x):
        return F.leaky_relu(self.conv(x), self.slope)


class _ResBlock(nn.Module):
    """Two 3x3 convolutions with a LeakyReLU between them plus a residual
    connection; average-pools by 2 at the input when the width changes."""

    def __init__(self, in_ch, out_ch, slope, rng, power_iters, downsample):
        super().__init__()
        self.downsample = downsample
        self.slope = slope
        self.conv1 = SNConv2d(in_ch, out_ch, 3, rng, padding=1, power_iters=power_iters)
        self.conv2 = SNConv2d(out_ch, out_ch, 3, rng, padding=1, power_iters=power_iters)
        self.skip = None
        if in_ch != out_ch:
            self.skip = SNConv2d(in_ch, out_ch, 1, rng, power_iters=power_iters)

    def forward(self, x):
        if self.downsample:
            x = F.avg_pool2d(x, 2)
        h = self.conv2(F.leaky_relu(self.conv1(x), self.slope))
        shortcut = self.skip(x) if self.skip is not None else x
        return h + shortcut


class EnergyModel(nn.Module):
    """Scalar-per-pair energy network; see the module docstring for layout."""

    def __init__(self, config: EnergyModelConfig, seed: int):
        super().__init__()
        config.validate()
        self.config = config
        rng = torch_generator(seed, "energy_model")
        c = config.base_channels
        it = config.sn_power_iters
        slope = config.leaky_slope
        widths = [2 * c] + [4 * c] * (config.num_res_blocks - 1)
        self.stem = _ConvBlock(2 * config.input_channels, c, slope, rng, it)
        blocks = []
        prev = c
        for w in widths:
            blocks.append(_ResBlock(prev, w, slope, rng, it, downsample=(w != prev)))
            prev = w
        self.blocks = nn.ModuleList(blocks)
        self.head = SNLinear(prev, 1, rng, power_iters=it)

    def forward(self, t: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        check_same_shape(t, s, "energy inputs")
        if t.shape[1] != self.config.input_channels:
            raise ContractViolation(
                f"expected {self.config.input_channels}-channel inputs, got {t.shape[1]}"
            )
        h = torch.cat([t, s], dim=1)
        h = F.avg_pool2d(h, 3, stride=2, padding=1)
        h = self.stem(h)
        for block in self.blocks:
            h = block(h)
        h = F.relu(h)
        h = h.mean(dim=(2, 3))
        return self.head(h).squeeze(-1)


def build_energy_model(config: EnergyModelConfig, seed: int) -> EnergyModel:
    return EnergyModel(config, seed)


def energy(model: EnergyModel, t: torch.Tensor, s: torch.Tensor, training: bool = False) -> torch.Tensor:
    """Per-pair energies; training mode refreshes power-iteration state once."""
    was_training = model.training
    model.train(training)
    try:
        return model(t, s)
    finally:
        model.train(was_training)


def energy_regularizer(energies: torch.Tensor) -> torch.Tensor:
    """Mean squared energy over the batch, used to keep outputs bounded."""
    return energies.pow(2).mean()
