"""Toy image-to-image generators and patch discriminators.

Width-multiplier compression defines students as channel-scaled copies of
the teacher architecture.  Generators use instance normalization and end
in tanh so outputs stay in [-1, 1]; feature taps sit after each
down/upsampling stage so the distillation losses can reach intermediate
activations.  Parameter and MAC counting is analytic from layer shapes.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .determinism import torch_generator
from .errors import ConfigError

FAMILIES = ("unet", "resnet")


@dataclass(frozen=True)
class GeneratorSpec:
    family: str = "unet"
    base_width: int = 32
    width_multiplier: float = 1.0
    in_channels: int = 3
    out_channels: int = 3
    image_size: int = 32

    def validate(self) -> "GeneratorSpec":
        if self.family not in FAMILIES:
            raise ConfigError(f"model.family must be one of {FAMILIES}, got {self.family!r}")
        if self.base_width < 1:
            raise ConfigError(f"model.width must be >= 1, got {self.base_width}")
        if not 0.0 < self.width_multiplier <= 1.0:
            raise ConfigError(
                f"width_multiplier must be in (0, 1], got {self.width_multiplier}"
            )
        if self.image_size < 16 or self.image_size % 8 != 0:
            raise ConfigError(
                f"image_size must be a multiple of 8 and >= 16 (instance norm needs "
                f"a >1x1 bottleneck), got {self.image_size}"
            )
        return self

    @property
    def width(self) -> int:
        return max(1, round(self.base_width * self.width_multiplier))

    def student(self, multiplier: float) -> "GeneratorSpec":
        return GeneratorSpec(
            family=self.family, base_width=self.base_width, width_multiplier=multiplier,
            in_channels=self.in_channels, out_channels=self.out_channels,
            image_size=self.image_size,
        )


@dataclass(frozen=True)
class DiscriminatorSpec:
    depth: int = 3
    base_width: int = 32
    in_channels: int = 6
    taps: tuple = (0, 1, 2)

    def validate(self) -> "DiscriminatorSpec":
        if self.depth < 1:
            raise ConfigError(f"discriminator depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            raise ConfigError(f"discriminator width must be >= 1, got {self.base_width}")
        if any(t < 0 or t >= self.depth for t in self.taps):
            raise ConfigError(f"discriminator taps {self.taps} out of range for depth {self.depth}")
        return self


def _init_module(module: nn.Module, rng: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.copy_(torch.empty_like(m.weight).normal_(0.0, 0.02, generator=rng))
                if m.bias is not None:
                    m.bias.zero_()


def _down(in_ch, out_ch):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1),
        nn.InstanceNorm2d(out_ch),
        nn.LeakyReLU(0.2),
    )


def _up(in_ch, out_ch):
    return nn.Sequential(
        nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1),
        nn.InstanceNorm2d(out_ch),
        nn.ReLU(),
    )


class UNetToy(nn.Module):
    """3 stride-2 encoder stages, 3 decoder stages with skip connections."""

    TAP_NAMES = ("down1", "down2", "down3")

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.width
        self.stem = nn.Sequential(nn.Conv2d(spec.in_channels, w, 3, padding=1), nn.LeakyReLU(0.2))
        self.down1 = _down(w, 2 * w)
        self.down2 = _down(2 * w, 4 * w)
        self.down3 = _down(4 * w, 4 * w)
        self.up1 = _up(4 * w, 4 * w)
        self.up2 = _up(8 * w, 2 * w)
        self.up3 = _up(4 * w, w)
        self.final = nn.Conv2d(2 * w, spec.out_channels, 3, padding=1)
        self.tap_channels = (2 * w, 4 * w, 4 * w)

    def _run(self, x):
        h0 = self.stem(x)
        d1 = self.down1(h0)
        d2 = self.down2(d1)
        d3 = self.down3(d2)
        u1 = torch.cat([self.up1(d3), d2], dim=1)
        u2 = torch.cat([self.up2(u1), d1], dim=1)
        u3 = torch.cat([self.up3(u2), h0], dim=1)
        out = torch.tanh(self.final(u3))
        return out, [d1, d2, d3]

    def forward(self, x):
        return self._run(x)[0]

    def features(self, x):
        return self._run(x)[1]

    def forward_with_features(self, x):
        return self._run(x)


class _GenResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(ch)
        self.norm2 = nn.InstanceNorm2d(ch)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(h))


class ResNetToy(nn.Module):
    """2 downsamples, 4 residual blocks, 2 upsamples."""

    TAP_NAMES = ("down1", "down2", "res4")

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.width
        self.stem = nn.Sequential(nn.Conv2d(spec.in_channels, w, 3, padding=1), nn.ReLU())
        self.down1 = _down(w, 2 * w)
        self.down2 = _down(2 * w, 4 * w)
        self.blocks = nn.Sequential(*[_GenResBlock(4 * w) for _ in range(4)])
        self.up1 = _up(4 * w, 2 * w)
        self.up2 = _up(2 * w, w)
        self.final = nn.Conv2d(w, spec.out_channels, 3, padding=1)
        self.tap_channels = (2 * w, 4 * w, 4 * w)

    def _run(self, x):
        h = self.stem(x)
        d1 = self.down1(h)
        d2 = self.down2(d1)
        r = self.blocks(d2)
        u = self.up2(self.up1(r))
        out = torch.tanh(self.final(u))
        return out, [d1, d2, r]

    def forward(self, x):
        return self._run(x)[0]

    def features(self, x):
        return self._run(x)[1]

    def forward_with_features(self, x):
        return self._run(x)


class PatchDiscriminator(nn.Module):
    """PatchGAN-style stack of stride-2 convolutions ending in a logit map."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        stages = [nn.Sequential(nn.Conv2d(spec.in_channels, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2))]
        ch = w
        for _ in range(spec.depth - 1):
            stages.append(
                nn.Sequential(
                    nn.Conv2d(ch, 2 * ch, 4, stride=2, padding=1),
                    nn.InstanceNorm2d(2 * ch),
                    nn.LeakyReLU(0.2),
                )
            )
            ch *= 2
        self.stages = nn.ModuleList(stages)
        self.final = nn.Conv2d(ch, 1, 4, padding=1)

    def _run(self, x):
        taps = []
        h = x
        for i, stage in enumerate(self.stages):
            h = stage(h)
            if i in self.spec.taps:
                taps.append(h)
        return self.final(h), taps

    def forward(self, x):
        return self._run(x)[0]

    def taps(self, x):
        return self._run(x)[1]

    def forward_with_taps(self, x):
        return self._run(x)


def build_generator(spec: GeneratorSpec, seed: int):
    spec.validate()
    net = UNetToy(spec) if spec.family == "unet" else ResNetToy(spec)
    _init_module(net, torch_generator(seed, f"generator/{spec.family}/{spec.width}"))
    return net


def build_discriminator(spec: DiscriminatorSpec, seed: int):
    spec.validate()
    net = PatchDiscriminator(spec)
    _init_module(net, torch_generator(seed, f"discriminator/{spec.base_width}"))
    return net


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def count_macs(model: nn.Module, image_size: int, in_channels: int = None) -> int:
    """Multiply-accumulate count for one forward pass at batch 1, computed
    analytically from layer shapes captured by a dummy forward."""
    if in_channels is None:
        in_channels = getattr(getattr(model, "spec", None), "in_channels", 3)
    totals = []
    hooks = []

    def conv_hook(mod, inputs, output):
        k = mod.kernel_size[0] * mod.kernel_size[1]
        if isinstance(mod, nn.ConvTranspose2d):
            spatial = inputs[0].shape[2] * inputs[0].shape[3]
        else:
            spatial = output.shape[2] * output.shape[3]
        totals.append(mod.in_channels // mod.groups * mod.out_channels * k * spatial)

    def linear_hook(mod, inputs, output):
        totals.append(mod.in_features * mod.out_features)

    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            hooks.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            hooks.append(m.register_forward_hook(linear_hook))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(1, in_channels, image_size, image_size))
    finally:
        model.train(was_training)
        for h in hooks:
            h.remove()
    return int(sum(totals))
