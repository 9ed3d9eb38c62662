"""Algorithm-specific distillation losses and their primitives.

Reduction convention: every term is a mean over batch and elements, so
loss weights are resolution-independent.  Formulations stated with
summed L1 / Frobenius norms are rescaled accordingly: a sum-convention
weight for an [B, C, H, W] term corresponds to (weight * B*C*H*W) here.
Gram matrices are likewise normalized by C*H*W and compared per sample.
"""

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .determinism import torch_generator
from .errors import ConfigError, ContractViolation
from .images import check_same_shape

logger = logging.getLogger(__name__)

ALGORITHMS = ("omgd", "gcc", "gan-compression", "cat", "cagc")


@dataclass(frozen=True)
class DistillConfig:
    algorithm: str = "omgd"
    lambda_cd: float = 1.0
    lambda_tv: float = 1.0
    lambda_ssim: float = 1.0
    lambda_pl: float = 1.0
    lambda_recon: float = 10.0
    lambda_mse: float = 1.0
    lambda_style: float = 1.0
    lambda_distill: float = 1.0
    lambda_ka: float = 1.0
    lambda_lpips: float = 1.0

    def validate(self) -> "DistillConfig":
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"distill.algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        for name in (
            "lambda_cd", "lambda_tv", "lambda_ssim", "lambda_pl", "lambda_recon",
            "lambda_mse", "lambda_style", "lambda_distill", "lambda_ka", "lambda_lpips",
        ):
            if getattr(self, name) < 0:
                raise ConfigError(f"distill.{name} must be >= 0, got {getattr(self, name)}")
        return self


class ChannelAdapters(nn.Module):
    """Trainable 1x1 convolutions matching student feature channels to the
    teacher's, one per tapped layer; owned by the student optimizer."""

    def __init__(self, student_channels, teacher_channels, seed: int = 0):
        super().__init__()
        if len(student_channels) != len(teacher_channels):
            raise ConfigError("adapter channel lists must have equal length")
        rng = torch_generator(seed, "adapters")
        convs = []
        for s_ch, t_ch in zip(student_channels, teacher_channels):
            conv = nn.Conv2d(s_ch, t_ch, 1)
            with torch.no_grad():
                conv.weight.copy_(torch.empty_like(conv.weight).normal_(0.0, 0.02, generator=rng))
                conv.bias.zero_()
            convs.append(conv)
        self.convs = nn.ModuleList(convs)

    def forward(self, features):
        if len(features) != len(self.convs):
            raise ContractViolation(
                f"expected {len(self.convs)} feature maps, got {len(features)}"
            )
        return [conv(f) for conv, f in zip(self.convs, features)]


def l1_mean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    check_same_shape(a, b, "l1 inputs")
    return (a - b).abs().mean()


def attention_loss(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """(1/C) squared distance between spatially averaged channel profiles."""
    if p.shape[1] != q.shape[1]:
        raise ContractViolation(
            f"attention_loss channel mismatch: {p.shape[1]} vs {q.shape[1]}"
        )
    gp = p.mean(dim=(2, 3))
    gq = q.mean(dim=(2, 3))
    return ((gp - gq) ** 2).sum(dim=1).mean() / p.shape[1]


def channel_distill_loss(teacher_feats, student_feats, adapters: ChannelAdapters) -> torch.Tensor:
    if len(teacher_feats) != len(student_feats):
        raise ContractViolation(
            f"feature set layer counts differ: {len(teacher_feats)} vs {len(student_feats)}"
        )
    adapted = adapters(student_feats)
    for t_f, a_f in zip(teacher_feats, adapted):
        if t_f.shape[1] != a_f.shape[1]:
            raise ContractViolation(
                f"adapter produced {a_f.shape[1]} channels, teacher has {t_f.shape[1]}"
            )
    total = teacher_feats[0].new_zeros(())
    for t_f, a_f in zip(teacher_feats, adapted):
        total = total + attention_loss(t_f, a_f)
    return total


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return g.outer(g)


def ssim(x: torch.Tensor, y: torch.Tensor, window_size: int = 11, sigma: float = 1.5,
         value_range: float = 2.0) -> torch.Tensor:
    """Mean structural similarity with a Gaussian window.

    Stabilizers are (0.01*R)^2 and (0.03*R)^2 with R = 2 for [-1, 1]
    images.  Windows larger than the image are shrunk with a warning.
    """
    check_same_shape(x, y, "ssim inputs")
    b, c, h, w = x.shape
    if window_size > min(h, w):
        logger.warning("ssim window %d larger than image %dx%d; shrinking", window_size, h, w)
        window_size = min(h, w)
    win = _gaussian_window(window_size, sigma, x.dtype, x.device)
    kernel = win.expand(c, 1, window_size, window_size)
    c1 = (0.01 * value_range) ** 2
    c2 = (0.03 * value_range) ** 2

    def filt(z):
        return F.conv2d(z, kernel, groups=c)

    mu_x = filt(x)
    mu_y = filt(y)
    var_x = filt(x * x) - mu_x**2
    var_y = filt(y * y) - mu_y**2
    cov = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return (num / den).mean()


def total_variation(x: torch.Tensor) -> torch.Tensor:
    """Anisotropic L1 total variation, mean-normalized per element."""
    if x.dim() != 4:
        raise ContractViolation(f"total_variation expects 4-D input, got {x.dim()}-D")
    dh = (x[:, :, 1:, :] - x[:, :, :-1, :]).abs().sum(dim=(1, 2, 3))
    dw = (x[:, :, :, 1:] - x[:, :, :, :-1]).abs().sum(dim=(1, 2, 3))
    numel = x.shape[1] * x.shape[2] * x.shape[3]
    return ((dh + dw) / numel).mean()


def perceptual_loss(x: torch.Tensor, y: torch.Tensor, embedder) -> torch.Tensor:
    """Mean squared distance between frozen-embedder feature maps, summed
    over the embedder's tapped layers."""
    check_same_shape(x, y, "perceptual inputs")
    fx = embedder.features(x)
    fy = embedder.features(y)
    total = x.new_zeros(())
    for a, b in zip(fx, fy):
        total = total + ((a - b) ** 2).mean()
    return total


def omgd_loss(teacher_out, student_out, teacher_feats, student_feats,
              adapters: ChannelAdapters, cfg: DistillConfig, embedder) -> torch.Tensor:
    loss = student_out.new_zeros(())
    if cfg.lambda_ssim > 0:
        loss = loss + cfg.lambda_ssim * (1.0 - ssim(student_out, teacher_out))
    if cfg.lambda_pl > 0:
        loss = loss + cfg.lambda_pl * perceptual_loss(student_out, teacher_out, embedder)
    if cfg.lambda_recon > 0:
        loss = loss + cfg.lambda_recon * l1_mean(student_out, teacher_out)
    if cfg.lambda_cd > 0:
        loss = loss + cfg.lambda_cd * channel_distill_loss(teacher_feats, student_feats, adapters)
    if cfg.lambda_tv > 0:
        loss = loss + cfg.lambda_tv * total_variation(student_out)
    return loss


def gram_per_sample(x: torch.Tensor) -> torch.Tensor:
    """[B, C, C] channel Gram matrices normalized by C*H*W."""
    b, c, h, w = x.shape
    flat = x.reshape(b, c, h * w)
    return flat @ flat.transpose(1, 2) / (c * h * w)


def gram(x: torch.Tensor) -> torch.Tensor:
    """Batch-averaged [C, C] Gram matrix."""
    return gram_per_sample(x).mean(dim=0)


def gcc_distance(x: torch.Tensor, y: torch.Tensor, lambda_mse: float, lambda_style: float) -> torch.Tensor:
    """Weighted MSE plus Gram-matrix style distance, both element-means."""
    check_same_shape(x, y, "gcc_distance inputs")
    dist = lambda_mse * ((x - y) ** 2).mean()
    if lambda_style > 0:
        dg = gram_per_sample(x) - gram_per_sample(y)
        dist = dist + lambda_style * (dg**2).mean()
    return dist


def gcc_loss(teacher_out, student_out, disc_feats_teacher, disc_feats_student,
             teacher_feats, student_feats, adapters: ChannelAdapters,
             cfg: DistillConfig) -> torch.Tensor:
    """Discriminator-feature + generator-feature distances + reconstruction.

    disc_feats_* are the teacher discriminator's tapped activations for the
    teacher and student outputs; the adversarial term itself is added by
    the trainer.
    """
    if len(disc_feats_teacher) != len(disc_feats_student):
        raise ConfigError("discriminator tap counts differ between teacher and student passes")
    loss = student_out.new_zeros(())
    for dt, ds in zip(disc_feats_teacher, disc_feats_student):
        loss = loss + gcc_distance(ds, dt, cfg.lambda_mse, cfg.lambda_style)
    adapted = adapters(student_feats)
    for t_f, a_f in zip(teacher_feats, adapted):
        loss = loss + gcc_distance(a_f, t_f, cfg.lambda_mse, cfg.lambda_style)
    if cfg.lambda_recon > 0:
        loss = loss + cfg.lambda_recon * l1_mean(student_out, teacher_out)
    return loss


def gan_compression_loss(student_out, teacher_out, teacher_feats, student_feats,
                         adapters: ChannelAdapters, cfg: DistillConfig,
                         ground_truth=None, paired: bool = True) -> torch.Tensor:
    if paired and ground_truth is None:
        raise ConfigError("paired gan-compression loss requires ground-truth targets")
    target = ground_truth if paired else teacher_out
    loss = cfg.lambda_recon * l1_mean(student_out, target)
    if cfg.lambda_distill > 0:
        adapted = adapters(student_feats)
        for t_f, a_f in zip(teacher_feats, adapted):
            loss = loss + cfg.lambda_distill * ((a_f - t_f) ** 2).mean()
    return loss


def ka_alignment(s_feat: torch.Tensor, t_feat: torch.Tensor) -> torch.Tensor:
    """Normalized kernel alignment of two feature maps, in [0, 1].

    Computed via the [n, n] Gram kernels of the flattened features, which
    equals ||rho(S)^T rho(T)||_F^2 / (||rho(S)^T rho(S)||_F ||rho(T)^T rho(T)||_F)
    without materializing the (chw x chw) cross products; the kernel form
    also accepts maps whose channel or spatial sizes differ.
    """
    if s_feat.shape[0] != t_feat.shape[0]:
        raise ContractViolation(
            f"ka_alignment batch mismatch: {s_feat.shape[0]} vs {t_feat.shape[0]}"
        )
    fs = s_feat.reshape(s_feat.shape[0], -1)
    ft = t_feat.reshape(t_feat.shape[0], -1)
    ks = fs @ fs.t()
    kt = ft @ ft.t()
    num = (ks * kt).sum()  # tr(Ks Kt) = ||rho(S)^T rho(T)||_F^2
    den = ks.norm() * kt.norm()
    if den == 0:
        logger.warning("ka_alignment got a zero-norm feature map; defining alignment as 0")
        return s_feat.new_zeros(())
    return num / den


def cat_ka_loss(teacher_feats, student_feats) -> torch.Tensor:
    """Negative kernel alignment summed over layers (the CAT layer loss)."""
    loss = student_feats[0].new_zeros(())
    for s_f, t_f in zip(student_feats, teacher_feats):
        loss = loss - ka_alignment(s_f, t_f)
    return loss


def _check_binary(mask: torch.Tensor) -> None:
    if not torch.logical_or(mask == 0, mask == 1).all():
        raise ContractViolation("cagc mask must be binary (all entries 0 or 1)")


def cagc_loss(teacher_out, student_out, teacher_feats, student_feats,
              adapters: ChannelAdapters, mask: torch.Tensor, cfg: DistillConfig,
              embedder) -> torch.Tensor:
    """Masked reconstruction + masked feature distillation + masked
    perceptual distance; masks are caller-supplied and downsampled to
    feature resolution by nearest neighbor (binarity preserved)."""
    _check_binary(mask)
    loss = cfg.lambda_recon * l1_mean(mask * student_out, mask * teacher_out)
    if cfg.lambda_distill > 0:
        adapted = adapters(student_feats)
        for t_f, a_f in zip(teacher_feats, adapted):
            m = F.interpolate(mask, size=t_f.shape[2:], mode="nearest")
            loss = loss + cfg.lambda_distill * l1_mean(m * a_f, m * t_f)
    if cfg.lambda_lpips > 0:
        loss = loss + cfg.lambda_lpips * perceptual_loss(mask * student_out, mask * teacher_out, embedder)
    return loss
