"""Desk-scale evaluation: toy Fréchet distance plus SSIM/L1/PSNR.

Features come from a fixed random-weight convolutional embedder whose
parameters are regenerated from a seed committed here (numpy PCG64, so the
stream is stable across platforms) and pinned by checksum.  Scores are
therefore reproducible and meaningful for relative comparisons between
runs, but are NOT comparable to published FID numbers from pretrained
Inception features.
"""

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import nets, sampler
from .datagen import load_split
from .errors import ContractViolation, NumericalAbort

logger = logging.getLogger(__name__)

EMBEDDER_SEED = 7012
EMBEDDER_DIM = 64
#: sha256 over the embedder's float32 parameter bytes, in build order.
EMBEDDER_PARAM_SHA256 = "3d720cd73eb8215ff08867f20050e7382ade6b50e950047c41b69902f7454a0d"
#: sha256 over float64 features of the fixed probe batch.
EMBEDDER_PROBE_SHA256 = "e4c5f21c00407a4701376f223cc6d3baba354535faaa2b2f3cf0e83e7af73457"


class ToyEmbedder(nn.Module):
    """Four stride-2 conv stages, LeakyReLU, global average pool to 64-d."""

    def __init__(self):
        super().__init__()
        widths = (3, 16, 32, 64, EMBEDDER_DIM)
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(4)
        )
        rng = np.random.default_rng(EMBEDDER_SEED)
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.in_channels * 9
                std = float(np.sqrt(2.0 / fan_in))
                w = rng.standard_normal(tuple(conv.weight.shape)) * std
                conv.weight.copy_(torch.from_numpy(w.astype(np.float32)))
                conv.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def features(self, x: torch.Tensor) -> list:
        """Per-stage activations (used by the perceptual loss)."""
        feats = []
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)[-1].mean(dim=(2, 3))


def build_toy_embedder() -> ToyEmbedder:
    return ToyEmbedder()


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for p in module.parameters():
        h.update(p.detach().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def probe_batch() -> torch.Tensor:
    rng = np.random.default_rng(EMBEDDER_SEED + 1)
    arr = rng.uniform(-1.0, 1.0, size=(4, 3, 32, 32)).astype(np.float32)
    return torch.from_numpy(arr)


def embed(batches, embedder: ToyEmbedder) -> np.ndarray:
    """[N, d] float64 features; accepts a tensor or an iterable of batches."""
    if isinstance(batches, torch.Tensor):
        batches = torch.split(batches, 64)
    out = []
    with torch.no_grad():
        for batch in batches:
            out.append(embedder(batch).numpy().astype(np.float64))
    return np.concatenate(out, axis=0)


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "GaussianStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2:
            raise ContractViolation(f"features must be [N, d], got shape {feats.shape}")
        n, d = feats.shape
        if n < d + 1:
            logger.warning("estimating %d-d Gaussian stats from only %d samples", d, n)
        mean = feats.mean(axis=0)
        cov = np.atleast_2d(np.cov(feats, rowvar=False))
        return cls(mean=mean, cov=cov, count=n)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    clipped = np.clip(vals, 0.0, None)
    if vals.min() < -1e-8:
        logger.warning("clipped negative eigenvalue of magnitude %.3e", -vals.min())
    return (vecs * np.sqrt(clipped)) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)).

    The matrix square root is taken by eigendecomposition of the
    symmetrized product, clipping negative eigenvalues at zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ContractViolation(
            f"feature dimensions differ: {a.mean.shape} vs {b.mean.shape}"
        )
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    trace_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    fid = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt)
    if not np.isfinite(fid):
        cond_a = np.linalg.cond(a.cov)
        cond_b = np.linalg.cond(b.cov)
        raise NumericalAbort(
            f"non-finite Frechet distance (cond(cov_a)={cond_a:.3e}, cond(cov_b)={cond_b:.3e})"
        )
    return max(fid, 0.0)


def _psnr(mse: float, value_range: float = 2.0) -> float:
    return float(10.0 * np.log10(value_range**2 / max(mse, 1e-12)))


def evaluate(student, manifest: dict, embedder: ToyEmbedder, reference: str = "target",
             teacher=None, split: str = "val", batch_size: int = 64) -> dict:
    """Single-forward-pass evaluation of a student generator.

    reference='target' scores outputs against the ground-truth images;
    reference='teacher' scores them against teacher outputs (requires
    ``teacher``).  Never invokes the MCMC sampler; the report carries the
    sampler invocation count observed during evaluation as proof.
    """
    from .losses import ssim as ssim_fn  # local import avoids a cycle

    invocations_before = sampler.invocation_counter.count
    x, y = load_split(manifest, split)
    was_training = student.training
    student.eval()
    outputs = []
    with torch.no_grad():
        for chunk in torch.split(x, batch_size):
            outputs.append(student(chunk))
    student.train(was_training)
    out = torch.cat(outputs, dim=0)

    if reference == "teacher":
        if teacher is None:
            raise ContractViolation("reference='teacher' requires a teacher generator")
        ref_img = []
        with torch.no_grad():
            for chunk in torch.split(x, batch_size):
                ref_img.append(teacher(chunk))
        ref = torch.cat(ref_img, dim=0)
    else:
        ref = y

    stats_out = GaussianStats.from_features(embed(out, embedder))
    stats_ref = GaussianStats.from_features(embed(ref, embedder))
    mse = float(((out - ref) ** 2).mean())
    with torch.no_grad():
        ssim_total = 0.0
        for o_chunk, r_chunk in zip(torch.split(out, batch_size), torch.split(ref, batch_size)):
            ssim_total += float(ssim_fn(o_chunk, r_chunk)) * o_chunk.shape[0]
    report = {
        "toy_fid": frechet_distance(stats_out, stats_ref),
        "ssim_to_target": ssim_total / out.shape[0],
        "l1_to_target": float((out - ref).abs().mean()),
        "psnr": _psnr(mse),
        "params": nets.count_params(student),
        "macs": nets.count_macs(student, manifest["image_size"]),
        "num_images": int(out.shape[0]),
        "sampler_invocations": sampler.invocation_counter.count - invocations_before,
    }
    return report
