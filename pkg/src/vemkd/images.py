"""Validation helpers for 4-D image batches in [-1, 1].

Batches are plain ``torch.Tensor``s of shape [batch, channels, height,
width].  Full invariants (square 32/64 images, 1 or 3 channels, finite
values in range) are enforced at pipeline boundaries; the numerical
operations themselves only require shape compatibility so that micro-scale
gradient checks can use small inputs.
"""

import torch

from .errors import ContractViolation

VALID_CHANNELS = (1, 3)
VALID_SIZES = (32, 64)


def check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str = "inputs") -> None:
    if a.shape != b.shape:
        raise ContractViolation(
            f"{what} must have identical shapes, got {tuple(a.shape)} vs {tuple(b.shape)}"
        )


def validate_image_batch(batch: torch.Tensor, name: str = "batch") -> torch.Tensor:
    """Enforce the full image-batch invariant at pipeline boundaries."""
    if batch.dim() != 4:
        raise ContractViolation(f"{name}: expected 4-D [B,C,H,W], got {batch.dim()}-D")
    _, c, h, w = batch.shape
    if c not in VALID_CHANNELS:
        raise ContractViolation(f"{name}: channels must be one of {VALID_CHANNELS}, got {c}")
    if h != w:
        raise ContractViolation(f"{name}: images must be square, got {h}x{w}")
    if h not in VALID_SIZES:
        raise ContractViolation(f"{name}: image size must be one of {VALID_SIZES}, got {h}")
    if not torch.isfinite(batch).all():
        raise ContractViolation(f"{name}: contains non-finite values")
    if batch.min() < -1.0 or batch.max() > 1.0:
        raise ContractViolation(f"{name}: values outside [-1, 1]")
    return batch
