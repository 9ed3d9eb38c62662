"""Short-run Langevin MCMC over the energy model's first argument.

Each step moves the sample down the energy gradient by step_size/2 and adds
Gaussian noise of standard deviation noise_std.  The drift step size and
the noise scale are deliberately decoupled (the reported settings, step
size 100 or 50 with noise 0.005, are inconsistent with a single shared
scale), and samples are clamped back into the image range after every step
by default.  Gradients never propagate into the energy model's parameters:
the chain output is a constant for all downstream losses.

The module keeps a global invocation counter so the evaluation pipeline
can assert that inference never runs a chain.
"""

from dataclasses import dataclass, field
from typing import Optional

import torch

from .errors import ConfigError, ContractViolation, SamplerDivergence

INIT_STRATEGIES = ("student", "teacher", "persistent", "uniform")


class _InvocationCounter:
    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


#: incremented once per run_chain call; evaluation asserts it stays flat.
invocation_counter = _InvocationCounter()


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 10
    step_size: float = 100.0
    noise_std: float = 0.005
    init_strategy: str = "student"
    clamp_range: Optional[tuple] = (-1.0, 1.0)

    def validate(self) -> "SamplerConfig":
        if self.num_steps < 1:
            raise ConfigError(f"sampler.steps must be >= 1, got {self.num_steps}")
        if self.step_size <= 0:
            raise ConfigError(f"sampler.step_size must be > 0, got {self.step_size}")
        if self.noise_std < 0:
            raise ConfigError(f"sampler.noise_std must be >= 0, got {self.noise_std}")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ConfigError(
                f"sampler.init must be one of {INIT_STRATEGIES}, got {self.init_strategy!r}"
            )
        if self.clamp_range is not None:
            lo, hi = self.clamp_range
            if not lo < hi:
                raise ConfigError(f"sampler.clamp must be (lo, hi) with lo < hi, got {self.clamp_range}")
        return self


@dataclass
class SampleChain:
    final: torch.Tensor
    energies: list = field(default_factory=list)
    init: torch.Tensor = None


class PersistentBuffer:
    """Fixed-capacity store of chain states for persistent initialization.

    Only the entries fetched for the current batch are updated at
    write-back; fetched entries are re-drawn from uniform noise with
    probability ``reinit_prob``.  Mutation requires exclusive access.
    """

    def __init__(self, capacity: int, image_shape: tuple, reinit_prob: float = 0.05,
                 rng: Optional[torch.Generator] = None):
        if capacity < 1:
            raise ConfigError(f"buffer capacity must be >= 1, got {capacity}")
        if not 0.0 <= reinit_prob <= 1.0:
            raise ConfigError(f"buffer reinit_prob must be in [0, 1], got {reinit_prob}")
        self.capacity = capacity
        self.reinit_prob = reinit_prob
        if rng is None:
            self.slots = torch.zeros((capacity, *image_shape))
        else:
            self.slots = torch.empty((capacity, *image_shape)).uniform_(-1.0, 1.0, generator=rng)
        self._last_indices: Optional[torch.Tensor] = None

    def fetch(self, batch: int, rng: torch.Generator) -> torch.Tensor:
        if batch <= self.capacity:
            idx = torch.randperm(self.capacity, generator=rng)[:batch]
        else:
            idx = torch.randint(self.capacity, (batch,), generator=rng)
        out = self.slots[idx].clone()
        if self.reinit_prob > 0:
            mask = torch.rand(batch, generator=rng) < self.reinit_prob
            if mask.any():
                noise = torch.empty_like(out[mask]).uniform_(-1.0, 1.0, generator=rng)
                out[mask] = noise
        self._last_indices = idx
        return out

    def store_finals(self, finals: torch.Tensor) -> None:
        if self._last_indices is None:
            raise ContractViolation("store_finals called before fetch")
        self.slots[self._last_indices] = finals.detach()
        self._last_indices = None


def buffer_fetch(buf: PersistentBuffer, batch: int, rng: torch.Generator) -> torch.Tensor:
    return buf.fetch(batch, rng)


def _energy_and_grad(model, t, s):
    with torch.enable_grad():
        t_req = t.detach().requires_grad_(True)
        energies = model(t_req, s)
        (grad,) = torch.autograd.grad(energies.sum(), t_req)
    return energies.detach(), grad


def langevin_step(
    t: torch.Tensor,
    s: torch.Tensor,
    model,
    step_size: float,
    noise_std: float,
    rng: torch.Generator,
    clamp_range: Optional[tuple] = None,
    step_index: int = 0,
) -> torch.Tensor:
    """One update t <- t - (step_size/2) * dE/dt + N(0, noise_std^2)."""
    if t.shape != s.shape:
        raise ContractViolation(f"langevin inputs differ in shape: {tuple(t.shape)} vs {tuple(s.shape)}")
    if step_size <= 0:
        raise ContractViolation(f"step_size must be > 0, got {step_size}")
    _, grad = _energy_and_grad(model, t, s)
    if not torch.isfinite(grad).all():
        raise SamplerDivergence(
            f"non-finite energy gradient at Langevin step {step_index}", step_index=step_index
        )
    new = t.detach() - 0.5 * step_size * grad
    if noise_std > 0:
        new = new + noise_std * torch.randn(t.shape, generator=rng, dtype=t.dtype)
    if clamp_range is not None:
        new = new.clamp(clamp_range[0], clamp_range[1])
    return new


def run_chain(
    s: torch.Tensor,
    model,
    cfg: SamplerConfig,
    init_source=None,
    rng: Optional[torch.Generator] = None,
) -> SampleChain:
    """Run num_steps Langevin updates from the configured initial state.

    init_source is the student batch itself for 'student', a teacher-output
    batch for 'teacher', a PersistentBuffer for 'persistent', and unused
    for 'uniform'.  Mean energy is recorded before the first step and after
    every step (num_steps + 1 entries).  For the persistent strategy the
    finals are written back into the buffer.
    """
    cfg.validate()
    invocation_counter.count += 1
    s = s.detach()
    buffer = None
    if cfg.init_strategy == "student":
        init = s.clone()
    elif cfg.init_strategy == "teacher":
        if not isinstance(init_source, torch.Tensor):
            raise ConfigError("init strategy 'teacher' requires a teacher-output batch")
        if init_source.shape != s.shape:
            raise ContractViolation("teacher init batch shape differs from student batch")
        init = init_source.detach().clone()
    elif cfg.init_strategy == "persistent":
        if not isinstance(init_source, PersistentBuffer):
            raise ConfigError("init strategy 'persistent' requires a PersistentBuffer")
        buffer = init_source
        init = buffer.fetch(s.shape[0], rng)
    else:  # uniform
        init = torch.empty_like(s).uniform_(-1.0, 1.0, generator=rng)

    # the EBM runs in eval mode during sampling so MCMC cannot perturb the
    # power-iteration state
    is_module = isinstance(model, torch.nn.Module)
    was_training = model.training if is_module else False
    if is_module:
        model.eval()
    try:
        current = init
        energies = []
        for k in range(cfg.num_steps):
            e, grad = _energy_and_grad(model, current, s)
            energies.append(e.mean().item())
            if not torch.isfinite(grad).all():
                raise SamplerDivergence(
                    f"non-finite energy gradient at Langevin step {k}", step_index=k
                )
            current = current.detach() - 0.5 * cfg.step_size * grad
            if cfg.noise_std > 0:
                current = current + cfg.noise_std * torch.randn(
                    current.shape, generator=rng, dtype=current.dtype
                )
            if cfg.clamp_range is not None:
                current = current.clamp(cfg.clamp_range[0], cfg.clamp_range[1])
        with torch.no_grad():
            energies.append(model(current, s).mean().item())
    finally:
        if is_module:
            model.train(was_training)

    if buffer is not None:
        buffer.store_finals(current)
    return SampleChain(final=current.detach(), energies=energies, init=init)
