import pytest
import torch

from vemkd.datagen import DatasetSpec, generate_shapes_dataset
from vemkd.energy import EnergyModelConfig, build_energy_model

torch.set_num_threads(1)


def finite_difference_grads(loss_fn, tensors, eps=1e-5):
    """Central-difference gradients of a scalar-valued callable with respect
    to each element of the given tensors.  Brute force and independent of
    autograd: the callable is re-evaluated with single entries perturbed.
    """
    grads = []
    for tensor in tensors:
        grad = torch.zeros_like(tensor)
        flat = tensor.data.view(-1)
        gflat = grad.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            f_plus = float(loss_fn())
            flat[i] = orig - eps
            f_minus = float(loss_fn())
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(grad)
    return grads


def relative_grad_error(analytic, numeric):
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    return ((a - n).norm() / n.norm().clamp_min(1e-12)).item()


class QuadraticEnergy(torch.nn.Module):
    """E(t, s) = 0.5 ||t||^2 per sample; analytic stand-in for run_chain tests."""

    def forward(self, t, s):
        return 0.5 * (t**2).sum(dim=(1, 2, 3))


class MicroStudent(torch.nn.Module):
    """Two-conv generator for 8x8 gradient-oracle tests (no normalization)."""

    def __init__(self, channels=1, width=4, seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.conv1 = torch.nn.Conv2d(channels, width, 3, padding=1)
        self.conv2 = torch.nn.Conv2d(width, channels, 3, padding=1)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                conv.weight.copy_(torch.empty_like(conv.weight).normal_(0, 0.2, generator=gen))
                conv.bias.zero_()

    def forward(self, x):
        return torch.tanh(self.conv2(torch.relu(self.conv1(x))))


@pytest.fixture()
def micro_energy_model():
    cfg = EnergyModelConfig(base_channels=4, num_res_blocks=1, input_channels=1)
    return build_energy_model(cfg, seed=0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "shapes"
    generate_shapes_dataset(DatasetSpec(num_train=48, num_val=16, seed=3), root)
    return root


def rand_images(shape, seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    return (torch.rand(shape, generator=gen, dtype=dtype) * 2.0 - 1.0)
