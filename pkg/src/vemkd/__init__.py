"""Energy-based variational mutual-information distillation for toy GANs."""

__version__ = "0.1.0"
