from __future__ import annotations

import math

import torch
from docstring_inheritance import GoogleDocstringInheritanceInitMeta
from torch import nn

from .errors import NumericalError


class BaseNetwork(nn.Module, metaclass=GoogleDocstringInheritanceInitMeta):
    """
    Base class for the trainable networks.

    Provides what the segmentation model and the discriminators share:
        - finite checks on intermediate activations, raising NumericalError
          with the layer name;
        - deterministic scaled-uniform initialization from a seeded generator;
        - listing of convolutional layers in definition order.
    """

    def __init__(self, *, check_finite: bool = True) -> None:
        """Initialize the BaseNetwork.

        Args:
            check_finite (bool):
                Whether forward passes verify every intermediate activation.
        """
        super().__init__()
        self.check_finite = check_finite

    def _checked(self, name: str, tensor: torch.Tensor) -> torch.Tensor:
        if self.check_finite and not bool(torch.isfinite(tensor).all()):
            raise NumericalError(f"{type(self).__name__}.{name}")
        return tensor

    def conv_layers(self) -> list[tuple[str, nn.Conv2d]]:
        """Convolutional layers as ``(qualified name, module)`` in definition order."""
        return [
            (name, module)
            for name, module in self.named_modules()
            if isinstance(module, nn.Conv2d)
        ]

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @torch.no_grad()
    def init_uniform_(self, generator: torch.Generator) -> None:
        """Draw every conv weight and bias from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        for _, conv in self.conv_layers():
            fan_in = conv.in_channels // conv.groups * math.prod(conv.kernel_size)
            bound = 1.0 / math.sqrt(fan_in)
            conv.weight.uniform_(-bound, bound, generator=generator)
            if conv.bias is not None:
                conv.bias.uniform_(-bound, bound, generator=generator)
