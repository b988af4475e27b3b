"""DCGAN-style spatial and spatial-temporal discriminators.

``D_s`` sees one probability map (C channels); ``D_st`` sees two consecutive
maps stacked along channels (2C). Both share every layer shape except the
first layer's input channel count, which is what the weight-discrepancy
loss relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import torch
import torch.nn.functional as F
from torch import nn

from .base_network import BaseNetwork
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class DiscConfig:
    input_channels: int
    num_layers: int = 4
    base_channels: int = 16
    slope: float = 0.2
    patch_output: bool = False

    def validate(self) -> "DiscConfig":
        if self.input_channels < 1:
            raise ConfigError("input_channels must be >= 1")
        if self.num_layers < 2:
            raise ConfigError("a discriminator needs at least 2 layers")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        return self

    @property
    def channels(self) -> tuple[int, ...]:
        """Output channels per layer: doubling, then a single-channel classifier."""
        hidden = tuple(self.base_channels * 2**i for i in range(self.num_layers - 1))
        return hidden + (1,)

    @property
    def strides(self) -> tuple[int, ...]:
        return (2,) * (self.num_layers - 1) + (1,)


class Discriminator(BaseNetwork):
    """Strided 3x3 convolutions with leaky ReLUs, global average pooling, sigmoid."""

    def __init__(self, config: DiscConfig, **kwargs: Any) -> None:
        """Initialize the Discriminator.

        Args:
            config (DiscConfig):
                Architecture. ``patch_output`` keeps the final score map instead
                of pooling it to one score per sample.
        """
        super().__init__(**kwargs)
        self.config = config.validate()
        layers = []
        in_channels = config.input_channels
        for out_channels, stride in zip(config.channels, config.strides):
            layers.append(nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1))
            in_channels = out_channels
        self.layers = nn.ModuleList(layers)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def logits(self, inputs: torch.Tensor) -> torch.Tensor:
        """Pre-sigmoid output: ``(N,)``, or ``(N, h, w)`` with patch output."""
        if inputs.dim() != 4 or inputs.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"discriminator expects (N, {self.config.input_channels}, H, W), "
                f"got {tuple(inputs.shape)}"
            )
        x = inputs
        last = len(self.layers) - 1
        for j, conv in enumerate(self.layers):
            x = conv(x)
            if j < last:
                x = F.leaky_relu(x, self.config.slope)
            x = self._checked(f"layers.{j}", x)
        if self.config.patch_output:
            return x[:, 0]
        return x.mean(dim=(1, 2, 3))

    def forward(self, inputs: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(inputs))

    def layer_weight(self, j: int) -> torch.Tensor:
        """Weight tensor of layer ``j`` (1-based, as in the discrepancy loss)."""
        if not 1 <= j <= len(self.layers):
            raise IndexError(f"layer index {j} outside [1, {len(self.layers)}]")
        return self.layers[j - 1].weight


def build_discriminators(
    num_classes: int,
    *,
    num_layers: int = 4,
    base_channels: int = 16,
    slope: float = 0.2,
    patch_output: bool = False,
    seed: int = 0,
) -> tuple[Discriminator, Discriminator]:
    """Build ``(D_s, D_st)`` with seeded scaled-uniform initialization."""
    common = dict(
        num_layers=num_layers, base_channels=base_channels, slope=slope, patch_output=patch_output
    )
    d_s = Discriminator(DiscConfig(input_channels=num_classes, **common))
    d_st = Discriminator(DiscConfig(input_channels=2 * num_classes, **common))
    generator = torch.Generator().manual_seed(seed)
    d_s.init_uniform_(generator)
    d_st.init_uniform_(generator)
    return d_s, d_st


def disc_forward(params: Discriminator, inputs: torch.Tensor) -> torch.Tensor:
    """Score in (0, 1) per sample; differentiable w.r.t. parameters and inputs.

    Raises:
        ShapeError: if the channel count does not match the discriminator.
    """
    return params(inputs)


def stack_pair(p_km1: torch.Tensor, p_k: torch.Tensor) -> torch.Tensor:
    """Channel-stack two consecutive probability maps for ``D_st``."""
    return torch.cat([p_km1, p_k], dim=1)


def shared_layer_indices(d_a: Discriminator, d_b: Discriminator) -> list[int]:
    """1-based indices of layers whose weight shapes agree (all but the first)."""
    if d_a.num_layers != d_b.num_layers:
        raise ShapeError("discriminators have different depths")
    return [
        j
        for j in range(1, d_a.num_layers + 1)
        if d_a.layer_weight(j).shape == d_b.layer_weight(j).shape and j > 1
    ]


def flatten_layer_weights(params: Discriminator, j: int, *, shared_only: bool = True) -> torch.Tensor:
    """Row-major flattening of layer ``j``'s weights, biases excluded.

    Args:
        params (Discriminator):
            Discriminator to read.
        j (int):
            1-based layer index.
        shared_only (bool):
            Restrict ``j`` to the layers whose shapes ``D_s`` and ``D_st`` share
            (2 .. J_total).

    Raises:
        IndexError: if ``j`` is out of range.
    """
    low = 2 if shared_only else 1
    if not low <= j <= params.num_layers:
        raise IndexError(f"layer index {j} outside [{low}, {params.num_layers}]")
    return params.layer_weight(j).reshape(-1)
