"""Convolutional spatial encoder.

Maps a single-channel image to a low-dimensional grid of local features
by alternating 3x3 convolutions, ReLU activations, and 2x2 max pooling.
The default layout is the 13-conv/5-pool VGG16 feature extractor (the
fully connected tail is excluded): a 224x224 input comes out as a
7x7x512 feature map.

Tensor conventions: images are (H, W) or (B, H, W) floats in [0, 1];
feature maps are channels-first, (z, r, r) or (B, z, r, r).
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConfigError, DimensionError

# 13 convolutions in 5 stages, each stage followed by a 2x2/stride-2 pool.
VGG16_STAGES: tuple[tuple[int, ...], ...] = (
    (64, 64),
    (128, 128),
    (256, 256, 256),
    (512, 512, 512),
    (512, 512, 512),
)

KERNEL_SIZE = 3  # spatial kernel size, fixed for every conv layer
POOL_SIZE = 2


@dataclass(frozen=True)
class SpatialConfig:
    """Layout of the spatial encoder.

    ``stage_channels`` lists the conv widths per stage; every stage ends
    with one 2x2/stride-2 max pool, so the output extent is
    ``input_size / 2**len(stage_channels)``.
    """

    input_size: int = 224
    in_channels: int = 3
    stage_channels: tuple[tuple[int, ...], ...] = field(default=VGG16_STAGES)

    def __post_init__(self):
        if self.input_size < 1:
            raise ConfigError(f"input_size must be >= 1, got {self.input_size}")
        if not self.stage_channels or any(len(s) == 0 for s in self.stage_channels):
            raise ConfigError("stage_channels must declare at least one conv per stage")
        if self.input_size % (POOL_SIZE ** self.num_stages) != 0:
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by "
                f"{POOL_SIZE ** self.num_stages} ({self.num_stages} poolings)"
            )

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def num_convs(self) -> int:
        return sum(len(s) for s in self.stage_channels)

    @property
    def out_channels(self) -> int:
        """Channel count z of the emitted feature map."""
        return self.stage_channels[-1][-1]

    @property
    def map_extent(self) -> int:
        """Spatial extent r of the emitted feature map."""
        return self.input_size // (POOL_SIZE ** self.num_stages)


def _init_fan_in_uniform(tensor: torch.Tensor, fan_in: int, generator=None) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)


class SpatialEncoder(nn.Module):
    """Stack of conv/relu stages, each closed by a max pool.

    Layer names follow the ``conv{stage}_{index}`` convention so external
    weight bundles can address them (see :mod:`branchvit.weights_io`).
    """

    def __init__(self, config: SpatialConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        layers: OrderedDict[str, nn.Module] = OrderedDict()
        in_ch = config.in_channels
        for s, widths in enumerate(config.stage_channels, start=1):
            for j, out_ch in enumerate(widths, start=1):
                layers[f"conv{s}_{j}"] = nn.Conv2d(
                    in_ch, out_ch, kernel_size=KERNEL_SIZE, padding=KERNEL_SIZE // 2
                )
                layers[f"relu{s}_{j}"] = nn.ReLU()
                in_ch = out_ch
            layers[f"pool{s}"] = nn.MaxPool2d(kernel_size=POOL_SIZE, stride=POOL_SIZE)
        self.features = nn.Sequential(layers)
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        """Fan-in-scaled uniform init, used when no pretrained bundle is supplied."""
        for m in self.features:
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                _init_fan_in_uniform(m.weight, fan_in, generator)
                _init_fan_in_uniform(m.bias, fan_in, generator)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W) or (B, 1, H, W) -> (B, z, r, r).

        The single input channel is replicated to ``in_channels`` at entry.
        """
        if images.dim() == 3:
            images = images.unsqueeze(1)  # (B, 1, H, W)
        if images.dim() != 4:
            raise DimensionError(f"expected a batched image tensor, got shape {tuple(images.shape)}")
        size = self.config.input_size
        if images.shape[-2] != size or images.shape[-1] != size:
            raise DimensionError(
                f"input is {images.shape[-2]}x{images.shape[-1]}, encoder is "
                f"configured for {size}x{size} (resize upstream)"
            )
        if images.shape[1] == 1 and self.config.in_channels > 1:
            images = images.expand(-1, self.config.in_channels, -1, -1)
        elif images.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"got {images.shape[1]} channels, expected 1 or {self.config.in_channels}"
            )
        return self.features(images)


def build_spatial_encoder(
    config: SpatialConfig,
    weights: dict[str, "numpy.ndarray"] | None = None,  # noqa: F821
    generator: torch.Generator | None = None,
) -> SpatialEncoder:
    """Construct the encoder, optionally loading an external weight bundle.

    ``weights`` maps ``conv{s}_{j}.weight`` / ``conv{s}_{j}.bias`` names to
    arrays (see :func:`branchvit.weights_io.load_weight_bundle`). Arrays not
    used by this layout (e.g. a bundled fully connected tail) are ignored.
    """
    encoder = SpatialEncoder(config, generator=generator)
    if weights is None:
        return encoder
    state = dict(encoder.features.named_parameters())
    with torch.no_grad():
        for name, param in state.items():
            if name not in weights:
                raise ConfigError(f"weight bundle is missing an array for layer '{name}'")
            arr = torch.as_tensor(weights[name], dtype=param.dtype)
            if arr.dim() == 4 and tuple(arr.shape[-2:]) != (KERNEL_SIZE, KERNEL_SIZE):
                raise ConfigError(
                    f"layer '{name}' has kernel {tuple(arr.shape[-2:])}; every conv "
                    f"kernel must be {KERNEL_SIZE}x{KERNEL_SIZE}"
                )
            if tuple(arr.shape) != tuple(param.shape):
                raise ConfigError(
                    f"layer '{name}' expects shape {tuple(param.shape)}, "
                    f"bundle supplies {tuple(arr.shape)}"
                )
            param.copy_(arr)
    return encoder


def encode_spatial(image: torch.Tensor, encoder: SpatialEncoder) -> torch.Tensor:
    """Forward a single (H, W) image or a (B, H, W) batch through the encoder.

    Pure given fixed parameters; a single image comes back as (z, r, r).
    """
    single = image.dim() == 2
    if single:
        image = image.unsqueeze(0)
    out = encoder(image)
    return out.squeeze(0) if single else out
