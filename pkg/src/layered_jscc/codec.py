"""Convolutional encoder/decoder pair used by every transmission scheme.

Images travel as ``(batch, channels, height, width)`` float tensors in [0, 1].
The encoder downsamples twice by 2 and emits ``depth`` feature maps which are
flattened channel-major into the ``2k`` reals of the channel input, so a prefix
of the symbol vector is always a prefix of whole feature maps.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Sequence, Tuple

import torch
from torch import nn

from .errors import ShapeMismatch

PIXEL_MAX = 255.0
STRIDES = (2, 2, 1, 1, 1)


class Activation(str, enum.Enum):
    PRELU = "prelu"
    RELU = "relu"


class OutputActivation(str, enum.Enum):
    SIGMOID = "sigmoid"
    # 2 * sigmoid - 1; used by decoders that reconstruct residuals in [-1, 1]
    SIGNED_SIGMOID = "signed_sigmoid"


@dataclass(frozen=True)
class CodecConfig:
    image_shape: Tuple[int, int, int] = (32, 32, 3)
    total_symbols: int = 512
    layer_widths: Tuple[int, ...] = (16, 32, 32, 32)
    kernel_size: int = 5
    activation: Activation = Activation.PRELU
    output_activation: OutputActivation = OutputActivation.SIGMOID
    normalization: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        object.__setattr__(self, "layer_widths", tuple(int(v) for v in self.layer_widths))
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "output_activation", OutputActivation(self.output_activation))
        h, w, c = self.image_shape
        if h % 4 or w % 4:
            raise ValueError(f"image height/width must be divisible by 4, got {h}x{w}")
        if len(self.layer_widths) != 4:
            raise ValueError("layer_widths needs four entries (the fifth stage is the latent depth)")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        if self.normalization not in ("none", "group"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        self.depth_for(self.total_symbols)

    @property
    def source_dim(self) -> int:
        h, w, c = self.image_shape
        return h * w * c

    @property
    def latent_hw(self) -> Tuple[int, int]:
        h, w, _ = self.image_shape
        return h // 4, w // 4

    @property
    def symbols_per_map(self) -> float:
        lh, lw = self.latent_hw
        return lh * lw / 2

    @property
    def depth(self) -> int:
        return self.depth_for(self.total_symbols)

    def depth_for(self, symbols: int) -> int:
        """Latent depth c such that ``2 * symbols = (h/4) * (w/4) * c``."""
        lh, lw = self.latent_hw
        if symbols < 1 or (2 * symbols) % (lh * lw):
            raise ValueError(
                f"{symbols} symbols do not fill whole {lh}x{lw} feature maps "
                f"(need a multiple of {lh * lw / 2:g})")
        return 2 * symbols // (lh * lw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["activation"] = self.activation.value
        d["output_activation"] = self.output_activation.value
        d["image_shape"] = list(self.image_shape)
        d["layer_widths"] = list(self.layer_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        return cls(**d)


def _activation(kind: Activation, channels: int) -> nn.Module:
    if kind is Activation.PRELU:
        return nn.PReLU(channels)
    return nn.ReLU()


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "group":
        return nn.GroupNorm(1, channels)
    return nn.Identity()


class Encoder(nn.Module):
    """Five conv stages (strides 2, 2, 1, 1, 1) mapping an image to ``2k`` reals."""

    def __init__(self, config: CodecConfig, depth: int):
        super().__init__()
        self.config = config
        self.depth = depth
        c_in = config.image_shape[2]
        widths = list(config.layer_widths) + [depth]
        pad = config.kernel_size // 2
        stages = []
        for width, stride in zip(widths, STRIDES):
            stages += [nn.Conv2d(c_in, width, config.kernel_size, stride, pad),
                       _norm(config.normalization, width),
                       _activation(config.activation, width)]
            c_in = width
        self.net = nn.Sequential(*stages)

    @property
    def output_width(self) -> int:
        lh, lw = self.config.latent_hw
        return self.depth * lh * lw

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w, c = self.config.image_shape
        if x.dim() != 4 or tuple(x.shape[1:]) != (c, h, w):
            raise ShapeMismatch(f"expected images of shape (B, {c}, {h}, {w}), got {tuple(x.shape)}")
        return self.net(x).flatten(1)


class Decoder(nn.Module):
    """Mirror of :class:`Encoder` built from transposed convolutions."""

    def __init__(self, config: CodecConfig, depth: int, output: OutputActivation = None):
        super().__init__()
        self.config = config
        self.depth = depth
        self.output = OutputActivation(output or config.output_activation)
        c_out = config.image_shape[2]
        widths = list(reversed(config.layer_widths)) + [c_out]
        strides = list(reversed(STRIDES))
        pad = config.kernel_size // 2
        stages = []
        c_in = depth
        for i, (width, stride) in enumerate(zip(widths, strides)):
            stages.append(nn.ConvTranspose2d(c_in, width, config.kernel_size, stride, pad,
                                             output_padding=stride - 1))
            if i < len(widths) - 1:
                stages += [_norm(config.normalization, width), _activation(config.activation, width)]
            c_in = width
        self.net = nn.Sequential(*stages)

    @property
    def input_width(self) -> int:
        lh, lw = self.config.latent_hw
        return self.depth * lh * lw

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.input_width:
            raise ShapeMismatch(f"decoder expects (B, {self.input_width}) reals, got {tuple(z.shape)}")
        lh, lw = self.config.latent_hw
        out = self.net(z.reshape(z.shape[0], self.depth, lh, lw))
        if self.output is OutputActivation.SIGNED_SIGMOID:
            return 2.0 * torch.sigmoid(out) - 1.0
        return torch.sigmoid(out)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def check_images(x: torch.Tensor, image_shape: Sequence[int]) -> torch.Tensor:
    """Validate an image batch against ``(height, width, channels)`` geometry."""
    h, w, c = image_shape
    if x.dim() != 4 or tuple(x.shape[1:]) != (c, h, w):
        raise ShapeMismatch(f"expected images of shape (B, {c}, {h}, {w}), got {tuple(x.shape)}")
    return x
