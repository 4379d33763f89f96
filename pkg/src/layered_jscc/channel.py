"""Differentiable wireless link: power normalization, AWGN and slow Rayleigh fading.

Channel symbols are carried as real tensors of shape ``(batch, 2k)`` in which
consecutive pairs ``(2j, 2j + 1)`` hold the real and imaginary part of complex
symbol ``j``.  All functions take an explicit ``torch.Generator`` so that a
transmission is reproducible from ``(input, spec, seed)`` alone.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .errors import AllZeroInput

__all__ = [
    "ChannelKind",
    "ChannelSpec",
    "NOISELESS_SNR_DB",
    "average_power",
    "normalize_power",
    "sample_fading_gain",
    "snr_to_noise_power",
    "transmit",
    "transmit_awgn",
    "transmit_rayleigh_slow",
]

# At or above this SNR the channel is treated as noiseless (sigma^2 := 0).
NOISELESS_SNR_DB = 200.0
_ZERO_NORM = 1e-12


class ChannelKind(str, enum.Enum):
    AWGN = "awgn"
    RAYLEIGH_SLOW = "rayleigh_slow"


@dataclass(frozen=True)
class ChannelSpec:
    """Channel model selection and its SNR (in dB) relative to the power budget."""

    kind: ChannelKind = ChannelKind.AWGN
    snr_db: float = 10.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ChannelKind(self.kind))

    def noise_power(self, power: float = 1.0) -> float:
        return snr_to_noise_power(self.snr_db, power)

    def generator(self, device="cpu") -> torch.Generator:
        gen = torch.Generator(device=device)
        gen.manual_seed(int(self.seed))
        return gen

    def with_snr(self, snr_db: float) -> "ChannelSpec":
        return ChannelSpec(self.kind, float(snr_db), self.seed)


def snr_to_noise_power(snr_db: float, power: float = 1.0) -> float:
    """Noise power per complex symbol, ``P / 10^(snr_db / 10)``."""
    if power <= 0:
        raise ValueError(f"power budget must be positive, got {power}")
    if snr_db >= NOISELESS_SNR_DB:
        return 0.0
    return power / 10.0 ** (snr_db / 10.0)


def average_power(z: torch.Tensor) -> torch.Tensor:
    """Per-vector average complex symbol power ``(1/k) sum |z_j|^2``."""
    k = z.shape[-1] // 2
    return z.pow(2).sum(dim=-1) / k


def normalize_power(raw: torch.Tensor, power: float = 1.0, perturb_degenerate: bool = False,
                    eps: float = 1e-6) -> torch.Tensor:
    """Scale every vector in ``raw`` (last dim ``2k``) to average power ``power``.

    The scaling is ``sqrt(k * P) / ||raw||`` so the constraint holds exactly per
    sample, not only in expectation.  A vector with norm below 1e-12 raises
    :class:`AllZeroInput` unless ``perturb_degenerate`` is set, in which case
    ``eps`` is added to it first (used during training warm-up).
    """
    width = raw.shape[-1]
    if width < 2 or width % 2:
        raise ValueError(f"symbol vector needs an even length >= 2, got {width}")
    k = width // 2
    norm = raw.norm(dim=-1, keepdim=True)
    degenerate = norm < _ZERO_NORM
    if bool(degenerate.any()):
        if not perturb_degenerate:
            raise AllZeroInput("encoder emitted an all-zero symbol vector")
        raw = torch.where(degenerate, raw + eps, raw)
        norm = raw.norm(dim=-1, keepdim=True)
    return raw * (math.sqrt(k * power) / norm)


def _complex_scale(z: torch.Tensor, gain: torch.Tensor) -> torch.Tensor:
    # gain: (batch, 2) real/imag pairs, one per vector
    pairs = z.reshape(*z.shape[:-1], -1, 2)
    g_re = gain[..., 0].unsqueeze(-1)
    g_im = gain[..., 1].unsqueeze(-1)
    re = g_re * pairs[..., 0] - g_im * pairs[..., 1]
    im = g_re * pairs[..., 1] + g_im * pairs[..., 0]
    return torch.stack((re, im), dim=-1).reshape(z.shape)


def _add_noise(z: torch.Tensor, noise_power: float, generator: Optional[torch.Generator]) -> torch.Tensor:
    if noise_power == 0.0:
        return z
    noise = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
    return z + noise * math.sqrt(noise_power / 2.0)


def sample_fading_gain(batch: int, generator: Optional[torch.Generator] = None,
                       dtype=torch.float32, device="cpu") -> torch.Tensor:
    """Draw ``batch`` gains ``h ~ CN(0, 1)`` as ``(batch, 2)`` real/imag pairs."""
    g = torch.randn((batch, 2), generator=generator, dtype=dtype, device=device)
    return g / math.sqrt(2.0)


def transmit_awgn(z: torch.Tensor, spec: ChannelSpec, generator: Optional[torch.Generator] = None,
                  power: float = 1.0) -> torch.Tensor:
    """``z + n`` with circularly-symmetric complex Gaussian noise of variance sigma^2."""
    return _add_noise(z, spec.noise_power(power), generator)


def transmit_rayleigh_slow(z: torch.Tensor, spec: ChannelSpec, generator: Optional[torch.Generator] = None,
                           gain: Optional[torch.Tensor] = None, power: float = 1.0) -> torch.Tensor:
    """``h * z + n`` with one gain per vector, constant over all its symbols.

    ``gain`` (shape ``(batch, 2)`` or ``(2,)``) forces the fading coefficient;
    otherwise one is drawn per vector from ``generator``.  The receiver is not
    told ``h``.
    """
    batch_shape = z.shape[:-1]
    if gain is None:
        gain = sample_fading_gain(math.prod(batch_shape), generator, z.dtype, z.device).reshape(*batch_shape, 2)
    else:
        gain = torch.as_tensor(gain, dtype=z.dtype, device=z.device)
        gain = gain.expand(*batch_shape, 2)
    return _add_noise(_complex_scale(z, gain), spec.noise_power(power), generator)


def transmit(blocks: Sequence[torch.Tensor], spec: ChannelSpec, generator: Optional[torch.Generator] = None,
             power: float = 1.0, independent_fading: bool = False,
             gain: Optional[torch.Tensor] = None) -> list:
    """Send the per-layer symbol blocks of one image batch through the channel.

    Under slow fading one gain per image is shared by every block unless
    ``independent_fading`` is set.  Random draws happen in a fixed order (gains
    first, then noise block by block) so equal seeds give equal outputs.
    """
    if spec.kind is ChannelKind.AWGN:
        return [transmit_awgn(b, spec, generator, power) for b in blocks]
    if independent_fading:
        return [transmit_rayleigh_slow(b, spec, generator, None, power) for b in blocks]
    if gain is None:
        first = blocks[0]
        gain = sample_fading_gain(first.shape[0], generator, first.dtype, first.device)
    return [transmit_rayleigh_slow(b, spec, generator, gain, power) for b in blocks]
