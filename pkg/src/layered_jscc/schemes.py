"""Layered transmission strategies built from the codec and the channel.

Four scheme kinds share one container, :class:`SchemeModel`:

* ``MULTI_DECODER``: one encoder emits all layers at once, decoder ``i`` reads
  the first ``i`` received blocks.
* ``RESIDUAL``: one encoder/decoder pair per layer; layer ``i`` sends what the
  earlier layers left unexplained, and the receiver sums the decoded parts.
* ``SINGLE_DECODER``: one full-width encoder and decoder; the receiver zeroes
  the symbols it has not received yet.
* ``SINGLE_LAYER_BASELINE``: one encoder/decoder over the summed bandwidth.

Every transmitted layer block is power-normalized on its own.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction
from typing import List, NamedTuple, Optional, Sequence

import torch
from torch import nn

from .channel import ChannelKind, ChannelSpec, normalize_power, sample_fading_gain, transmit
from .codec import CodecConfig, Decoder, Encoder, OutputActivation, check_images, parameter_count
from .errors import EmptyBatch, InvalidM, ShapeMismatch

__all__ = [
    "DEFAULT_M",
    "Feedback",
    "LayerPlan",
    "MaskSample",
    "SchemeKind",
    "SchemeModel",
    "baseline_forward",
    "decode",
    "encode",
    "estimate_receiver_output",
    "forward_layers",
    "multi_decoder_forward",
    "multi_layer_loss",
    "residual_forward",
    "residual_trace",
    "sample_mask",
    "single_decoder_forward",
]

DEFAULT_M = 100


class SchemeKind(str, enum.Enum):
    MULTI_DECODER = "multi_decoder"
    RESIDUAL = "residual"
    SINGLE_DECODER = "single_decoder"
    SINGLE_LAYER_BASELINE = "single_layer_baseline"


class Feedback(str, enum.Enum):
    ESTIMATED = "estimated"
    PERFECT = "perfect"


@dataclass(frozen=True)
class LayerPlan:
    """Channel symbols per layer (``bandwidths``) for a source of ``source_dim`` reals."""

    bandwidths: tuple
    source_dim: int

    def __post_init__(self):
        object.__setattr__(self, "bandwidths", tuple(int(k) for k in self.bandwidths))
        if not self.bandwidths:
            raise ValueError("a layer plan needs at least one layer")
        if any(k < 1 for k in self.bandwidths):
            raise ValueError(f"every layer needs at least one symbol, got {self.bandwidths}")
        if self.source_dim < 1:
            raise ValueError("source_dim must be positive")

    @classmethod
    def from_ratios(cls, ratios: Sequence, source_dim: int) -> "LayerPlan":
        """Build from bandwidth compression ratios such as ``["1/12", "1/12"]``."""
        ks = []
        for r in ratios:
            k = Fraction(r) * source_dim
            if k.denominator != 1:
                raise ValueError(f"ratio {r} of n={source_dim} is not a whole number of symbols")
            ks.append(int(k))
        return cls(tuple(ks), source_dim)

    @property
    def num_layers(self) -> int:
        return len(self.bandwidths)

    @property
    def total(self) -> int:
        return sum(self.bandwidths)

    @property
    def cumulative(self) -> tuple:
        out, acc = [], 0
        for k in self.bandwidths:
            acc += k
            out.append(acc)
        return tuple(out)

    @property
    def ratios(self) -> tuple:
        return tuple(Fraction(k, self.source_dim) for k in self.bandwidths)

    def collapsed(self) -> "LayerPlan":
        return LayerPlan((self.total,), self.source_dim)

    def to_dict(self) -> dict:
        return {"bandwidths": list(self.bandwidths), "source_dim": self.source_dim,
                "ratios": [str(r) for r in self.ratios]}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerPlan":
        return cls(tuple(d["bandwidths"]), int(d["source_dim"]))


@dataclass(frozen=True)
class MaskSample:
    """Receiver-side erasure pattern: the first ``prefix_symbols`` symbols survive."""

    prefix_symbols: int
    total_symbols: int

    def as_tensor(self, dtype=torch.float32, device="cpu") -> torch.Tensor:
        mask = torch.zeros(2 * self.total_symbols, dtype=dtype, device=device)
        mask[: 2 * self.prefix_symbols] = 1
        return mask


class SchemeModel(nn.Module):
    """Encoders and decoders of one trained (or trainable) layered scheme.

    Parameters are initialized under ``torch.manual_seed(seed)`` inside a forked
    RNG scope, so construction is reproducible and leaves the global RNG alone.
    A ``SINGLE_LAYER_BASELINE`` collapses ``plan`` to one layer of the summed
    bandwidth.
    """

    def __init__(self, kind, plan: LayerPlan, codec: Optional[CodecConfig] = None,
                 train_snr_db: float = 10.0, channel_kind=ChannelKind.AWGN, seed: int = 0,
                 power: float = 1.0, independent_fading: bool = False):
        super().__init__()
        self.kind = SchemeKind(kind)
        if self.kind is SchemeKind.SINGLE_LAYER_BASELINE:
            plan = plan.collapsed()
        codec = codec or CodecConfig()
        codec = CodecConfig(**{**codec.to_dict(), "total_symbols": plan.total})
        if codec.source_dim != plan.source_dim:
            raise ShapeMismatch(f"plan source_dim {plan.source_dim} != image size {codec.source_dim}")
        self.plan = plan
        self.codec = codec
        self.train_snr_db = float(train_snr_db)
        self.channel_kind = ChannelKind(channel_kind)
        self.seed = int(seed)
        self.power = float(power)
        self.independent_fading = bool(independent_fading)

        depths = [codec.depth_for(k) for k in plan.bandwidths]
        cum_depths = [codec.depth_for(k) for k in plan.cumulative]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            if self.kind is SchemeKind.RESIDUAL:
                self.encoders = nn.ModuleList(Encoder(codec, d) for d in depths)
                self.decoders = nn.ModuleList(
                    Decoder(codec, d, None if i == 0 else OutputActivation.SIGNED_SIGMOID)
                    for i, d in enumerate(depths))
            elif self.kind is SchemeKind.MULTI_DECODER:
                self.encoders = nn.ModuleList([Encoder(codec, codec.depth)])
                self.decoders = nn.ModuleList(Decoder(codec, d) for d in cum_depths)
            else:
                self.encoders = nn.ModuleList([Encoder(codec, codec.depth)])
                self.decoders = nn.ModuleList([Decoder(codec, codec.depth)])

    @property
    def num_layers(self) -> int:
        return self.plan.num_layers

    @property
    def model_id(self) -> str:
        ks = "-".join(str(k) for k in self.plan.bandwidths)
        return f"{self.kind.value}_L{self.num_layers}_k{ks}_{self.channel_kind.value}_snr{self.train_snr_db:g}_s{self.seed}"

    def layer_slices(self) -> List[slice]:
        """Positions of each layer's block inside the full ``2k``-real symbol vector."""
        out, start = [], 0
        for k in self.plan.bandwidths:
            out.append(slice(start, start + 2 * k))
            start += 2 * k
        return out

    def parameter_count(self) -> int:
        return parameter_count(self)

    def metadata(self) -> dict:
        return {
            "kind": self.kind.value,
            "layer_plan": self.plan.to_dict(),
            "codec": self.codec.to_dict(),
            "train_snr_db": self.train_snr_db,
            "channel_kind": self.channel_kind.value,
            "seed": self.seed,
            "power": self.power,
            "independent_fading": self.independent_fading,
        }

    @classmethod
    def from_metadata(cls, meta: dict) -> "SchemeModel":
        return cls(meta["kind"], LayerPlan.from_dict(meta["layer_plan"]),
                   CodecConfig.from_dict(meta["codec"]), meta["train_snr_db"],
                   meta["channel_kind"], meta["seed"], meta.get("power", 1.0),
                   meta.get("independent_fading", False))


def _normalize(model: SchemeModel, raw: torch.Tensor) -> torch.Tensor:
    # degenerate encoder outputs are only tolerated while training
    return normalize_power(raw, model.power, perturb_degenerate=model.training)


def _send(model: SchemeModel, blocks, spec: ChannelSpec, generator, gain=None):
    return transmit([_normalize(model, b) for b in blocks], spec, generator, model.power,
                    model.independent_fading, gain)


def encode(model: SchemeModel, x: torch.Tensor, layer: int = 1) -> torch.Tensor:
    """Raw (un-normalized) channel input; ``layer`` selects the pair for residual models."""
    check_images(x, model.codec.image_shape)
    idx = layer - 1 if model.kind is SchemeKind.RESIDUAL else 0
    return model.encoders[idx](x)


def decode(model: SchemeModel, z_hat: torch.Tensor, layer: Optional[int] = None) -> torch.Tensor:
    """Decode received reals for the reconstruction after ``layer`` layers.

    For the single-decoder model a short input is zero-padded to full width.
    """
    layer = model.num_layers if layer is None else layer
    if not 1 <= layer <= model.num_layers:
        raise ShapeMismatch(f"layer {layer} outside 1..{model.num_layers}")
    if model.kind is SchemeKind.SINGLE_DECODER:
        full = 2 * model.plan.total
        if z_hat.dim() != 2 or z_hat.shape[1] > full:
            raise ShapeMismatch(f"expected at most {full} reals, got {tuple(z_hat.shape)}")
        if z_hat.shape[1] < full:
            z_hat = torch.cat([z_hat, z_hat.new_zeros(z_hat.shape[0], full - z_hat.shape[1])], dim=1)
        return model.decoders[0](z_hat)
    if model.kind is SchemeKind.SINGLE_LAYER_BASELINE:
        return model.decoders[0](z_hat)
    return model.decoders[layer - 1](z_hat)


def _split(model: SchemeModel, raw: torch.Tensor) -> list:
    return [raw[:, s] for s in model.layer_slices()]


def multi_decoder_forward(model: SchemeModel, x: torch.Tensor, spec: ChannelSpec,
                          generator: Optional[torch.Generator] = None) -> list:
    """Reconstructions ``[x_hat_1 .. x_hat_L]`` from a single encoder pass."""
    if model.kind is not SchemeKind.MULTI_DECODER:
        raise ValueError(f"multi_decoder_forward needs a MULTI_DECODER model, got {model.kind.value}")
    received = _send(model, _split(model, encode(model, x)), spec, generator)
    outs = []
    for i in range(model.num_layers):
        outs.append(model.decoders[i](torch.cat(received[: i + 1], dim=1)))
    return outs


def baseline_forward(model: SchemeModel, x: torch.Tensor, spec: ChannelSpec,
                     generator: Optional[torch.Generator] = None) -> torch.Tensor:
    if model.kind is not SchemeKind.SINGLE_LAYER_BASELINE:
        raise ValueError(f"baseline_forward needs a SINGLE_LAYER_BASELINE model, got {model.kind.value}")
    (z_hat,) = _send(model, [encode(model, x)], spec, generator)
    return model.decoders[0](z_hat)


def sample_mask(plan: LayerPlan, generator: Optional[torch.Generator] = None,
                weights: Optional[Sequence[float]] = None) -> MaskSample:
    """Draw one prefix length among the cumulative layer bandwidths.

    Uniform over the ``L`` options unless ``weights`` are given.
    """
    options = plan.cumulative
    if weights is None:
        idx = int(torch.randint(len(options), (1,), generator=generator))
    else:
        if len(weights) != len(options):
            raise ValueError("need one weight per layer")
        w = torch.as_tensor(weights, dtype=torch.float64)
        idx = int(torch.multinomial(w, 1, generator=generator))
    return MaskSample(options[idx], plan.total)


def _received_full(model: SchemeModel, x, spec, generator) -> torch.Tensor:
    return torch.cat(_send(model, _split(model, encode(model, x)), spec, generator), dim=1)


def single_decoder_forward(model: SchemeModel, x: torch.Tensor, spec: ChannelSpec,
                           mask: Optional[MaskSample] = None,
                           generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Full-width transmission, erase symbols beyond ``mask``'s prefix, decode.

    ``mask=None`` is the unmasked graph.
    """
    if model.kind is not SchemeKind.SINGLE_DECODER:
        raise ValueError(f"single_decoder_forward needs a SINGLE_DECODER model, got {model.kind.value}")
    z_hat = _received_full(model, x, spec, generator)
    if mask is not None:
        if mask.total_symbols != model.plan.total:
            raise ShapeMismatch(f"mask covers {mask.total_symbols} symbols, model sends {model.plan.total}")
        z_hat = z_hat * mask.as_tensor(z_hat.dtype, z_hat.device)
    return model.decoders[0](z_hat)


def _single_decoder_layers(model, x, spec, generator) -> list:
    # one transmission, decoded once per cumulative prefix
    z_hat = _received_full(model, x, spec, generator)
    outs = []
    for prefix in model.plan.cumulative:
        mask = MaskSample(prefix, model.plan.total).as_tensor(z_hat.dtype, z_hat.device)
        outs.append(model.decoders[0](z_hat * mask))
    return outs


class ResidualTrace(NamedTuple):
    reconstructions: list  # clamped running sums, one per layer
    inputs: list  # what each layer's encoder saw (x, then residuals)
    contributions: list  # decoded output of each layer


def _check_m(m: int):
    if int(m) != m or m < 1:
        raise InvalidM(f"number of channel realizations must be >= 1, got {m}")


def _derive_generator(generator: Optional[torch.Generator], device) -> torch.Generator:
    seed = int(torch.randint(0, 2**62, (1,), generator=generator))
    gen = torch.Generator(device=device)
    gen.manual_seed(seed)
    return gen


def _average_layer_output(model, idx: int, inp: torch.Tensor, spec, m: int, generator) -> torch.Tensor:
    """Transmitter-side estimate of what decoder ``idx`` will output: mean over ``m`` draws."""
    raw = model.encoders[idx](inp)
    total = None
    for _ in range(m):
        (z_hat,) = _send(model, [raw], spec, generator)
        out = model.decoders[idx](z_hat)
        total = out if total is None else total + out
    return total / m


def residual_trace(model: SchemeModel, x: torch.Tensor, spec: ChannelSpec,
                   generator: Optional[torch.Generator] = None,
                   feedback: Feedback = Feedback.ESTIMATED, m: int = DEFAULT_M,
                   layers: Optional[int] = None) -> ResidualTrace:
    """Run the residual scheme for the first ``layers`` layers and keep the intermediates.

    With ``PERFECT`` feedback the transmitter subtracts the decoded parts of this
    very channel realization; with ``ESTIMATED`` it subtracts averages of ``m``
    simulated realizations drawn from a generator derived from ``generator``.
    """
    if model.kind is not SchemeKind.RESIDUAL:
        raise ValueError(f"residual scheme needs a RESIDUAL model, got {model.kind.value}")
    feedback = Feedback(feedback)
    _check_m(m)
    check_images(x, model.codec.image_shape)
    n_layers = model.num_layers if layers is None else layers

    gain = None
    if spec.kind is ChannelKind.RAYLEIGH_SLOW and not model.independent_fading:
        gain = sample_fading_gain(x.shape[0], generator, x.dtype, x.device)

    est_gen = None
    inputs, contributions, estimates = [], [], []
    for i in range(n_layers):
        if i == 0:
            inp = x
        elif feedback is Feedback.PERFECT:
            inp = x - sum(contributions)
        else:
            inp = x - sum(estimates)
        inputs.append(inp)
        (z_hat,) = _send(model, [model.encoders[i](inp)], spec, generator, gain)
        contributions.append(model.decoders[i](z_hat))
        if feedback is Feedback.ESTIMATED and i < n_layers - 1:
            if est_gen is None:
                est_gen = _derive_generator(generator, x.device)
            estimates.append(_average_layer_output(model, i, inp, spec, m, est_gen))

    recons, acc = [], None
    for c in contributions:
        acc = c if acc is None else acc + c
        recons.append(acc.clamp(0.0, 1.0))
    return ResidualTrace(recons, inputs, contributions)


def residual_forward(model: SchemeModel, x: torch.Tensor, spec: ChannelSpec, m: int = DEFAULT_M,
                     feedback: Feedback = Feedback.ESTIMATED,
                     generator: Optional[torch.Generator] = None) -> list:
    return residual_trace(model, x, spec, generator, feedback, m).reconstructions


def estimate_receiver_output(model: SchemeModel, x: torch.Tensor, layer: int, spec: ChannelSpec,
                             m: int = DEFAULT_M, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Average over ``m`` independent channel draws of layer ``layer``'s decoded output.

    Earlier layers' residual inputs are themselves formed from estimates, as the
    transmitter would do without feedback.
    """
    if model.kind is not SchemeKind.RESIDUAL:
        raise ValueError(f"receiver estimation needs a RESIDUAL model, got {model.kind.value}")
    _check_m(m)
    if not 1 <= layer <= model.num_layers:
        raise ShapeMismatch(f"layer {layer} outside 1..{model.num_layers}")
    check_images(x, model.codec.image_shape)
    estimates = []
    for i in range(layer):
        inp = x if i == 0 else x - sum(estimates)
        estimates.append(_average_layer_output(model, i, inp, spec, m, generator))
    return estimates[-1]


def forward_layers(model: SchemeModel, x: torch.Tensor, spec: ChannelSpec,
                   generator: Optional[torch.Generator] = None, m: int = DEFAULT_M,
                   feedback: Feedback = Feedback.ESTIMATED) -> list:
    """Per-layer reconstructions for any scheme kind (evaluation path)."""
    if model.kind is SchemeKind.MULTI_DECODER:
        return multi_decoder_forward(model, x, spec, generator)
    if model.kind is SchemeKind.RESIDUAL:
        return residual_forward(model, x, spec, m, feedback, generator)
    if model.kind is SchemeKind.SINGLE_DECODER:
        return _single_decoder_layers(model, x, spec, generator)
    return [baseline_forward(model, x, spec, generator)]


def per_image_mse(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error of each image in the batch, on the [0, 1] pixel scale."""
    if x.shape != x_hat.shape:
        raise ShapeMismatch(f"reconstruction shape {tuple(x_hat.shape)} != input {tuple(x.shape)}")
    return (x - x_hat).pow(2).flatten(1).mean(dim=1)


def multi_layer_loss(x: torch.Tensor, reconstructions: Sequence[torch.Tensor]) -> torch.Tensor:
    """Distortion averaged over layers and over the batch."""
    if x.shape[0] == 0:
        raise EmptyBatch("cannot average a loss over an empty batch")
    if not reconstructions:
        raise ValueError("need at least one reconstruction")
    per_layer = torch.stack([per_image_mse(x, r) for r in reconstructions])
    return per_layer.mean()
