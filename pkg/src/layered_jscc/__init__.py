"""Progressive (layered) deep joint source-channel coding of images."""

from .channel import ChannelKind, ChannelSpec, normalize_power, snr_to_noise_power, transmit_awgn, transmit_rayleigh_slow
from .codec import CodecConfig
from .errors import *  # noqa: F401,F403
from .schemes import Feedback, LayerPlan, MaskSample, SchemeKind, SchemeModel

__version__ = "0.1.0"
