"""Experiment configuration files (YAML), validated before any compute starts."""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .channel import ChannelKind, ChannelSpec
from .codec import CodecConfig
from .evaluation import DEFAULT_REALIZATIONS, DEFAULT_SNRS
from .schemes import DEFAULT_M, LayerPlan, SchemeKind
from .training import DatasetConfig, OptimizerConfig, TrainConfig


class ConfigError(ValueError):
    """Invalid experiment file; ``problems`` holds ``(field, line, message)`` triples."""

    def __init__(self, path, problems):
        self.path = path
        self.problems = problems
        lines = []
        for fld, line, msg in problems:
            where = f"{path}:{line}" if line is not None else str(path)
            lines.append(f"{where}: {fld}: {msg}")
        super().__init__("\n".join(lines))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LayersSection(_Section):
    ratios: Optional[List[str]] = None
    bandwidths: Optional[List[int]] = None

    @field_validator("ratios")
    @classmethod
    def _fractions(cls, v):
        if v is not None:
            for r in v:
                if Fraction(str(r)) <= 0:
                    raise ValueError(f"ratio {r} must be positive")
        return v

    @model_validator(mode="after")
    def _one_of(self):
        if (self.ratios is None) == (self.bandwidths is None):
            raise ValueError("give exactly one of 'ratios' or 'bandwidths'")
        return self


class ChannelSection(_Section):
    kind: ChannelKind = ChannelKind.AWGN
    snr_db: float = 10.0
    independent_fading: bool = False


class CodecSection(_Section):
    image_shape: Tuple[int, int, int] = (32, 32, 3)
    layer_widths: Tuple[int, int, int, int] = (16, 32, 32, 32)
    kernel_size: int = Field(5, ge=1)
    activation: Literal["prelu", "relu"] = "prelu"
    normalization: Literal["none", "group"] = "none"


class OptimizerSection(_Section):
    name: Literal["adam"] = "adam"
    learning_rate: float = Field(1e-3, gt=0)
    batch_size: int = Field(64, ge=1)
    max_epochs: int = Field(150, ge=1)
    early_stop_patience: int = Field(10, ge=1)


class DatasetSection(_Section):
    name: Literal["cifar10", "synthetic"] = "cifar10"
    root: Optional[str] = None
    download: bool = False
    train_size: Optional[int] = Field(None, ge=1)
    val_size: Optional[int] = Field(None, ge=1)
    test_size: Optional[int] = Field(None, ge=1)
    synthetic_count: int = Field(256, ge=2)
    synthetic_seed: int = 0


class ResidualSection(_Section):
    m_eval: int = Field(DEFAULT_M, ge=1)


class SingleDecoderSection(_Section):
    mask_weights: Optional[List[float]] = None


class EvaluationSection(_Section):
    test_snrs_db: List[float] = Field(default_factory=lambda: [float(s) for s in DEFAULT_SNRS])
    realizations: int = Field(DEFAULT_REALIZATIONS, ge=1)
    feedback: List[Literal["estimated", "perfect"]] = Field(default_factory=lambda: ["estimated"])
    m_values: List[int] = Field(default_factory=lambda: [DEFAULT_M])


class ExperimentConfig(_Section):
    scheme: SchemeKind = SchemeKind.MULTI_DECODER
    layers: LayersSection = Field(default_factory=lambda: LayersSection(ratios=["1/12", "1/12"]))
    channel: ChannelSection = Field(default_factory=ChannelSection)
    codec: CodecSection = Field(default_factory=CodecSection)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    residual: ResidualSection = Field(default_factory=ResidualSection)
    single_decoder: SingleDecoderSection = Field(default_factory=SingleDecoderSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)
    seed: int = 0
    time_limit_s: Optional[float] = Field(None, gt=0)
    output_dir: str = "runs/experiment"

    @model_validator(mode="after")
    def _consistent(self):
        # geometry problems surface here rather than after data loading
        self.layer_plan()
        self.codec_config()
        w = self.single_decoder.mask_weights
        if w is not None and len(w) != len(self.layer_plan().bandwidths):
            raise ValueError("single_decoder.mask_weights needs one weight per layer")
        return self

    def layer_plan(self) -> LayerPlan:
        h, w, c = self.codec.image_shape
        n = h * w * c
        if self.layers.ratios is not None:
            return LayerPlan.from_ratios(self.layers.ratios, n)
        return LayerPlan(tuple(self.layers.bandwidths), n)

    def codec_config(self) -> CodecConfig:
        return CodecConfig(image_shape=self.codec.image_shape, total_symbols=self.layer_plan().total,
                           layer_widths=self.codec.layer_widths, kernel_size=self.codec.kernel_size,
                           activation=self.codec.activation, normalization=self.codec.normalization)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            scheme_kind=self.scheme,
            layer_plan=self.layer_plan(),
            channel=ChannelSpec(self.channel.kind, self.channel.snr_db, self.seed),
            optimizer=OptimizerConfig(**self.optimizer.model_dump()),
            dataset=DatasetConfig(**self.dataset.model_dump()),
            codec=self.codec_config(),
            seed=self.seed,
            m_eval=self.residual.m_eval,
            mask_weights=self.single_decoder.mask_weights,
            independent_fading=self.channel.independent_fading,
            time_limit_s=self.time_limit_s,
        )

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def _line_of(node, loc) -> Optional[int]:
    """1-based line of the YAML node addressed by a pydantic error location."""
    line = None
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            match = next(((k, v) for k, v in node.value if k.value == key), None)
            if match is None:
                break
            line = match[0].start_mark.line + 1
            node = match[1]
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            break
    return line


def parse_config(text: str, path: Union[str, Path] = "<string>") -> ExperimentConfig:
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(path, [("<file>", mark.line + 1 if mark else None, str(exc))]) from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path, [("<file>", 1, "top level must be a mapping")])
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            loc = tuple(err["loc"])
            fld = ".".join(str(p) for p in loc) or "<root>"
            problems.append((fld, _line_of(root, loc), err["msg"]))
        raise ConfigError(path, problems) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(path, [("<file>", None, str(exc))]) from exc
    return parse_config(text, path)
