"""Optimization loop for every scheme kind."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .channel import ChannelSpec
from .codec import CodecConfig
from .data import ImageSet, load_dataset
from .errors import DivergenceDetected
from .evaluation import mse, psnr
from .schemes import (DEFAULT_M, Feedback, LayerPlan, SchemeKind, SchemeModel, forward_layers,
                      multi_decoder_forward, multi_layer_loss, per_image_mse, residual_trace,
                      sample_mask, single_decoder_forward, baseline_forward)

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    name: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 150
    early_stop_patience: int = 10

    def __post_init__(self):
        if self.name.lower() != "adam":
            raise ValueError(f"unsupported optimizer {self.name!r} (only adam)")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("max_epochs and early_stop_patience must be >= 1")


@dataclass
class DatasetConfig:
    name: str = "cifar10"
    root: Optional[str] = None
    download: bool = False
    train_size: Optional[int] = None  # truncate splits for desk-scale runs
    val_size: Optional[int] = None
    test_size: Optional[int] = None
    synthetic_count: int = 256
    synthetic_seed: int = 0

    def load(self) -> Tuple[ImageSet, ImageSet, ImageSet]:
        if self.name.lower() == "synthetic":
            tr, va, te = load_dataset("synthetic", count=self.synthetic_count, seed=self.synthetic_seed)
        else:
            tr, va, te = load_dataset(self.name, self.root, download=self.download)
        return tr.subset(self.train_size), va.subset(self.val_size), te.subset(self.test_size)


@dataclass
class TrainConfig:
    scheme_kind: SchemeKind = SchemeKind.MULTI_DECODER
    layer_plan: LayerPlan = field(default_factory=lambda: LayerPlan((256, 256), 3072))
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    seed: int = 0
    m_eval: int = DEFAULT_M
    mask_weights: Optional[List[float]] = None
    independent_fading: bool = False
    time_limit_s: Optional[float] = None

    def __post_init__(self):
        self.scheme_kind = SchemeKind(self.scheme_kind)
        if self.m_eval < 1:
            raise ValueError("m_eval must be >= 1")

    def to_dict(self) -> dict:
        return {
            "scheme_kind": self.scheme_kind.value,
            "layer_plan": self.layer_plan.to_dict(),
            "channel": {"kind": self.channel.kind.value, "snr_db": self.channel.snr_db, "seed": self.channel.seed},
            "optimizer": asdict(self.optimizer),
            "dataset": asdict(self.dataset),
            "codec": self.codec.to_dict(),
            "seed": self.seed,
            "m_eval": self.m_eval,
            "mask_weights": self.mask_weights,
            "independent_fading": self.independent_fading,
            "time_limit_s": self.time_limit_s,
        }


@dataclass
class TrainHistory:
    """One entry per completed epoch; ``stage`` is the layer being trained (residual) or 0."""

    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_psnr: List[List[float]] = field(default_factory=list)
    stage: List[int] = field(default_factory=list)
    epoch_seconds: List[float] = field(default_factory=list)
    best_epoch: dict = field(default_factory=dict)
    stop_reason: str = ""
    learning_rate: float = 0.0
    restarts: int = 0

    @property
    def seconds(self) -> float:
        return float(sum(self.epoch_seconds))

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def records(self):
        for i in range(self.epochs):
            yield {"epoch": i + 1, "stage": self.stage[i], "train_loss": self.train_loss[i],
                   "val_loss": self.val_loss[i], "val_psnr_db": self.val_psnr[i],
                   "seconds": self.epoch_seconds[i]}

    def summary(self) -> dict:
        return {"epochs": self.epochs, "seconds": self.seconds, "best_epoch": self.best_epoch,
                "stop_reason": self.stop_reason, "learning_rate": self.learning_rate,
                "restarts": self.restarts,
                "final_val_loss": self.val_loss[-1] if self.val_loss else None}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        return cls(**d)


class _Diverged(Exception):
    pass


def _generators(seed: int):
    ss = np.random.SeedSequence(int(seed))
    gens = []
    for child in ss.spawn(4):
        g = torch.Generator()
        g.manual_seed(int(child.generate_state(1, dtype=np.uint64)[0] >> 1))
        gens.append(g)
    return gens  # data order, channel, mask, validation channel


def build_model(config: TrainConfig) -> SchemeModel:
    return SchemeModel(config.scheme_kind, config.layer_plan, config.codec, config.channel.snr_db,
                       config.channel.kind, config.seed, independent_fading=config.independent_fading)


def batch_loss(model: SchemeModel, x: torch.Tensor, spec: ChannelSpec, generator: torch.Generator,
               mask_generator: Optional[torch.Generator] = None, stage: int = 0,
               mask_weights=None) -> torch.Tensor:
    """Training objective of ``model`` on one batch (fresh channel draws from ``generator``)."""
    kind = model.kind
    if kind is SchemeKind.MULTI_DECODER:
        return multi_layer_loss(x, multi_decoder_forward(model, x, spec, generator))
    if kind is SchemeKind.SINGLE_DECODER:
        mask = sample_mask(model.plan, mask_generator, mask_weights)
        return per_image_mse(x, single_decoder_forward(model, x, spec, mask, generator)).mean()
    if kind is SchemeKind.SINGLE_LAYER_BASELINE:
        return per_image_mse(x, baseline_forward(model, x, spec, generator)).mean()
    # residual layer `stage`, earlier layers frozen; in-graph realization stands in for the estimate
    trace = residual_trace(model, x, spec, generator, Feedback.PERFECT, layers=stage)
    return per_image_mse(x, sum(trace.contributions)).mean()


@torch.no_grad()
def _validate(model, val: ImageSet, spec, seed_gen_state, batch_size, stage) -> Tuple[float, List[float]]:
    model.eval()
    gen = torch.Generator()
    gen.set_state(seed_gen_state)
    dtype = next(model.parameters()).dtype
    losses, psnrs, count = 0.0, None, 0
    for x in val.batches(batch_size):
        x = x.to(dtype)
        if model.kind is SchemeKind.RESIDUAL:
            outs = residual_trace(model, x, spec, gen, Feedback.PERFECT, layers=stage)
            loss = per_image_mse(x, sum(outs.contributions)).sum()
            recons = outs.reconstructions
        else:
            recons = forward_layers(model, x, spec, gen)
            # every layer weighted equally; for single-decoder this is the mean over prefix masks
            loss = torch.stack([per_image_mse(x, r) for r in recons]).mean(dim=0).sum()
        layer_psnr = torch.stack([psnr(mse(x, r)).sum() for r in recons])
        psnrs = layer_psnr if psnrs is None else psnrs + layer_psnr
        losses += float(loss)
        count += x.shape[0]
    model.train()
    return losses / count, [float(p) / count for p in psnrs]


def _run(config: TrainConfig, train_set: ImageSet, val_set: ImageSet, lr: float,
         on_step: Optional[Callable], log_file) -> Tuple[SchemeModel, TrainHistory]:
    model = build_model(config)
    if train_set.image_shape != model.codec.image_shape:
        raise ValueError(f"dataset geometry {train_set.image_shape} != codec {model.codec.image_shape}")
    model.train()
    data_gen, chan_gen, mask_gen, val_gen = _generators(config.seed)
    val_state = val_gen.get_state()
    spec = config.channel
    opt_cfg = config.optimizer
    history = TrainHistory(learning_rate=lr)
    stages = list(range(1, model.num_layers + 1)) if model.kind is SchemeKind.RESIDUAL else [0]
    start = time.monotonic()
    step = 0
    for stage in stages:
        if model.kind is SchemeKind.RESIDUAL:
            for i, (enc, dec) in enumerate(zip(model.encoders, model.decoders)):
                enc.requires_grad_(i == stage - 1)
                dec.requires_grad_(i == stage - 1)
        params = [p for p in model.parameters() if p.requires_grad]
        optimizer = torch.optim.Adam(params, lr=lr)
        best_loss, best_state, best_epoch, stale = math.inf, None, 0, 0
        reason = "max_epochs"
        for epoch in range(opt_cfg.max_epochs):
            t0 = time.monotonic()
            total, seen = 0.0, 0
            for x in train_set.batches(opt_cfg.batch_size, shuffle=True, generator=data_gen):
                loss = batch_loss(model, x, spec, chan_gen, mask_gen, stage, config.mask_weights)
                if not torch.isfinite(loss):
                    raise _Diverged(f"non-finite loss at step {step}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                step += 1
                total += loss.item() * x.shape[0]
                seen += x.shape[0]
                if on_step is not None:
                    on_step(step, loss.item(), model, chan_gen)
            val_loss, val_psnr = _validate(model, val_set, spec, val_state, max(opt_cfg.batch_size, 256), stage)
            history.train_loss.append(total / seen)
            history.val_loss.append(val_loss)
            history.val_psnr.append(val_psnr)
            history.stage.append(stage)
            history.epoch_seconds.append(time.monotonic() - t0)
            if log_file is not None:
                log_file.write(json.dumps(list(history.records())[-1]) + "\n")
                log_file.flush()
            log.info("stage %d epoch %d train %.5f val %.5f psnr %s", stage, epoch + 1,
                     total / seen, val_loss, ["%.2f" % p for p in val_psnr])
            if val_loss < best_loss:
                best_loss, best_epoch, stale = val_loss, epoch + 1, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                stale += 1
                if stale >= opt_cfg.early_stop_patience:
                    reason = "early_stop"
                    break
            if config.time_limit_s is not None and time.monotonic() - start > config.time_limit_s:
                reason = "time_limit"
                break
        model.load_state_dict(best_state)
        history.best_epoch[str(stage)] = best_epoch
        history.stop_reason = reason
    model.requires_grad_(True)
    model.eval()
    return model, history


def train(config: TrainConfig, splits: Optional[Sequence[ImageSet]] = None,
          on_step: Optional[Callable] = None, log_path=None) -> Tuple[SchemeModel, TrainHistory]:
    """Train a model for ``config`` and return the best-validation parameters.

    ``splits`` overrides dataset loading with ``(train, val[, test])``.  Residual
    models are trained one layer at a time with earlier layers frozen.  A
    non-finite loss restarts training once at a tenth of the learning rate; a
    second divergence raises :class:`DivergenceDetected`.  ``on_step`` is
    called as ``on_step(step, loss, model, channel_generator)``.
    """
    if splits is None:
        splits = config.dataset.load()
    train_set, val_set = splits[0], splits[1]
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        lr = config.optimizer.learning_rate
        try:
            return _run(config, train_set, val_set, lr, on_step, log_file)
        except _Diverged as exc:
            log.warning("%s; retrying with learning rate %g", exc, lr / 10)
        try:
            model, history = _run(config, train_set, val_set, lr / 10, on_step, log_file)
        except _Diverged as exc:
            raise DivergenceDetected(str(exc)) from exc
        history.restarts = 1
        return model, history
    finally:
        if log_file is not None:
            log_file.close()
