"""Distortion metrics, test-SNR sweeps and the derived comparisons."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .channel import ChannelKind, ChannelSpec
from .codec import PIXEL_MAX
from .data import ImageSet
from .errors import ConfigMismatch, EmptyResults, GridMismatch, NegativeMse, ShapeMismatch
from .schemes import DEFAULT_M, Feedback, SchemeKind, SchemeModel, forward_layers

PSNR_CAP_DB = 100.0
DEFAULT_SNRS = tuple(range(1, 26, 3))
DEFAULT_REALIZATIONS = 10
CSV_COLUMNS = ("model_id", "scheme", "L", "layer", "train_snr_db", "test_snr_db",
               "psnr_db", "std_err", "realizations")


def mse(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Per-image MSE on the 0-255 scale for [0, 1] inputs."""
    if x.shape != x_hat.shape:
        raise ShapeMismatch(f"shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    diff = (x - x_hat) * PIXEL_MAX
    if diff.dim() == 0:
        return diff.pow(2)
    return diff.pow(2).reshape(diff.shape[0], -1).mean(dim=1)


def psnr(mse_value):
    """``10 log10(255^2 / mse)`` in dB, capped at 100 dB for zero error.

    Accepts a float or an array/tensor of MSE values on the 0-255 scale.
    """
    if isinstance(mse_value, torch.Tensor):
        arr = mse_value.detach().double()
        if bool((arr < 0).any()):
            raise NegativeMse("MSE cannot be negative")
        out = 10.0 * torch.log10(PIXEL_MAX ** 2 / arr)
        return torch.clamp(torch.nan_to_num(out, posinf=PSNR_CAP_DB), max=PSNR_CAP_DB)
    arr = np.asarray(mse_value, dtype=np.float64)
    if np.any(arr < 0):
        raise NegativeMse("MSE cannot be negative")
    with np.errstate(divide="ignore"):
        out = np.minimum(10.0 * np.log10(PIXEL_MAX ** 2 / arr), PSNR_CAP_DB)
    return float(out) if out.ndim == 0 else out


@dataclass
class SweepResult:
    """Mean per-image PSNR for every (layer, test SNR) pair of one model.

    ``std_err`` is the standard error of the mean over test images (each image's
    PSNR first averaged over channel realizations).  ``realization_std`` is the
    spread of the test-set mean across realizations.
    """

    model_id: str
    scheme: str
    train_snr_db: float
    channel_kind: str
    test_snrs_db: List[float]
    per_layer_psnr: np.ndarray
    std_err: np.ndarray
    realizations_per_point: int
    realization_std: Optional[np.ndarray] = None
    num_images: int = 0
    variant: str = ""
    extra: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.per_layer_psnr = np.asarray(self.per_layer_psnr, dtype=np.float64)
        self.std_err = np.asarray(self.std_err, dtype=np.float64)
        shape = (self.num_layers, len(self.test_snrs_db))
        if self.per_layer_psnr.shape != shape or self.std_err.shape != shape:
            raise ShapeMismatch(f"PSNR and std_err must be {shape} matrices")
        if np.any(self.std_err < 0):
            raise ValueError("std_err must be non-negative")

    @property
    def num_layers(self) -> int:
        return self.per_layer_psnr.shape[0]

    def at(self, layer: int, snr_db: float) -> float:
        return float(self.per_layer_psnr[layer - 1, self.snr_index(snr_db)])

    def err_at(self, layer: int, snr_db: float) -> float:
        return float(self.std_err[layer - 1, self.snr_index(snr_db)])

    def snr_index(self, snr_db: float) -> int:
        for i, s in enumerate(self.test_snrs_db):
            if math.isclose(s, snr_db, abs_tol=1e-9):
                return i
        raise KeyError(f"test SNR {snr_db} not in sweep grid {self.test_snrs_db}")

    def rows(self):
        for li in range(self.num_layers):
            for si, snr in enumerate(self.test_snrs_db):
                yield {
                    "model_id": self.model_id, "scheme": self.scheme, "L": self.num_layers,
                    "layer": li + 1, "train_snr_db": self.train_snr_db, "test_snr_db": snr,
                    "psnr_db": float(self.per_layer_psnr[li, si]), "std_err": float(self.std_err[li, si]),
                    "realizations": self.realizations_per_point,
                }

    def metadata(self) -> dict:
        meta = {
            "model_id": self.model_id, "scheme": self.scheme, "train_snr_db": self.train_snr_db,
            "channel_kind": self.channel_kind, "test_snrs_db": list(self.test_snrs_db),
            "num_layers": self.num_layers, "realizations_per_point": self.realizations_per_point,
            "num_images": self.num_images, "variant": self.variant, "psnr_average": "per_image",
        }
        if self.realization_std is not None:
            meta["realization_std"] = np.asarray(self.realization_std).tolist()
        meta.update(self.extra)
        return meta

    def save(self, path) -> Path:
        """Write ``path`` (CSV) plus a ``<path>.meta.json`` sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in self.rows():
                row = dict(row)
                row["psnr_db"] = f"{row['psnr_db']:.6f}"
                row["std_err"] = f"{row['std_err']:.6f}"
                writer.writerow(row)
        sidecar_path(path).write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "SweepResult":
        path = Path(path)
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        if not rows:
            raise EmptyResults(f"{path} holds no result rows")
        meta = {}
        if sidecar_path(path).exists():
            meta = json.loads(sidecar_path(path).read_text())
        snrs = sorted({float(r["test_snr_db"]) for r in rows})
        n_layers = max(int(r["layer"]) for r in rows)
        values = np.full((n_layers, len(snrs)), np.nan)
        errs = np.full_like(values, np.nan)
        for r in rows:
            li, si = int(r["layer"]) - 1, snrs.index(float(r["test_snr_db"]))
            values[li, si] = float(r["psnr_db"])
            errs[li, si] = float(r["std_err"])
        first = rows[0]
        rstd = meta.get("realization_std")
        known = {"model_id", "scheme", "train_snr_db", "channel_kind", "test_snrs_db", "num_layers",
                 "realizations_per_point", "num_images", "variant", "psnr_average", "realization_std"}
        return cls(first["model_id"], first["scheme"], float(first["train_snr_db"]),
                   meta.get("channel_kind", ""), snrs, values, errs, int(first["realizations"]),
                   None if rstd is None else np.asarray(rstd), int(meta.get("num_images", 0)),
                   meta.get("variant", ""), {k: v for k, v in meta.items() if k not in known})


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def point_seed(seed: int, snr_index: int, batch_index: int) -> int:
    """Independent seed for one (SNR, batch) evaluation point, splittable from ``seed``."""
    ss = np.random.SeedSequence([int(seed), int(snr_index), int(batch_index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


@torch.no_grad()
def evaluate_sweep(model: SchemeModel, test: ImageSet, test_snrs_db: Sequence[float] = DEFAULT_SNRS,
                   realizations: int = DEFAULT_REALIZATIONS, seed: int = 0, batch_size: int = 256,
                   m: int = DEFAULT_M, feedback: Feedback = Feedback.ESTIMATED,
                   channel_kind=None) -> SweepResult:
    """Per-layer mean PSNR over ``test`` at each test SNR, averaged over channel draws.

    Each (SNR, batch) point draws from its own generator derived from ``seed``,
    so results do not depend on evaluation order.  ``channel_kind`` defaults to
    the model's training channel.
    """
    if realizations < 1:
        raise ValueError("realizations must be >= 1")
    kind = ChannelKind(channel_kind or model.channel_kind)
    was_training = model.training
    model.eval()
    n_layers, n_snr = model.num_layers, len(test_snrs_db)
    psnr_mean = np.zeros((n_layers, n_snr))
    std_err = np.zeros((n_layers, n_snr))
    real_std = np.zeros((n_layers, n_snr))
    dtype = next(model.parameters()).dtype
    for si, snr in enumerate(test_snrs_db):
        spec = ChannelSpec(kind, float(snr), seed)
        per_image = []  # batches of (layers, realizations, images)
        for bi, x in enumerate(test.batches(batch_size)):
            x = x.to(dtype)
            gen = torch.Generator().manual_seed(point_seed(seed, si, bi))
            draws = []
            for _ in range(realizations):
                outs = forward_layers(model, x, spec, gen, m=m, feedback=feedback)
                draws.append(torch.stack([psnr(mse(x, o)) for o in outs]))
            per_image.append(torch.stack(draws, dim=1))
        vals = torch.cat(per_image, dim=2).numpy()  # (L, R, N)
        img_means = vals.mean(axis=1)
        n_img = img_means.shape[1]
        psnr_mean[:, si] = img_means.mean(axis=1)
        std_err[:, si] = img_means.std(axis=1, ddof=1) / math.sqrt(n_img) if n_img > 1 else 0.0
        real_std[:, si] = vals.mean(axis=2).std(axis=1)
    model.train(was_training)
    variant = ""
    if model.kind is SchemeKind.RESIDUAL:
        feedback = Feedback(feedback)
        variant = "perfect" if feedback is Feedback.PERFECT else f"m={m}"
    return SweepResult(model.model_id, model.kind.value, model.train_snr_db, kind.value,
                       [float(s) for s in test_snrs_db], psnr_mean, std_err, realizations,
                       real_std, len(test), variant)


@dataclass
class EnvelopeResult:
    test_snrs_db: List[float]
    psnr_db: np.ndarray
    best_layer: np.ndarray


def envelope(sweep: SweepResult) -> EnvelopeResult:
    """Pointwise maximum PSNR over layers (the upper hull of the layer curves)."""
    vals = sweep.per_layer_psnr
    return EnvelopeResult(list(sweep.test_snrs_db), vals.max(axis=0), vals.argmax(axis=0) + 1)


@dataclass
class IndependenceReport:
    """First/second-layer PSNR of models that differ only in their number of layers."""

    test_snrs_db: List[float]
    rows: List[dict]
    max_deviation: Dict[int, float]

    def table(self) -> List[dict]:
        out = []
        for row in self.rows:
            for si, snr in enumerate(self.test_snrs_db):
                out.append({"model_id": row["model_id"], "L": row["L"], "test_snr_db": snr,
                            "layer1_psnr_db": row["layer_psnr"][0][si],
                            "layer2_psnr_db": row["layer_psnr"][1][si]})
        return out


def layer_independence_report(models: Sequence[SchemeModel], test: ImageSet,
                              test_snrs_db: Sequence[float] = DEFAULT_SNRS, realizations: int = DEFAULT_REALIZATIONS,
                              seed: int = 0, sweeps: Optional[Sequence[SweepResult]] = None,
                              **sweep_options) -> IndependenceReport:
    """Compare layers 1 and 2 across models trained with different ``L``.

    The models must share their leading bandwidths, training SNR and channel.
    ``max_deviation[layer]`` is the largest spread (max - min over models) of
    that layer's PSNR at any test SNR.  Precomputed ``sweeps`` may be passed to
    skip evaluation.
    """
    if not models:
        raise EmptyResults("no models given")
    ref = models[0]
    for mdl in models[1:]:
        common = min(ref.num_layers, mdl.num_layers, 2)
        if (mdl.plan.bandwidths[:common] != ref.plan.bandwidths[:common]
                or len(set(mdl.plan.bandwidths) | set(ref.plan.bandwidths)) != 1
                or mdl.plan.source_dim != ref.plan.source_dim
                or mdl.train_snr_db != ref.train_snr_db or mdl.channel_kind != ref.channel_kind):
            raise ConfigMismatch(f"{mdl.model_id} is not comparable with {ref.model_id}")
    if sweeps is None:
        sweeps = [evaluate_sweep(mdl, test, test_snrs_db, realizations, seed, **sweep_options) for mdl in models]
    rows = []
    for mdl, sw in zip(models, sweeps):
        layer_psnr = []
        for layer in (1, 2):
            if layer <= sw.num_layers:
                layer_psnr.append([float(v) for v in sw.per_layer_psnr[layer - 1]])
            else:
                layer_psnr.append([float("nan")] * len(sw.test_snrs_db))
        rows.append({"model_id": mdl.model_id, "L": mdl.num_layers, "layer_psnr": layer_psnr})
    max_dev = {}
    for layer in (1, 2):
        arr = np.array([r["layer_psnr"][layer - 1] for r in rows])
        have = ~np.isnan(arr).any(axis=1)
        max_dev[layer] = float((arr[have].max(axis=0) - arr[have].min(axis=0)).max()) if have.any() else float("nan")
    return IndependenceReport([float(s) for s in sweeps[0].test_snrs_db], rows, max_dev)


@dataclass
class Comparison:
    test_snrs_db: List[float]
    delta_db: np.ndarray  # a - b
    combined_err: np.ndarray
    significant: np.ndarray

    @property
    def max_gap(self) -> float:
        return float(np.max(np.abs(self.delta_db)))


def compare(a: SweepResult, b: SweepResult, layer_a: Optional[int] = None,
            layer_b: Optional[int] = None) -> Comparison:
    """PSNR of ``a`` minus ``b`` per test SNR; significant when beyond two std errors.

    Layers default to each sweep's last (highest-quality) layer.
    """
    if len(a.test_snrs_db) != len(b.test_snrs_db) or not np.allclose(a.test_snrs_db, b.test_snrs_db):
        raise GridMismatch(f"test SNR grids differ: {a.test_snrs_db} vs {b.test_snrs_db}")
    la = a.num_layers if layer_a is None else layer_a
    lb = b.num_layers if layer_b is None else layer_b
    delta = a.per_layer_psnr[la - 1] - b.per_layer_psnr[lb - 1]
    err = np.sqrt(a.std_err[la - 1] ** 2 + b.std_err[lb - 1] ** 2)
    return Comparison(list(a.test_snrs_db), delta, err, np.abs(delta) > 2 * err)
