"""PSNR-vs-test-SNR figures drawn from saved sweep results."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import EmptyResults  # noqa: E402
from .evaluation import SweepResult, envelope  # noqa: E402

MODES = ("layers", "envelope", "residual-m", "independence")


def _label(sweep: SweepResult) -> str:
    label = f"{sweep.scheme} L={sweep.num_layers} (train {sweep.train_snr_db:g} dB)"
    if sweep.variant:
        label += f" {sweep.variant}"
    return label


def _curves(sweeps: Sequence[SweepResult], mode: str, snr: Optional[float]):
    """(label, x, y, err) tuples for ``mode``."""
    curves = []
    if mode == "layers":
        for sw in sweeps:
            base = _label(sw)
            for li in range(sw.num_layers):
                name = base if sw.num_layers == 1 else f"{base} layer {li + 1}"
                curves.append((name, sw.test_snrs_db, sw.per_layer_psnr[li], sw.std_err[li]))
    elif mode == "envelope":
        for sw in sweeps:
            env = envelope(sw)
            curves.append((f"{_label(sw)} envelope", env.test_snrs_db, env.psnr_db, None))
    elif mode == "residual-m":
        for sw in sweeps:
            li = sw.num_layers - 1
            curves.append((sw.variant or _label(sw), sw.test_snrs_db, sw.per_layer_psnr[li], sw.std_err[li]))
    elif mode == "independence":
        for sw in sweeps:
            si = sw.snr_index(snr) if snr is not None else len(sw.test_snrs_db) // 2
            ys = [sw.per_layer_psnr[li, si] for li in range(min(2, sw.num_layers))]
            es = [sw.std_err[li, si] for li in range(min(2, sw.num_layers))]
            curves.append((f"L={sw.num_layers}", [1, 2][: len(ys)], np.array(ys), np.array(es)))
    else:
        raise ValueError(f"unknown plot mode {mode!r}; choose from {MODES}")
    return curves


def plot_results(sweeps: Sequence[SweepResult], output, mode: str = "layers",
                 snr: Optional[float] = None, title: Optional[str] = None) -> List[Path]:
    """Draw ``sweeps`` in ``mode`` and write the figure plus its data as CSV.

    The figure format follows ``output``'s suffix (``.svg`` or ``.pdf`` for vector
    output); the plotted points go to ``<output stem>.csv``.
    """
    if not sweeps:
        raise EmptyResults("nothing to plot")
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    curves = _curves(sweeps, mode, snr)
    plt.rcParams["svg.hashsalt"] = "layered-jscc"
    fig, ax = plt.subplots(figsize=(6, 4.5))
    if mode == "independence":
        width = 0.8 / len(curves)
        for i, (name, xs, ys, es) in enumerate(curves):
            ax.bar(np.asarray(xs) + (i - (len(curves) - 1) / 2) * width, ys, width, yerr=es, label=name)
        ax.set_xticks([1, 2], ["layer 1", "layer 2"])
        ax.set_ylabel("PSNR (dB)")
        lows = [float(np.min(c[2])) for c in curves]
        ax.set_ylim(min(lows) - 3, None)
    else:
        for name, xs, ys, es in curves:
            ax.errorbar(xs, ys, yerr=es, marker="o", ms=3, capsize=2, label=name)
        ax.set_xlabel("test SNR (dB)")
        ax.set_ylabel("PSNR (dB)")
        ax.grid(True, alpha=0.3)
    if title:
        ax.set_title(title)
    ax.legend(fontsize="small")
    fig.tight_layout()
    meta = {"Date": None} if output.suffix.lower() in (".svg", ".pdf") else None
    fig.savefig(output, metadata=meta)
    plt.close(fig)

    data_path = output.with_suffix(".csv")
    with open(data_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["curve", "x", "psnr_db", "std_err"])
        for name, xs, ys, es in curves:
            for j, (xv, yv) in enumerate(zip(xs, ys)):
                writer.writerow([name, xv, f"{yv:.6f}", "" if es is None else f"{es[j]:.6f}"])
    return [output, data_path]
