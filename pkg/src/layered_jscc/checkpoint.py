"""Checkpoint directories: ``params.npz`` + ``metadata.json`` (+ ``history.jsonl``)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch

from .errors import IoFailure, SchemaVersionMismatch
from .schemes import SchemeModel
from .training import TrainHistory

SCHEMA_VERSION = 1
PARAMS_FILE = "params.npz"
METADATA_FILE = "metadata.json"
HISTORY_FILE = "history.jsonl"


def save_checkpoint(model: SchemeModel, history: Optional[TrainHistory], path,
                    extra: Optional[dict] = None) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
        np.savez(path / PARAMS_FILE, **arrays)
        meta = {
            "schema_version": SCHEMA_VERSION,
            "model_id": model.model_id,
            "model": model.metadata(),
            "parameter_count": model.parameter_count(),
            "history": history.to_dict() if history is not None else None,
            "training_summary": history.summary() if history is not None else None,
        }
        if extra:
            meta.update(extra)
        (path / METADATA_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        if history is not None:
            with open(path / HISTORY_FILE, "w") as f:
                for rec in history.records():
                    f.write(json.dumps(rec) + "\n")
    except OSError as exc:
        raise IoFailure(f"could not write checkpoint {path}: {exc}") from exc
    return path


def read_metadata(path) -> dict:
    try:
        meta = json.loads((Path(path) / METADATA_FILE).read_text())
    except OSError as exc:
        raise IoFailure(f"could not read checkpoint metadata in {path}: {exc}") from exc
    version = meta.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"checkpoint {path} has schema version {version}, this build reads {SCHEMA_VERSION}")
    return meta


def load_checkpoint(path) -> Tuple[SchemeModel, Optional[TrainHistory]]:
    path = Path(path)
    meta = read_metadata(path)
    model = SchemeModel.from_metadata(meta["model"])
    try:
        with np.load(path / PARAMS_FILE) as arrays:
            state = {k: torch.from_numpy(arrays[k].copy()) for k in arrays.files}
    except OSError as exc:
        raise IoFailure(f"could not read parameters in {path}: {exc}") from exc
    first = next(iter(state.values()), None)
    if first is not None and first.dtype != next(model.parameters()).dtype:
        model.to(first.dtype)
    model.load_state_dict(state)
    model.eval()
    history = meta.get("history")
    return model, TrainHistory.from_dict(history) if history is not None else None
