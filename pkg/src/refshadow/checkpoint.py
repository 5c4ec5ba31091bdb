"""Versioned JSON checkpoints: model config, vocabulary and named parameters."""
from __future__ import annotations

import json
import numpy as np
from dataclasses import asdict
from pathlib import Path

from .errors import CheckpointError
from .model import ModelConfig, ModelParams, Vocabulary, init_params

FORMAT_VERSION = 1


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams,
                    vocab: Vocabulary) -> None:
    payload = {
        "version": FORMAT_VERSION,
        "config": asdict(cfg),
        "vocab": vocab.token_to_index,
        "params": {name: t.data.tolist() for name, t in params.named_tensors()},
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams, Vocabulary]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint does not parse: {e}") from e
    if payload.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version "
                              f"{payload.get('version')!r}")
    cfg = ModelConfig(**payload["config"])
    vocab = Vocabulary(payload["vocab"])
    params = init_params(cfg, vocab)
    stored = payload["params"]
    for name, t in params.named_tensors():
        if name not in stored:
            raise CheckpointError(f"missing parameter {name!r}")
        arr = np.asarray(stored[name], dtype=np.float64)
        if arr.shape != t.data.shape:
            raise CheckpointError(
                f"parameter {name!r}: shape {arr.shape} does not match "
                f"expected {t.data.shape}")
        t.data = arr
    return cfg, params, vocab
