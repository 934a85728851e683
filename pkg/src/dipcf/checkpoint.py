"""Single-file checkpoint archive for a trained predictor + loss estimator."""
from __future__ import annotations

import os
from dataclasses import asdict
from pathlib import Path

import torch

from .core_model import build_predictor
from .errors import InputError
from .loss_estimator import CheckpointBundle, EpochLog, LossEstimatorHead, TrainConfig, config_dict

FORMAT_VERSION = 1


def save_checkpoint(bundle: CheckpointBundle, path) -> Path:
    path = Path(path)
    model = bundle.model
    payload = {
        "format_version": FORMAT_VERSION,
        "num_classes": model.num_classes,
        "stage_channel_dims": list(model.stage_channels),
        "input_shape": list(model.input_shape),
        "arch": model.arch,
        "blocks_per_stage": model.blocks_per_stage,
        "hidden_dim": bundle.head.hidden_dim,
        "normalization": {"mean": model.mean.tolist(), "std": model.std.tolist()},
        "predictor": model.state_dict(),
        "loss_estimator": bundle.head.state_dict(),
        "head_trained": bool(bundle.head.trained),
        "class_names": list(bundle.class_names),
        "train_config": config_dict(bundle.config),
        "log": [asdict(row) for row in bundle.log],
        "metadata": dict(bundle.metadata),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> CheckpointBundle:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise InputError(f"unsupported checkpoint format version {version!r}")
    model = build_predictor(
        payload["num_classes"],
        arch=payload["arch"],
        input_shape=tuple(payload["input_shape"]),
        stage_channels=tuple(payload["stage_channel_dims"]),
        blocks_per_stage=payload["blocks_per_stage"],
    )
    model.load_state_dict(payload["predictor"])
    head = LossEstimatorHead(model.stage_channels, payload["hidden_dim"])
    head.load_state_dict(payload["loss_estimator"])
    head.trained = payload["head_trained"]
    bundle = CheckpointBundle(
        model=model,
        head=head,
        config=TrainConfig(**payload["train_config"]),
        class_names=payload["class_names"],
        log=[EpochLog(**row) for row in payload["log"]],
        metadata=payload["metadata"],
    )
    return bundle.eval()
