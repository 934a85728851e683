"""Residual classifier with per-stage feature taps.

Images enter every public function channel-last, ``(H, W, C)`` or
``(N, H, W, C)``, with intensities in [0, 1]. Feature maps come back in
torch's channel-first layout, ``(C, h, w)`` per image.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError, NumericalError

DESK_STAGE_CHANNELS = (16, 32, 64, 128)
RESNET18_STAGE_CHANNELS = (64, 128, 256, 512)
DEFAULT_BLOCK_INDEX = 1


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class PredictorModel(nn.Module):
    """Four-stage residual classifier F_theta.

    ``arch="desk"`` is a small 3x3-stem network for 32x32 inputs;
    ``arch="resnet18"`` reproduces the ResNet-18 stem (7x7/2 conv + max-pool)
    for 224x224 inputs. Both keep two basic blocks per stage and expose the
    output of every stage as a tap.
    """

    def __init__(
        self,
        num_classes: int,
        stage_channels: Sequence[int] = DESK_STAGE_CHANNELS,
        input_shape: tuple[int, int, int] = (32, 32, 3),
        arch: str = "desk",
        blocks_per_stage: int = 2,
    ):
        super().__init__()
        if num_classes < 1:
            raise InputError("num_classes must be positive")
        if len(stage_channels) != 4 or any(c < 1 for c in stage_channels):
            raise InputError("stage_channels must be 4 positive integers")
        if arch not in ("desk", "resnet18"):
            raise InputError(f"unknown arch {arch!r}")
        self.num_classes = int(num_classes)
        self.stage_channels = tuple(int(c) for c in stage_channels)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.arch = arch
        self.blocks_per_stage = int(blocks_per_stage)

        in_ch = self.input_shape[2]
        width = self.stage_channels[0]
        if arch == "desk":
            self.stem = nn.Sequential(
                nn.Conv2d(in_ch, width, 3, padding=1, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
            )
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(in_ch, width, 7, stride=2, padding=3, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(3, stride=2, padding=1),
            )

        stages = []
        prev = width
        for i, ch in enumerate(self.stage_channels):
            stride = 1 if i == 0 else 2
            blocks = [BasicBlock(prev, ch, stride)]
            blocks += [BasicBlock(ch, ch) for _ in range(self.blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            prev = ch
        self.stages = nn.ModuleList(stages)
        self.fc = nn.Linear(prev, self.num_classes)

        self.register_buffer("mean", torch.zeros(in_ch))
        self.register_buffer("std", torch.ones(in_ch))

    def set_normalization(self, mean, std):
        mean = torch.as_tensor(mean, dtype=self.mean.dtype)
        std = torch.as_tensor(std, dtype=self.std.dtype)
        if mean.shape != self.mean.shape or std.shape != self.std.shape:
            raise InputError("normalization statistics must have one entry per channel")
        if not torch.all(std > 0):
            raise InputError("normalization std must be positive")
        self.mean.copy_(mean)
        self.std.copy_(std)

    def normalize(self, x):
        return (x - self.mean.view(1, -1, 1, 1)) / self.std.view(1, -1, 1, 1)

    def features(self, x, upto: int = 4):
        """Taps of stages 1..``upto`` for a normalized NCHW batch."""
        h = self.stem(x)
        taps = []
        for stage in self.stages[:upto]:
            h = stage(h)
            taps.append(h)
        return taps

    def forward(self, x):
        """``x`` is an NCHW batch in [0, 1]; returns ``(logits, taps)``."""
        taps = self.features(self.normalize(x))
        pooled = F.adaptive_avg_pool2d(taps[-1], 1).flatten(1)
        return self.fc(pooled), taps


def build_predictor(num_classes: int, arch: str = "desk", input_shape=None, **kwargs) -> PredictorModel:
    if arch == "resnet18":
        kwargs.setdefault("stage_channels", RESNET18_STAGE_CHANNELS)
        input_shape = input_shape or (224, 224, 3)
    else:
        input_shape = input_shape or (32, 32, 3)
    return PredictorModel(num_classes, input_shape=input_shape, arch=arch, **kwargs)


def _param_dtype(model: nn.Module):
    return next(model.parameters()).dtype


def as_batch(images, model: PredictorModel) -> torch.Tensor:
    """Convert channel-last image(s) into an NCHW tensor matching ``model``.

    Torch inputs keep their autograd graph; numpy inputs are copied.
    """
    x = images if torch.is_tensor(images) else torch.as_tensor(np.asarray(images))
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise InputError(f"expected (H, W, C) or (N, H, W, C) images, got shape {tuple(x.shape)}")
    if x.shape[0] == 0:
        raise InputError("image batch is empty")
    if tuple(x.shape[1:]) != model.input_shape:
        raise InputError(
            f"image shape {tuple(x.shape[1:])} does not match model input shape {model.input_shape}"
        )
    return x.to(_param_dtype(model)).permute(0, 3, 1, 2)


def _check_finite(t: torch.Tensor, what: str):
    if not torch.isfinite(t).all():
        raise NumericalError(f"non-finite values in {what}")


def predictor_forward(images, model: PredictorModel):
    """Logits ``(N, K)`` and the 4 stage taps for a batch of images."""
    logits, taps = model(as_batch(images, model))
    _check_finite(logits, "logits")
    for i, t in enumerate(taps):
        _check_finite(t, f"tap {i + 1}")
    return logits, taps


def primary_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Per-sample cross-entropy ``-log softmax(logits)[label]``.

    Labels are 0-based class indices.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.dim() != 2 or labels.dim() != 1 or labels.shape[0] != logits.shape[0]:
        raise InputError("logits must be (N, K) and labels (N,)")
    k = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k - 1}]")
    return F.cross_entropy(logits, labels, reduction="none")


def encode(image, block_index: int, model: PredictorModel) -> torch.Tensor:
    """Psi: the tap of stage ``block_index`` (1-based) on the normalized image.

    Only the stem and the stages up to ``block_index`` are evaluated; the ops
    are the same as in :func:`predictor_forward`, so the result is bit-equal
    to the matching tap. A single (H, W, C) image gives a (C, h, w) map.
    """
    if not isinstance(block_index, (int, np.integer)) or not 1 <= block_index <= 4:
        raise InputError(f"block_index must be an integer in [1, 4], got {block_index!r}")
    single = (image.dim() if torch.is_tensor(image) else np.ndim(image)) == 3
    x = as_batch(image, model)
    out = model.features(model.normalize(x), upto=int(block_index))[-1]
    return out[0] if single else out


def predict_class(image, model: PredictorModel):
    """Return ``(label, probabilities)``; ties go to the lowest index."""
    with torch.no_grad():
        logits, _ = predictor_forward(image, model)
    probs = torch.softmax(logits[0].double(), dim=0)
    return int(torch.argmax(logits[0])), probs.numpy()
