"""Auxiliary loss estimator trained jointly with the predictor.

The head reads the four stage taps, pools each one spatially, maps it
through ``Linear + ReLU`` and fuses the concatenation into a scalar loss
estimate. It is trained with a pairwise margin ranking objective so that
only the ordering of per-sample losses is learned.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.stats import spearmanr

from .core_model import PredictorModel, build_predictor, predictor_forward, primary_loss
from .errors import InputError, StateError

log = logging.getLogger(__name__)

PAIRINGS = ("half", "all")


class LossEstimatorHead(nn.Module):
    def __init__(self, tap_channels, hidden_dim: int = 128):
        super().__init__()
        tap_channels = tuple(int(c) for c in tap_channels)
        if len(tap_channels) != 4:
            raise InputError("the loss estimator needs exactly 4 taps")
        self.tap_channels = tap_channels
        self.hidden_dim = int(hidden_dim)
        self.transforms = nn.ModuleList(nn.Linear(c, self.hidden_dim) for c in tap_channels)
        self.fusion = nn.Linear(4 * self.hidden_dim, 1)
        # flipped by train_joint / checkpoint loading; the inversion regularizer refuses a fresh head
        self.trained = False

    def forward(self, taps):
        feats = []
        for tap, lin in zip(taps, self.transforms):
            pooled = tap.mean(dim=(2, 3))
            feats.append(F.relu(lin(pooled)))
        return self.fusion(torch.cat(feats, dim=1)).squeeze(1)


def estimate_loss(taps, head: LossEstimatorHead) -> torch.Tensor:
    """Loss estimate per sample from a list of 4 NCHW taps."""
    if len(taps) != len(head.tap_channels):
        raise InputError(f"expected {len(head.tap_channels)} taps, got {len(taps)}")
    got = tuple(t.shape[1] for t in taps)
    if got != head.tap_channels:
        raise InputError(f"tap channels {got} do not match head {head.tap_channels}")
    return head(taps)


def make_pairs(n: int, scheme: str = "half"):
    """Ordered index pairs (i, j) for a batch of ``n`` samples.

    ``half`` splits the batch in two and pairs i with i + n/2 in both
    orders; ``all`` lists every ordered pair with i != j.
    """
    if scheme == "half":
        if n % 2:
            raise InputError(f"half pairing needs an even batch, got {n}")
        h = n // 2
        first = []
        second = []
        for k in range(h):
            first += [k, k + h]
            second += [k + h, k]
    elif scheme == "all":
        first = [i for i in range(n) for j in range(n) if i != j]
        second = [j for i in range(n) for j in range(n) if i != j]
    else:
        raise InputError(f"unknown pairing {scheme!r}; choose from {PAIRINGS}")
    return torch.tensor(first, dtype=torch.long), torch.tensor(second, dtype=torch.long)


def ranking_loss(true_losses, estimates, margin: float = 1.0, pairing="half") -> torch.Tensor:
    """Sum over pairs of ``max(0, -I(l_i > l_j) * (e_i - e_j) + margin)``.

    ``pairing`` is a scheme name or an explicit ``(i_idx, j_idx)`` pair of
    index tensors. Pairs whose true losses are not ordered (I = 0) add the
    constant ``max(0, margin)`` and carry no gradient. Terms are accumulated
    left to right in pair order.
    """
    true_losses = torch.as_tensor(true_losses)
    estimates = torch.as_tensor(estimates)
    if true_losses.shape != estimates.shape or true_losses.dim() != 1:
        raise InputError(
            f"true_losses {tuple(true_losses.shape)} and estimates {tuple(estimates.shape)} "
            "must be vectors of equal length"
        )
    if isinstance(pairing, str):
        i, j = make_pairs(len(estimates), pairing)
    else:
        i, j = (torch.as_tensor(p, dtype=torch.long) for p in pairing)
    if i.numel() == 0:
        return estimates.new_zeros(())
    ell = true_losses.detach().to(estimates.dtype)
    indicator = (ell[i] > ell[j]).to(estimates.dtype)
    terms = torch.clamp_min(-indicator * (estimates[i] - estimates[j]) + margin, 0.0)
    # cumsum is a sequential scan on CPU; a tree reduction would change the rounding
    return torch.cumsum(terms, 0)[-1]


def total_loss(primary, auxiliary, beta1: float = 1.0, beta2: float = 0.5):
    return beta1 * primary + beta2 * auxiliary


@dataclass
class TrainConfig:
    beta1: float = 1.0
    beta2: float = 0.5
    margin: float = 1.0
    batch_size: int = 32
    epochs: int = 20
    step_size: float = 1e-3
    seed: int = 0
    split_fraction: float = 0.9
    hidden_dim: int = 128
    pairing: str = "half"
    arch: str = "desk"
    stage_channels: tuple = (16, 32, 64, 128)

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise InputError("batch_size must be a positive even integer")
        if not 0.0 < self.split_fraction < 1.0:
            raise InputError("split_fraction must lie in (0, 1)")
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if self.pairing not in PAIRINGS:
            raise InputError(f"pairing must be one of {PAIRINGS}")
        self.stage_channels = tuple(int(c) for c in self.stage_channels)


@dataclass
class EpochLog:
    epoch: int
    L_pri: float
    L_aux: float
    val_accuracy: float
    val_rank_correlation: float


@dataclass
class CheckpointBundle:
    model: PredictorModel
    head: LossEstimatorHead
    config: TrainConfig
    class_names: list
    log: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def eval(self):
        self.model.eval()
        self.head.eval()
        return self


def _stack(dataset, indices):
    images = np.stack([dataset.items[i][0] for i in indices]).astype(np.float32)
    labels = np.array([dataset.items[i][1] for i in indices], dtype=np.int64)
    return torch.from_numpy(images), torch.from_numpy(labels)


@torch.no_grad()
def evaluate_holdout(model, head, images, labels, batch_size: int = 256):
    """Accuracy, Spearman(loss estimate, true loss), and the raw vectors."""
    model.eval()
    head.eval()
    losses, estimates, correct = [], [], 0
    for start in range(0, len(images), batch_size):
        xb, yb = images[start:start + batch_size], labels[start:start + batch_size]
        logits, taps = predictor_forward(xb, model)
        losses.append(primary_loss(logits, yb))
        estimates.append(estimate_loss(taps, head))
        correct += int((logits.argmax(1) == yb).sum())
    losses = torch.cat(losses).double().numpy()
    estimates = torch.cat(estimates).double().numpy()
    rho = float(spearmanr(estimates, losses).statistic) if len(losses) > 1 else float("nan")
    return correct / len(images), rho, losses, estimates


def n_steps_per_epoch(n: int, batch_size: int) -> int:
    full, rest = divmod(n, batch_size)
    return full + (1 if rest >= 2 else 0)


def train_joint(dataset, config: TrainConfig | None = None, holdout=None) -> CheckpointBundle:
    """Train predictor and loss estimator jointly on ``dataset``.

    The dataset is split with a stratified split at ``config.split_fraction``
    unless ``holdout`` is passed, in which case ``dataset`` is used entirely
    for training. Per-epoch metrics land in ``bundle.log``.
    """
    from .data import stratified_split

    config = config or TrainConfig()
    if dataset is None or len(dataset.items) == 0:
        raise InputError("training dataset is empty")
    labels_all = {lbl for _, lbl in dataset.items}
    if len(labels_all) < 2:
        raise InputError("training needs at least 2 classes")

    if holdout is None:
        train, holdout = stratified_split(dataset, config.split_fraction, config.seed)
    else:
        train = dataset
    if len(train.items) < config.batch_size:
        raise InputError(
            f"{len(train.items)} training samples cannot fill a batch of {config.batch_size}"
        )

    x_train, y_train = _stack(train, range(len(train.items)))
    x_val, y_val = _stack(holdout, range(len(holdout.items)))
    num_classes = len(dataset.class_names)

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    model = build_predictor(
        num_classes,
        arch=config.arch,
        input_shape=tuple(x_train.shape[1:]),
        stage_channels=config.stage_channels,
    )
    # statistics are per channel over all training pixels
    model.set_normalization(x_train.mean(dim=(0, 1, 2)), x_train.std(dim=(0, 1, 2)))
    head = LossEstimatorHead(model.stage_channels, config.hidden_dim)
    params = list(model.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=config.step_size)
    steps_per_epoch = max(1, n_steps_per_epoch(len(x_train), config.batch_size))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs * steps_per_epoch)

    history = []
    n = len(x_train)
    for epoch in range(1, config.epochs + 1):
        model.train()
        head.train()
        perm = torch.randperm(n, generator=gen)
        sum_pri = sum_aux = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            if len(idx) % 2:
                idx = idx[:-1]
            if len(idx) < 2:
                continue
            logits, taps = model(x_train[idx].permute(0, 3, 1, 2))
            per_sample = primary_loss(logits, y_train[idx])
            estimates = head(taps)
            pi, pj = make_pairs(len(idx), config.pairing)
            l_aux = ranking_loss(per_sample.detach(), estimates, config.margin, (pi, pj)) / len(pi)
            l_pri = per_sample.mean()
            loss = total_loss(l_pri, l_aux, config.beta1, config.beta2)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            sum_pri += float(l_pri.detach())
            sum_aux += float(l_aux.detach())
            n_batches += 1

        acc, rho, _, _ = evaluate_holdout(model, head, x_val, y_val)
        row = EpochLog(epoch, sum_pri / n_batches, sum_aux / n_batches, acc, rho)
        history.append(row)
        log.info(
            "epoch %d  L_pri %.4f  L_aux %.4f  val_acc %.4f  val_rho %.4f",
            epoch, row.L_pri, row.L_aux, acc, rho,
        )

    offset = anchor_estimates(model, head, x_train, y_train)
    head.trained = True
    return CheckpointBundle(
        model=model,
        head=head,
        config=config,
        class_names=list(dataset.class_names),
        log=history,
        metadata={"n_train": len(train.items), "n_holdout": len(holdout.items), "anchor_offset": offset},
    )


@torch.no_grad()
def anchor_estimates(model, head, images, labels) -> float:
    """Fix the additive constant the ranking objective leaves free.

    The fusion bias is shifted by the least-squares offset between the
    estimates and the true losses on ``images``, so the estimates average to
    the mean training loss. A target loss of 0 then sits at the
    high-confidence level of the training data. Returns the applied shift.
    """
    _, _, losses, estimates = evaluate_holdout(model, head, images, labels)
    shift = float(losses.mean() - estimates.mean())
    head.fusion.bias += shift
    return shift


def require_trained(head: LossEstimatorHead):
    if not getattr(head, "trained", False):
        raise StateError("loss estimator head has not been trained")


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["stage_channels"] = list(d["stage_channels"])
    return d
