"""Pre-image recovery and counterfactual synthesis.

All DIP modes optimize the generator weights so that the generated image
reproduces a target encoding; the extra terms are

* ``dip_regularized``: ``lambda1 * (loss_estimate(x) - target_loss)**2``
* ``counterfactual``: the above plus ``lambda2 * CE(F(x), target_class)``

The explicit baselines (``explicit_tv``, ``explicit_alpha``) optimize the
pixels directly with a hand-written prior instead of a generator.
"""
from __future__ import annotations

import contextlib
import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core_model import DEFAULT_BLOCK_INDEX, as_batch, encode, predict_class, predictor_forward
from .data import difference_map, psnr, save_image
from .dip_generator import DEFAULT_CHANNELS, generate, init_generator
from .errors import InputError, NumericalError
from .loss_estimator import estimate_loss, require_trained

MODES = ("dip_only", "dip_regularized", "counterfactual", "explicit_tv", "explicit_alpha")
DEFAULT_LAMBDA_EXPLICIT = {"explicit_tv": 1e-4, "explicit_alpha": 1e-6}
TV_EPS = 1e-8


@dataclass
class InversionConfig:
    block_index: int = DEFAULT_BLOCK_INDEX
    iterations: int = 5000
    step_size: float = 0.01
    lambda1: float = 0.02
    lambda2: float = 0.1
    target_loss: float = 0.0
    target_class: int | None = None
    mode: str = "dip_only"
    lambda_explicit: float | None = None
    alpha: float = 6.0
    seed: int = 0
    jitter_std: float = 0.0
    generator_channels: tuple = DEFAULT_CHANNELS
    generator_batch_norm: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "counterfactual" and self.target_class is None:
            raise InputError("counterfactual mode needs a target_class")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InputError("lambda1 and lambda2 must be non-negative")
        if self.iterations < 1:
            raise InputError("iterations must be >= 1")
        if not 1 <= self.block_index <= 4:
            raise InputError("block_index must lie in [1, 4]")
        if self.lambda_explicit is None and self.mode in DEFAULT_LAMBDA_EXPLICIT:
            self.lambda_explicit = DEFAULT_LAMBDA_EXPLICIT[self.mode]
        self.generator_channels = tuple(int(c) for c in self.generator_channels)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["generator_channels"] = list(self.generator_channels)
        return d


@dataclass
class PreimageResult:
    preimage: np.ndarray
    objective_trajectory: np.ndarray
    final_encoding_distance: float
    final_estimated_loss: float
    predicted_class: int
    psnr_vs_reference: float | None = None
    best_iteration: int = 0
    probabilities: np.ndarray | None = None


@dataclass
class CounterfactualResult(PreimageResult):
    difference_map: np.ndarray | None = None
    original_class: int = -1
    target_class: int = -1

    @property
    def flipped(self) -> bool:
        return self.predicted_class == self.target_class


# ---------------------------------------------------------------- objective terms

def encoding_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between two feature maps."""
    if a.shape != b.shape:
        raise InputError(f"feature map shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def loss_regularizer(x, model, head, target_loss: float = 0.0) -> torch.Tensor:
    """M(x) = (loss_estimate(x) - target_loss)**2 for a single image."""
    require_trained(head)
    _, taps = predictor_forward(x, model)
    return (estimate_loss(taps, head)[0] - target_loss) ** 2


def tv_regularizer(x: torch.Tensor) -> torch.Tensor:
    """Isotropic total variation of an (H, W, C) image.

    Forward differences with a replicated last row/column; each pixel
    contributes ``sqrt(|grad|^2 + eps^2) - eps`` so the norm is smooth at 0
    and a constant image scores exactly zero.
    """
    x = torch.as_tensor(x)
    dy = torch.zeros_like(x)
    dx = torch.zeros_like(x)
    dy[:-1] = x[1:] - x[:-1]
    dx[:, :-1] = x[:, 1:] - x[:, :-1]
    sq = (dy ** 2 + dx ** 2).sum(dim=-1)
    return (torch.sqrt(sq + TV_EPS ** 2) - TV_EPS).sum()


def alpha_norm_regularizer(x, alpha: float = 6.0) -> torch.Tensor:
    return torch.as_tensor(x).abs().pow(alpha).mean()


def _targeted_ce(logits: torch.Tensor, target_class: int) -> torch.Tensor:
    return F.cross_entropy(logits, torch.tensor([target_class]))


@contextlib.contextmanager
def _frozen(*modules):
    """Eval mode and no parameter grads for the duration of a run."""
    modules = [m for m in modules if m is not None]
    state = [(m, m.training, [p.requires_grad for p in m.parameters()]) for m in modules]
    for m in modules:
        m.eval()
        m.requires_grad_(False)
    try:
        yield
    finally:
        for m, training, flags in state:
            m.train(training)
            for p, flag in zip(m.parameters(), flags):
                p.requires_grad_(flag)


def dip_objective(x, target_encoding, model, head, block_index, lambda1=0.0, lambda2=0.0,
                  target_loss=0.0, target_class=None):
    """Composite objective for one (H, W, C) image.

    Terms with zero weight are not evaluated at all, so lower-order
    objectives are reproduced exactly as special cases.
    """
    if lambda1 == 0 and lambda2 == 0:
        return encoding_distance(encode(x, block_index, model), target_encoding)
    logits, taps = model(as_batch(x, model))
    obj = encoding_distance(taps[block_index - 1][0], target_encoding)
    if lambda1 != 0:
        require_trained(head)
        obj = obj + lambda1 * (estimate_loss(taps, head)[0] - target_loss) ** 2
    if lambda2 != 0:
        obj = obj + lambda2 * _targeted_ce(logits, target_class)
    return obj


# ---------------------------------------------------------------- optimization

def _expected_encoding_shape(model, block_index):
    h, w, c = model.input_shape
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        return tuple(encode(torch.zeros(h, w, c, dtype=dtype), block_index, model).shape)


@torch.no_grad()
def _summarize(x, target_encoding, model, head, block_index, reference):
    dist = float(encoding_distance(encode(x, block_index, model), target_encoding))
    logits, taps = predictor_forward(x, model)
    est = float(estimate_loss(taps, head)[0]) if head is not None else math.nan
    label, probs = predict_class(x, model)
    img = x.detach().cpu().numpy().astype(np.float32)
    ps = psnr(img, reference) if reference is not None else None
    return img, dist, est, label, probs, ps


def _optimize(step_fn, params, config, tracked):
    """Shared Adam loop with best-so-far tracking.

    ``step_fn()`` returns ``(objective, image)`` for the current parameters.
    """
    opt = torch.optim.Adam(params, lr=config.step_size)
    traj = np.empty(config.iterations, dtype=np.float64)
    best_val, best_x, best_it = math.inf, None, 0
    for it in range(config.iterations):
        obj, x = step_fn()
        val = float(obj.detach())
        traj[it] = val
        if not math.isfinite(val):
            raise NumericalError(f"objective became non-finite at iteration {it}", trajectory=traj[:it + 1])
        if val < best_val:
            best_val, best_x, best_it = val, x.detach().clone(), it
        opt.zero_grad(set_to_none=True)
        obj.backward()
        opt.step()
        if tracked is not None:
            tracked()
    return best_x, traj, best_it


def _run_dip(target_encoding, model, head, config, lambda1, lambda2, target_class):
    h, w, c = model.input_shape
    dtype = next(model.parameters()).dtype
    gen = init_generator(
        (h, w, c), seed=config.seed, channels=config.generator_channels,
        jitter_std=config.jitter_std, batch_norm=config.generator_batch_norm, dtype=dtype,
    )
    gen.train()
    rng = torch.Generator().manual_seed(config.seed + 1) if config.jitter_std > 0 else None

    def step():
        x = generate(gen, rng)
        return dip_objective(
            x, target_encoding, model, head, config.block_index,
            lambda1, lambda2, config.target_loss, target_class,
        ), x

    return _optimize(step, list(gen.parameters()), config, None)


def _run_explicit(target_encoding, model, config):
    h, w, c = model.input_shape
    dtype = next(model.parameters()).dtype
    g = torch.Generator().manual_seed(config.seed)
    x = (0.5 + 0.1 * (torch.rand((h, w, c), generator=g, dtype=dtype) - 0.5)).requires_grad_(True)
    if config.mode == "explicit_tv":
        reg = tv_regularizer
    else:
        def reg(img):
            return alpha_norm_regularizer(img, config.alpha)

    def step():
        dist = encoding_distance(encode(x, config.block_index, model), target_encoding)
        return dist + config.lambda_explicit * reg(x), x

    def project():
        with torch.no_grad():
            x.clamp_(0.0, 1.0)

    return _optimize(step, [x], config, project)


def recover_preimage(target_encoding, reference, model, head, config: InversionConfig) -> PreimageResult:
    """Invert ``target_encoding`` (the output of ``encode`` at ``config.block_index``).

    Returns the iterate with the lowest objective seen over
    ``config.iterations`` steps; ``reference``, when given, is only used to
    report PSNR.
    """
    target_encoding = torch.as_tensor(target_encoding).detach()
    expected = _expected_encoding_shape(model, config.block_index)
    if tuple(target_encoding.shape) != expected:
        raise InputError(
            f"target encoding shape {tuple(target_encoding.shape)} does not match block "
            f"{config.block_index} output {expected}"
        )
    dtype = next(model.parameters()).dtype
    target_encoding = target_encoding.to(dtype)
    if reference is not None:
        reference = np.asarray(reference, dtype=np.float32)

    with _frozen(model, head):
        if config.mode.startswith("explicit"):
            best_x, traj, best_it = _run_explicit(target_encoding, model, config)
        else:
            lambda1 = 0.0 if config.mode == "dip_only" else config.lambda1
            lambda2 = config.lambda2 if config.mode == "counterfactual" else 0.0
            if lambda1 > 0:
                require_trained(head)
            best_x, traj, best_it = _run_dip(
                target_encoding, model, head, config, lambda1, lambda2, config.target_class,
            )
        img, dist, est, label, probs, ps = _summarize(
            best_x, target_encoding, model, head, config.block_index, reference,
        )
    return PreimageResult(
        preimage=img,
        objective_trajectory=traj,
        final_encoding_distance=dist,
        final_estimated_loss=est,
        predicted_class=label,
        psnr_vs_reference=ps,
        best_iteration=best_it,
        probabilities=probs,
    )


def generate_counterfactual(x0, target_class: int, model, head, config: InversionConfig) -> CounterfactualResult:
    """Counterfactual for ``x0`` towards ``target_class``.

    The target encoding is ``encode(x0)``; the generator is pushed to keep
    it while the classifier output moves to ``target_class`` and, with
    ``lambda1 > 0``, while the loss estimate stays near ``target_loss``.
    """
    x0 = np.asarray(x0)
    if x0.dtype.kind != "f":
        x0 = x0.astype(np.float32)
    k = model.num_classes
    if not isinstance(target_class, (int, np.integer)) or not 0 <= target_class < k:
        raise InputError(f"target class {target_class!r} outside [0, {k - 1}]")
    with _frozen(model, head):
        original, _ = predict_class(x0, model)
        if original == target_class:
            raise InputError(f"image is already predicted as class {target_class}")
        target = encode(torch.from_numpy(x0), config.block_index, model).detach()
    cf_config = InversionConfig(**{**config.as_dict(), "mode": "counterfactual", "target_class": int(target_class)})
    res = recover_preimage(target, x0, model, head, cf_config)
    return CounterfactualResult(
        **{f: getattr(res, f) for f in PreimageResult.__dataclass_fields__},
        difference_map=difference_map(res.preimage, x0),
        original_class=original,
        target_class=int(target_class),
    )


# ---------------------------------------------------------------- result archive

def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(e) for e in v)
    return str(v)


def write_config_echo(path, items: dict):
    with open(path, "w") as fh:
        for key, value in items.items():
            fh.write(f"{key} = {'' if value is None else format_value(value)}\n")


def write_metrics(path, row: dict):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row))
        writer.writeheader()
        writer.writerow({k: ("" if v is None else format_value(v)) for k, v in row.items()})


def write_result_archive(run_dir, result: PreimageResult, config_items: dict, metrics: dict,
                         extra_images: dict | None = None) -> Path:
    """Persist one run: images (PNG + raw .npy), trajectory CSV, config echo, metrics CSV."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=False)
    stem = "counterfactual" if isinstance(result, CounterfactualResult) else "preimage"
    save_image(run_dir / f"{stem}.png", result.preimage)
    np.save(run_dir / f"{stem}.npy", result.preimage)
    if isinstance(result, CounterfactualResult) and result.difference_map is not None:
        d = result.difference_map
        peak = d.max()
        save_image(run_dir / "difference.png", d / peak if peak > 0 else d)
        np.save(run_dir / "difference.npy", d)
    for name, img in (extra_images or {}).items():
        save_image(run_dir / f"{name}.png", img)
    with open(run_dir / "trajectory.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "objective"])
        for i, v in enumerate(result.objective_trajectory):
            writer.writerow([i, repr(float(v))])
    write_config_echo(run_dir / "config.txt", config_items)
    write_metrics(run_dir / "metrics.csv", metrics)
    return run_dir
