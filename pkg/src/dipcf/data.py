"""Datasets, corruptions and image-quality metrics.

Images are float32 ``(H, W, C)`` arrays in [0, 1]; labels are 0-based.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import InputError

SYNTHETIC_CLASSES = ["small_dark", "large_dark", "large_light"]
SYNTHETIC_SIZE = 32

# lesion radius (px) separating small from large, and tone separating dark from light
RADIUS_SPLIT = 7.0
TONE_SPLIT = 0.5


@dataclass
class LabeledDataset:
    items: list
    class_names: list
    masks: list | None = None
    names: list = field(default_factory=list)

    def __post_init__(self):
        k = len(self.class_names)
        bad = [i for i, (_, y) in enumerate(self.items) if not 0 <= y < k]
        if bad:
            raise InputError(f"labels out of range [0, {k - 1}] at items {bad[:10]}")
        if self.masks is not None:
            if len(self.masks) != len(self.items):
                raise InputError("masks must align with items")
            for i, ((img, _), m) in enumerate(zip(self.items, self.masks)):
                if m.shape != img.shape[:2]:
                    raise InputError(f"mask {i} shape {m.shape} != image spatial dims {img.shape[:2]}")

    def __len__(self):
        return len(self.items)

    @property
    def labels(self):
        return np.array([y for _, y in self.items], dtype=np.int64)

    def subset(self, indices):
        indices = list(indices)
        return LabeledDataset(
            items=[self.items[i] for i in indices],
            class_names=list(self.class_names),
            masks=None if self.masks is None else [self.masks[i] for i in indices],
            names=[self.names[i] for i in indices] if self.names else [],
        )


@dataclass
class CorruptionSpec:
    kind: str
    patch_size: int = 8
    fill_value: float = 0.5
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("occlusion", "blur"):
            raise InputError(f"corruption kind must be 'occlusion' or 'blur', got {self.kind!r}")
        if self.patch_size < 0:
            raise InputError("patch_size must be non-negative")
        if not 0.0 <= self.fill_value <= 1.0:
            raise InputError("fill_value must lie in [0, 1]")
        if not math.isfinite(self.sigma) or self.sigma < 0:
            raise InputError("sigma must be finite and non-negative")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "CorruptionSpec":
        """Parse ``occlusion:8`` or ``blur:1.5``."""
        kind, _, arg = text.partition(":")
        try:
            if kind == "occlusion":
                return cls("occlusion", patch_size=int(arg or 8), seed=seed)
            if kind == "blur":
                return cls("blur", sigma=float(arg or 1.0), seed=seed)
        except ValueError as exc:
            raise InputError(f"bad corruption argument in {text!r}") from exc
        raise InputError(f"unknown corruption {text!r}; use occlusion:<patch> or blur:<sigma>")


# ---------------------------------------------------------------- image io

def load_image(path, size=None) -> np.ndarray:
    """Decode an image file to float32 RGB in [0, 1], box-resampled to ``size`` (H, W)."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.Resampling.BOX)
        return np.asarray(im, dtype=np.float32) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, img: np.ndarray):
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def save_mask(path, mask: np.ndarray):
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def load_image_folder(root_path, labels_file=None, size=(SYNTHETIC_SIZE, SYNTHETIC_SIZE),
                      class_names=None) -> LabeledDataset:
    """Load images listed in a ``filename,label`` CSV.

    Items are sorted by filename. Without ``class_names`` the classes are the
    sorted distinct labels of the CSV; with it, unknown labels are an error.
    All missing files / unknown labels are reported together.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise InputError(f"image folder not found: {root}")
    labels_file = Path(labels_file) if labels_file is not None else root / "labels.csv"
    if not labels_file.is_file():
        raise InputError(f"labels file not found: {labels_file}")

    with open(labels_file, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"filename", "label"} <= set(reader.fieldnames):
            raise InputError(f"{labels_file} must have a 'filename,label' header")
        rows = [(r["filename"].strip(), r["label"].strip()) for r in reader]

    if class_names is None:
        class_names = sorted({lbl for _, lbl in rows})
    class_index = {name: i for i, name in enumerate(class_names)}

    missing = sorted(f for f, _ in rows if not (root / f).is_file())
    unknown = sorted({lbl for _, lbl in rows if lbl not in class_index})
    problems = []
    if missing:
        problems.append("missing files: " + ", ".join(missing))
    if unknown:
        problems.append("unknown class names: " + ", ".join(unknown))
    if problems:
        raise InputError("; ".join(problems))

    items, names = [], []
    for fname, lbl in sorted(rows):
        items.append((load_image(root / fname, size), class_index[lbl]))
        names.append(fname)
    return LabeledDataset(items=items, class_names=list(class_names), names=names)


# ---------------------------------------------------------------- synthetic lesions

def synthetic_class(radius: float, tone: float) -> int:
    """Class rule for synthetic lesions: radius and tone decide everything."""
    if radius < RADIUS_SPLIT:
        return 0
    return 1 if tone < TONE_SPLIT else 2


def _lesion_params(cls: int, rng: np.random.Generator):
    if cls == 0:
        radius = rng.uniform(4.0, RADIUS_SPLIT - 0.5)
        tone = rng.uniform(0.0, TONE_SPLIT - 0.1)
    else:
        radius = rng.uniform(RADIUS_SPLIT + 0.5, 11.0)
        tone = rng.uniform(0.0, TONE_SPLIT - 0.1) if cls == 1 else rng.uniform(TONE_SPLIT + 0.1, 1.0)
    return radius, tone


def render_lesion(radius, tone, rng: np.random.Generator, size: int = SYNTHETIC_SIZE):
    """One textured skin patch with an elliptical lesion; returns (image, mask)."""
    skin = np.array([0.87, 0.70, 0.60]) + rng.uniform(-0.05, 0.05, size=3)
    texture = ndimage.gaussian_filter(rng.normal(size=(size, size)), 2.0)
    texture /= texture.std() + 1e-12
    img = skin[None, None, :] + 0.03 * texture[..., None] + 0.015 * rng.normal(size=(size, size, 3))

    cy, cx = size / 2 + rng.uniform(-3, 3, size=2)
    aspect = rng.uniform(0.75, 1.0)
    angle = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    rho = np.sqrt((u / radius) ** 2 + (v / (radius * aspect)) ** 2)
    mask = rho <= 1.0

    dark = np.array([0.30, 0.17, 0.10])
    light = np.array([0.66, 0.45, 0.33])
    color = dark + tone * (light - dark)
    mottle = ndimage.gaussian_filter(rng.normal(size=(size, size)), 1.0)
    mottle /= mottle.std() + 1e-12
    lesion = color[None, None, :] * (1.0 + 0.08 * mottle[..., None])
    # one-pixel soft border
    alpha = np.clip((1.0 - rho) * radius + 0.5, 0.0, 1.0)[..., None]
    img = alpha * lesion + (1 - alpha) * img
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def make_synthetic_lesions(n: int, seed: int = 0) -> LabeledDataset:
    """``n`` 32x32 lesion images over 3 classes, balanced to within one, with masks."""
    k = len(SYNTHETIC_CLASSES)
    if n < 2 * k:
        raise InputError(f"need at least {2 * k} samples, got {n}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % k)
    items, masks = [], []
    for cls in labels:
        radius, tone = _lesion_params(int(cls), rng)
        img, mask = render_lesion(radius, tone, rng)
        assert synthetic_class(radius, tone) == cls
        items.append((img, int(cls)))
        masks.append(mask)
    return LabeledDataset(
        items=items,
        class_names=list(SYNTHETIC_CLASSES),
        masks=masks,
        names=[f"synthetic_{i:05d}" for i in range(n)],
    )


# ---------------------------------------------------------------- splitting

def stratified_split_indices(labels, fraction: float = 0.9, seed: int = 0):
    if not 0.0 < fraction < 1.0:
        raise InputError("fraction must lie in (0, 1)")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, holdout = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < 2:
            raise InputError(f"class {cls} has {len(idx)} sample(s); stratification needs >= 2")
        idx = rng.permutation(idx)
        n_train = min(max(int(round(fraction * len(idx))), 1), len(idx) - 1)
        train.extend(idx[:n_train].tolist())
        holdout.extend(idx[n_train:].tolist())
    return sorted(train), sorted(holdout)


def stratified_split(dataset: LabeledDataset, fraction: float = 0.9, seed: int = 0):
    """Per-class split into ``(train, holdout)``; each class keeps ``fraction`` in train."""
    train, holdout = stratified_split_indices(dataset.labels, fraction, seed)
    return dataset.subset(train), dataset.subset(holdout)


# ---------------------------------------------------------------- corruptions

def corrupt(image: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    if spec.kind == "occlusion":
        p = spec.patch_size
        if p > min(h, w):
            raise InputError(f"patch_size {p} larger than image {h}x{w}")
        out = image.copy()
        if p == 0:
            return out
        rng = np.random.default_rng(spec.seed)
        top = int(rng.integers(0, h - p + 1))
        left = int(rng.integers(0, w - p + 1))
        out[top:top + p, left:left + p, :] = spec.fill_value
        return out
    if spec.sigma == 0:
        return image.copy()
    r = int(math.ceil(3 * spec.sigma))
    out = ndimage.gaussian_filter(
        image.astype(np.float64), sigma=(spec.sigma, spec.sigma, 0), radius=(r, r, 0), mode="reflect"
    )
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------- metrics

def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse < 1e-10:
        return 100.0
    return float(10.0 * np.log10(1.0 / mse))


def difference_map(x, x0) -> np.ndarray:
    """Channel-summed absolute difference, (H, W)."""
    x = np.asarray(x, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x.shape != x0.shape:
        raise InputError(f"shape mismatch {x.shape} vs {x0.shape}")
    return np.abs(x - x0).sum(axis=-1)


def localization_ratio(diff, mask) -> float:
    """Share of difference mass that falls inside ``mask``."""
    diff = np.asarray(diff, dtype=np.float64)
    mask = np.asarray(mask)
    if diff.shape != mask.shape:
        raise InputError(f"shape mismatch {diff.shape} vs {mask.shape}")
    if np.any(diff < 0):
        raise InputError("difference map must be non-negative")
    total = diff.sum()
    if total <= 0:
        raise InputError("localization ratio undefined for an all-zero difference map")
    return float(diff[mask.astype(bool)].sum() / total)
