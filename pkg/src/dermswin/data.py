"""Dataset discovery, deterministic stratified splitting, preprocessing,
and train-time augmentation.

Directory layout: ``root/<ClassName>/*.{png,jpg,jpeg,bmp}``. Classes are
sorted lexicographically so class ids are stable across machines. The split
is stratified per class with largest-remainder rounding: 20% of all samples
become the test set, then 20% of the remainder becomes validation, which is
what turns 16630 samples into 3326 / 2661 / 10643.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError
from .tensor import Tensor

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
SPLITS = ("train", "val", "test")
DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.5, 0.5, 0.5)


@dataclass
class DatasetIndex:
    root: Path
    class_names: list[str]
    samples: list[tuple[Path, int]]  # (absolute path, class id)
    splits: list[str]  # parallel to samples
    seed: int
    skipped: int = 0

    def of_split(self, split: str) -> list[tuple[Path, int]]:
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}, expected one of {SPLITS}")
        return [s for s, assigned in zip(self.samples, self.splits) if assigned == split]

    def counts(self) -> dict[str, int]:
        return {name: self.splits.count(name) for name in SPLITS}


def _round_half_up(x: Fraction) -> int:
    return int(math.floor(x + Fraction(1, 2)))


def _largest_remainder(quotas: Sequence[Fraction], total: int) -> list[int]:
    """Integer allocation summing to `total`; ties go to the earlier entry."""
    floors = [int(math.floor(q)) for q in quotas]
    leftover = total - sum(floors)
    order = sorted(range(len(quotas)), key=lambda i: (floors[i] - quotas[i], i))
    for i in order[:leftover]:
        floors[i] += 1
    return floors


def stratified_split_counts(
    class_totals: Sequence[int], test_frac: float = 0.2, val_frac: float = 0.2
) -> list[tuple[int, int, int]]:
    """Per-class (train, val, test) counts.

    test gets `test_frac` of the global total, validation gets `val_frac`
    of what remains; both are apportioned to classes by largest remainder so
    the global totals are hit exactly. Quotas are computed in exact rational
    arithmetic: with float fractions, equal remainders would be separated by
    representation noise and the tie-break would become arbitrary.
    """
    n = sum(class_totals)
    tf = Fraction(str(test_frac))
    vf = Fraction(str(val_frac))
    test = _largest_remainder([tf * c for c in class_totals], _round_half_up(tf * n))
    rest = [c - t for c, t in zip(class_totals, test)]
    val = _largest_remainder([vf * r for r in rest], _round_half_up(vf * sum(rest)))
    train = [r - v for r, v in zip(rest, val)]
    return list(zip(train, val, test))


def _readable_image(path: Path) -> bool:
    try:
        with Image.open(path) as img:
            img.verify()
        return True
    except (UnidentifiedImageError, OSError):
        return False


def index_dataset(root, seed: int = 0, check_readable: bool = True) -> DatasetIndex:
    """Scan a class-per-folder tree and assign deterministic stratified splits."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise DataError(f"dataset root {root} needs at least 2 class directories, found {len(class_dirs)}")

    class_names = [p.name for p in class_dirs]
    per_class: list[list[Path]] = []
    skipped = 0
    for cdir in class_dirs:
        files = sorted(p for p in cdir.iterdir()
                       if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
        if check_readable:
            kept = [p for p in files if _readable_image(p)]
            bad = len(files) - len(kept)
            if bad:
                log.warning("skipping %d unreadable image(s) under %s", bad, cdir)
                skipped += bad
            files = kept
        if not files:
            raise DataError(f"class directory {cdir} contains no usable images")
        per_class.append(files)

    allocations = stratified_split_counts([len(f) for f in per_class])
    samples: list[tuple[Path, int]] = []
    splits: list[str] = []
    for cid, (files, (n_train, n_val, n_test)) in enumerate(zip(per_class, allocations)):
        order = np.random.default_rng([seed, cid]).permutation(len(files))
        for rank, idx in enumerate(order):
            if rank < n_test:
                assigned = "test"
            elif rank < n_test + n_val:
                assigned = "val"
            else:
                assigned = "train"
            samples.append((files[idx], cid))
            splits.append(assigned)
    return DatasetIndex(root, class_names, samples, splits, seed, skipped)


# -- image loading and preprocessing -----------------------------------------


def load_image(path) -> np.ndarray:
    """Decode to float32 RGB in [0, 1], shape (H, W, 3)."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            return np.asarray(rgb, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers; same-size input is copied."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(img.dtype)[:, None, None]
    wx = (xs - x0).astype(img.dtype)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def standardize(img: np.ndarray, mean: Sequence[float] = DEFAULT_MEAN,
                std: Sequence[float] = DEFAULT_STD) -> np.ndarray:
    mean = np.asarray(mean, dtype=img.dtype)
    std = np.asarray(std, dtype=img.dtype)
    if np.any(std <= 0):
        raise ConfigError("standardization std must be positive")
    return (img - mean) / std


def load_and_preprocess(path, target: int = 224, mean: Sequence[float] = DEFAULT_MEAN,
                        std: Sequence[float] = DEFAULT_STD) -> np.ndarray:
    return standardize(resize_bilinear(load_image(path), target, target), mean, std)


def channel_stats(index: DatasetIndex, split: str = "train", target: int = 224,
                  limit: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of the resized [0,1] images in a split."""
    paths = index.of_split(split)
    if limit is not None:
        paths = paths[:limit]
    if not paths:
        raise DataError(f"split {split!r} is empty")
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    count = 0
    for path, _ in paths:
        img = resize_bilinear(load_image(path), target, target).astype(np.float64)
        total += img.sum(axis=(0, 1))
        total_sq += (img * img).sum(axis=(0, 1))
        count += img.shape[0] * img.shape[1]
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 1e-12)
    return mean, np.sqrt(var)


# -- augmentation -------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    enabled: bool = True
    h_flip_p: float = 0.5
    v_flip_p: float = 0.0
    rotation_deg: float = 15.0
    crop_scale: tuple[float, float] = (0.8, 1.0)
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.0

    def __post_init__(self):
        for name in ("h_flip_p", "v_flip_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {p}")
        if self.rotation_deg < 0:
            raise ConfigError("rotation_deg must be non-negative")
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        for name in ("brightness", "contrast", "saturation"):
            j = getattr(self, name)
            if not 0.0 <= j < 1.0:
                raise ConfigError(f"{name} jitter must lie in [0, 1), got {j}")


def augment(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Spatial transforms then photometric jitter; shape preserved.

    Operates on [0,1] images before standardization. Each transform is
    skipped entirely when its parameter is zero/degenerate, so a policy of
    zeros is an exact identity.
    """
    if not policy.enabled:
        return img
    h, w = img.shape[:2]
    if policy.h_flip_p > 0 and rng.random() < policy.h_flip_p:
        img = img[:, ::-1]
    if policy.v_flip_p > 0 and rng.random() < policy.v_flip_p:
        img = img[::-1]
    if policy.rotation_deg > 0:
        from scipy import ndimage

        angle = rng.uniform(-policy.rotation_deg, policy.rotation_deg)
        img = ndimage.rotate(img, angle, axes=(1, 0), reshape=False, order=1, mode="nearest")
    lo, hi = policy.crop_scale
    if hi < 1.0 or lo < 1.0:
        scale = rng.uniform(lo, hi)
        ch = max(1, int(round(h * scale)))
        cw = max(1, int(round(w * scale)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        img = resize_bilinear(img[top:top + ch, left:left + cw], h, w)
    if policy.brightness > 0:
        img = img * rng.uniform(1 - policy.brightness, 1 + policy.brightness)
    if policy.contrast > 0:
        factor = rng.uniform(1 - policy.contrast, 1 + policy.contrast)
        gray_mean = (img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype)).mean()
        img = (img - gray_mean) * factor + gray_mean
    if policy.saturation > 0:
        factor = rng.uniform(1 - policy.saturation, 1 + policy.saturation)
        gray = img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype)
        img = (img - gray[..., None]) * factor + gray[..., None]
    return np.clip(img, 0.0, 1.0).astype(np.float32, copy=False)


# -- batching -----------------------------------------------------------------


def batch_iterator(
    index: DatasetIndex,
    split: str,
    batch_size: int = 16,
    seed: int = 0,
    epoch: int = 0,
    policy: Optional[AugmentPolicy] = None,
    target: int = 224,
    mean: Sequence[float] = DEFAULT_MEAN,
    std: Sequence[float] = DEFAULT_STD,
) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Epoch-deterministic shuffled batches; the final short batch is kept.

    Every byte is a function of (index.seed-derived file order, seed, epoch):
    the permutation is keyed by (seed, epoch) and each sample's augmentation
    rng by (seed, epoch, its position in the split listing).
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    items = index.of_split(split)
    if not items:
        raise DataError(f"split {split!r} is empty")
    order = np.random.default_rng([seed, epoch]).permutation(len(items))
    for start in range(0, len(items), batch_size):
        chunk = order[start:start + batch_size]
        images = np.empty((len(chunk), target, target, 3), dtype=np.float32)
        labels = np.empty(len(chunk), dtype=np.int64)
        for row, idx in enumerate(chunk):
            path, cid = items[idx]
            img = resize_bilinear(load_image(path), target, target)
            if policy is not None and policy.enabled:
                img = augment(img, policy, np.random.default_rng([seed, epoch, int(idx)]))
            images[row] = standardize(img, mean, std)
            labels[row] = cid
        yield Tensor(images), labels


# -- manifest -----------------------------------------------------------------


def save_manifest(index: DatasetIndex, path) -> None:
    lines = []
    for (sample, cid), split in zip(index.samples, index.splits):
        rel = sample.relative_to(index.root).as_posix()
        lines.append(f"{rel}\t{index.class_names[cid]}\t{split}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_manifest(path, root, seed: int = 0) -> DatasetIndex:
    root = Path(root)
    samples: list[tuple[Path, int]] = []
    splits: list[str] = []
    rows: list[tuple[str, str, str]] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in SPLITS:
            raise DataError(f"malformed manifest line {lineno}: {line!r}")
        rows.append(tuple(parts))
    if not rows:
        raise DataError(f"manifest {path} is empty")
    class_names = sorted({cls for _, cls, _ in rows})
    ids = {name: i for i, name in enumerate(class_names)}
    for rel, cls, split in rows:
        samples.append((root / rel, ids[cls]))
        splits.append(split)
    return DatasetIndex(root, class_names, samples, splits, seed)


# -- synthetic data for tests and demos ---------------------------------------


def make_synthetic_dataset(root, counts: Optional[dict[str, int]] = None,
                           size: int = 32, seed: int = 0) -> Path:
    """Write a small class-per-folder PNG tree with class-coded colors."""
    root = Path(root)
    if counts is None:
        counts = {f"class{i}": 20 for i in range(5)}
    rng = np.random.default_rng(seed)
    palette = rng.uniform(0.2, 0.8, size=(len(counts), 3))
    for cid, (name, n) in enumerate(sorted(counts.items())):
        cdir = root / name
        cdir.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            base = palette[cid] + rng.uniform(-0.15, 0.15, size=3)
            img = np.clip(base + rng.normal(0, 0.03, size=(size, size, 3)), 0, 1)
            arr = (img * 255).astype(np.uint8)
            Image.fromarray(arr).save(cdir / f"img_{i:04d}.png")
    return root
