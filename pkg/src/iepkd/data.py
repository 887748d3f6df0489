"""Datasets: procedural shape/color images and the 3073-byte-record binary format."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SIZE = 16

# base RGB per color group; images jitter around these
PALETTE = np.array([
    [220, 60, 50],
    [60, 190, 70],
    [60, 90, 220],
    [230, 200, 50],
], dtype=np.float64)


def _shape_mask(kind: int, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == 0:  # disk
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == 1:  # square
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == 2:  # triangle, apex up
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == 3:  # plus
        t = max(r * 0.3, 1.0)
        return ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    if kind == 4:  # ring
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (r * 0.55) ** 2)
    if kind == 5:  # diamond
        return np.abs(dy) + np.abs(dx) <= r
    if kind == 6:  # horizontal bar
        return (np.abs(dy) <= r * 0.35) & (np.abs(dx) <= r)
    if kind == 7:  # x-cross
        t = max(r * 0.3, 1.0)
        return ((np.abs(dy - dx) <= t) | (np.abs(dy + dx) <= t)) & (np.abs(dy) <= r) & (np.abs(dx) <= r)
    raise ValueError(f"no shape with index {kind}")


N_SHAPES = 8


@dataclass
class DatasetHandle:
    """Train/test arrays plus the sampling and augmentation settings applied to training."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    source: str = "synthetic"
    sample_rate: float = 1.0
    random_crop: bool = True
    horizontal_flip: bool = True
    crop_padding: int = 2
    meta: dict = field(default_factory=dict, repr=False)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.train_x.shape[1:]

    def sampled(self, rate: float, seed: int) -> DatasetHandle:
        idx = stratified_indices(self.train_y, rate, self.num_classes, seed)
        meta = dict(self.meta, train_indices=idx)
        for key in ("train_color", "train_mask"):
            if key in self.meta:
                meta[key] = self.meta[key][idx]
        return replace(self, train_x=self.train_x[idx], train_y=self.train_y[idx],
                       sample_rate=rate, meta=meta)


def stratified_indices(labels: np.ndarray, rate: float, num_classes: int, seed: int) -> np.ndarray:
    """Seeded class-balanced subset of ``round(rate * len(labels))`` indices, sorted.

    Per-class counts differ by at most one (as far as class sizes allow).
    """
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"sample rate must lie in (0, 1], got {rate}")
    labels = np.asarray(labels)
    if rate == 1.0:
        return np.arange(labels.size)
    total = int(round(rate * labels.size))
    rng = np.random.default_rng(seed)
    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in range(num_classes)]
    quota = [total // num_classes + (1 if c < total % num_classes else 0) for c in range(num_classes)]
    picked = [pool[:q] for pool, q in zip(pools, quota)]
    short = total - sum(len(p) for p in picked)
    # classes too small for their quota hand the remainder to the others
    c = 0
    while short > 0:
        pool, have = pools[c % num_classes], len(picked[c % num_classes])
        if have < len(pool):
            picked[c % num_classes] = pool[:have + 1]
            short -= 1
        c += 1
    return np.sort(np.concatenate(picked))


def _split(labels: np.ndarray, num_classes: int, rng: np.random.Generator, test_fraction: float = 0.2):
    train, test = [], []
    for c in range(num_classes):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(test_fraction * idx.size))
        test.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def gen_synthetic(n: int, classes: int, seed: int, noise: float = 24.0) -> DatasetHandle:
    """Render ``n`` 16x16 RGB images of ``classes`` shape classes.

    The class is the shape; the foreground color group is drawn independently
    of the class, so color carries low-level similarity and shape carries the
    label.  Classes are balanced and split 80/20 per class.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if classes > N_SHAPES:
        raise ValueError(f"at most {N_SHAPES} shape classes are available")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    colors = rng.integers(0, len(PALETTE), size=n)
    images = np.empty((n, SIZE, SIZE, 3), dtype=np.uint8)
    masks = np.empty((n, SIZE, SIZE), dtype=bool)
    for i in range(n):
        r = rng.uniform(4.0, 6.5)
        cy, cx = SIZE / 2 + rng.uniform(-2.5, 2.5, size=2)
        mask = _shape_mask(int(labels[i]), SIZE, cy, cx, r)
        bg = rng.uniform(90, 150) + rng.uniform(-15, 15, size=3)
        fg = PALETTE[colors[i]] + rng.uniform(-25, 25, size=3)
        img = np.where(mask[..., None], fg, bg) + rng.normal(0.0, noise, size=(SIZE, SIZE, 3))
        images[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        masks[i] = mask
    tr, te = _split(labels, classes, rng)
    meta = {"train_color": colors[tr], "test_color": colors[te],
            "train_mask": masks[tr], "test_mask": masks[te]}
    return DatasetHandle(images[tr], labels[tr].astype(np.int64), images[te], labels[te].astype(np.int64),
                         classes, source="synthetic", meta=meta)


RECORD_PIXELS = 3072


def read_binary_records(path: str | Path, label_bytes: int = 1, side: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Read ``label_bytes`` label byte(s) + 3072 channel-planar pixels per record.

    The last label byte is used (fine label for two-byte layouts).  Images are
    returned as ``(N, 32, 32, 3)`` uint8.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    rec = label_bytes + RECORD_PIXELS
    if raw.size % rec:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of the {rec}-byte record")
    raw = raw.reshape(-1, rec)
    labels = raw[:, label_bytes - 1].astype(np.int64)
    images = raw[:, label_bytes:].reshape(-1, 3, side, side).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def load_binary_dataset(train_files, test_files, num_classes: int, label_bytes: int = 1) -> DatasetHandle:
    def load(files):
        parts = [read_binary_records(f, label_bytes) for f in files]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    tx, ty = load(train_files)
    vx, vy = load(test_files)
    return DatasetHandle(tx, ty, vx, vy, num_classes, source="tiny-image", crop_padding=4)


# channel statistics used to standardize uint8 pixels
PIXEL_MEAN = 127.5
PIXEL_STD = 64.0


def to_float(images: np.ndarray) -> np.ndarray:
    return (images.astype(np.float64) - PIXEL_MEAN) / PIXEL_STD


def augment(images: np.ndarray, rng: np.random.Generator, random_crop: bool, flip: bool,
            padding: int) -> np.ndarray:
    n, h, w, _ = images.shape
    out = images
    if random_crop and padding > 0:
        padded = np.pad(images, ((0, 0), (padding, padding), (padding, padding), (0, 0)), mode="reflect")
        offs = rng.integers(0, 2 * padding + 1, size=(n, 2))
        out = np.stack([padded[i, y:y + h, x:x + w] for i, (y, x) in enumerate(offs)])
    if flip:
        mask = rng.random(n) < 0.5
        out = out.copy() if out is images else out
        out[mask] = out[mask, :, ::-1]
    return out


class BatchStream:
    """Epoch-shuffled minibatches with optional augmentation, driven by one generator."""

    def __init__(self, data: DatasetHandle, batch_size: int, rng: np.random.Generator, augmentation: bool = True):
        if batch_size < 2:
            raise ValueError("batch size must be at least 2")
        self.data = data
        self.batch_size = min(batch_size, data.train_x.shape[0])
        self.rng = rng
        self.augmentation = augmentation
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        if self._pos + self.batch_size > self._order.size:
            self._order = self.rng.permutation(self.data.train_x.shape[0])
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        x = self.data.train_x[idx]
        if self.augmentation:
            x = augment(x, self.rng, self.data.random_crop, self.data.horizontal_flip, self.data.crop_padding)
        return to_float(x), self.data.train_y[idx]

    def state(self) -> dict:
        return {"order": self._order.tolist(), "pos": self._pos}

    def restore(self, state: dict) -> None:
        self._order = np.asarray(state["order"], dtype=np.int64)
        self._pos = int(state["pos"])
