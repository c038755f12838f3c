"""Patch datasets: binary on-disk format, synthetic generation, splits.

Pixels are stored as uint8 (n, 3, h, w) and normalized to [0, 1] floats
when handed to the trainer; labels are 0 (negative) / 1 (positive).

PSET container, all integers little-endian:

    magic   4 bytes  b"PSET"
    version u32      (currently 1)
    n, c, h, w  u32 each
    labels  n bytes
    pixels  n*c*h*w bytes, row-major, sample-major

The synthetic task mimics the signature the classifier has to learn on
real tissue patches: positives carry at least five small dark compact
blobs on a light textured background, negatives at most one. The class
imbalance of the default config matches a roughly 2.96:1 negative to
positive ratio.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

MAGIC = b"PSET"
VERSION = 1

# negative:positive imbalance of the reference patch collection
NEG_COUNT_REFERENCE = 64_381
POS_COUNT_REFERENCE = 21_773


@dataclass
class PatchSet:
    pixels: np.ndarray          # uint8 (n, c, h, w)
    labels: np.ndarray          # uint8 (n,)
    name: str = ""
    seed: int | None = None
    source: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be 4-d, got shape {self.pixels.shape}")
        if len(self.labels) != len(self.pixels):
            raise ValueError(
                f"{len(self.labels)} labels for {len(self.pixels)} patches")
        bad = set(np.unique(self.labels)) - {0, 1}
        if bad:
            raise ValueError(f"labels must be 0/1, found {sorted(bad)}")

    def __len__(self):
        return len(self.pixels)

    @property
    def shape(self):
        return self.pixels.shape

    @property
    def input_shape(self):
        return tuple(self.pixels.shape[1:])

    def as_float(self, dtype=np.float32):
        return self.pixels.astype(dtype) / dtype(255.0)

    def subset(self, indices, name=""):
        return PatchSet(pixels=self.pixels[indices], labels=self.labels[indices],
                        name=name or self.name, seed=self.seed, source=self.source)


@dataclass
class Splits:
    train: PatchSet
    val: PatchSet
    test: PatchSet


def save_patchset(pset, path):
    n, c, h, w = pset.pixels.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIII", VERSION, n, c, h, w))
        fh.write(np.ascontiguousarray(pset.labels, dtype=np.uint8).tobytes())
        fh.write(np.ascontiguousarray(pset.pixels, dtype=np.uint8).tobytes())


def load_patchset(path, name=""):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad magic: not a PSET file", offset=0)
    if len(data) < 24:
        raise FormatError(
            f"truncated header: expected 24 bytes, got {len(data)}", offset=len(data))
    version, n, c, h, w = struct.unpack("<IIIII", data[4:24])
    if version != VERSION:
        raise FormatError(f"unsupported PSET version {version}", offset=4)
    expected = 24 + n + n * c * h * w
    if len(data) != expected:
        raise FormatError(
            f"truncated file: expected {expected} bytes "
            f"(header 24 + {n} labels + {n * c * h * w} pixels), got {len(data)}",
            offset=len(data))
    labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=24).copy()
    pixels = np.frombuffer(data, dtype=np.uint8, count=n * c * h * w,
                           offset=24 + n).reshape(n, c, h, w).copy()
    return PatchSet(pixels=pixels, labels=labels, name=name or str(path),
                    source="file")


def default_counts(total):
    """Split a requested total into (n_pos, n_neg) at the reference
    imbalance ratio."""
    frac_pos = POS_COUNT_REFERENCE / (POS_COUNT_REFERENCE + NEG_COUNT_REFERENCE)
    n_pos = round(total * frac_pos)
    return n_pos, total - n_pos


def _paint_background(rng, c, h, w):
    base = rng.uniform(170, 230, size=(c, 1, 1))
    coarse = rng.uniform(-18, 18, size=(c, h // 8 + 1, w // 8 + 1))
    coarse = np.repeat(np.repeat(coarse, 8, axis=1), 8, axis=2)[:, :h, :w]
    fine = rng.uniform(-10, 10, size=(c, h, w))
    return np.clip(base + coarse + fine, 140, 255)


def _place_blobs(rng, img, count):
    """Scatter `count` non-touching dark disks; returns actual placements.

    Raises when the patch is too small to hold the requested blobs with
    the separation the label oracle relies on.
    """
    c, h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    placed = []  # (cy, cx, r)
    for _ in range(count):
        r = int(rng.integers(2, 5))
        for attempt in range(300):
            if attempt > 150:
                r = 2
            cy = int(rng.integers(r + 1, h - r - 1)) if h - 2 * r - 2 > 0 else r + 1
            cx = int(rng.integers(r + 1, w - r - 1)) if w - 2 * r - 2 > 0 else r + 1
            if all((cy - py) ** 2 + (cx - px) ** 2 >= (r + pr + 3) ** 2
                   for py, px, pr in placed):
                placed.append((cy, cx, r))
                break
        else:
            raise ValueError(
                f"cannot place {count} separated blobs in a {h}x{w} patch")
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        color = rng.uniform(20, 80, size=(c, 1))
        jitter = rng.uniform(-10, 10, size=(c, int(mask.sum())))
        img[:, mask] = np.clip(color + jitter, 5, 95)
    return placed


def generate_synthetic(n_pos, n_neg, h=100, w=100, seed=0):
    """Deterministic labeled patches: positives have 5-8 dark blobs,
    negatives 0-1."""
    rng = np.random.default_rng(seed)
    n = n_pos + n_neg
    pixels = np.empty((n, 3, h, w), dtype=np.uint8)
    labels = np.empty(n, dtype=np.uint8)
    for i in range(n):
        positive = i < n_pos
        img = _paint_background(rng, 3, h, w)
        n_blobs = int(rng.integers(5, 9)) if positive else int(rng.integers(0, 2))
        if n_blobs:
            _place_blobs(rng, img, n_blobs)
        pixels[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        labels[i] = 1 if positive else 0
    order = rng.permutation(n)
    return PatchSet(pixels=pixels[order], labels=labels[order],
                    name=f"synthetic-{seed}", seed=seed, source="synthetic")


def stratified_split(pset, fractions, seed=0):
    """Per-class proportional split into train/val/test.

    Fractions must sum to 1; each class is shuffled once with the given
    seed and allocated by cumulative rounding, which keeps class ratios
    within one sample of exact per split.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ValueError("fractions must be (train, val, test)")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    rng = np.random.default_rng(seed)
    n_splits = sum(1 for f in fractions if f > 0)
    buckets = ([], [], [])
    for cls in np.unique(pset.labels):
        idx = np.flatnonzero(pset.labels == cls)
        if len(idx) < n_splits:
            raise ValueError(
                f"class {cls} has {len(idx)} samples, fewer than the "
                f"{n_splits} requested splits")
        idx = rng.permutation(idx)
        cuts = np.rint(np.cumsum(fractions) * len(idx)).astype(int)
        buckets[0].append(idx[:cuts[0]])
        buckets[1].append(idx[cuts[0]:cuts[1]])
        buckets[2].append(idx[cuts[1]:cuts[2]])
    names = ("train", "val", "test")
    parts = [np.sort(np.concatenate(b)) if b else np.array([], dtype=int)
             for b in buckets]
    return Splits(*(pset.subset(p, name=f"{pset.name}/{nm}")
                    for p, nm in zip(parts, names)))
