"""Datasets and the simplified random-augmentation pool.

Synthetic class-incremental streams come from seeded Gaussian blobs whose
means sit on a sphere; real data loads from a small CSV format
(`label,f0,f1,...`, optionally gzipped). Augmentation draws a few ops
from a small pool at a single magnitude knob; magnitude zero is the
identity and outputs always stay inside the declared value range.
"""
from __future__ import annotations

import csv
import gzip
import io
from dataclasses import dataclass, replace

import numpy as np

from .errors import ArgumentError, ConfigurationError, ParseError
from .seeding import derive_rng

Array = np.ndarray

IMAGE_OPS = ("shift", "flip-h", "cutout")
VECTOR_OPS = ("gaussian-noise", "scale")
OP_POOL = IMAGE_OPS + VECTOR_OPS


@dataclass
class Dataset:
    inputs: Array                       # (n, d) float64
    labels: Array                       # (n,) int64
    n_classes: int
    value_range: tuple[float, float] | None = None
    image_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ArgumentError("inputs must be a 2-D (n, d) array")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ArgumentError("labels must align with inputs")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ArgumentError("labels outside the declared class count")
        if self.value_range is not None and self.inputs.size:
            lo, hi = self.value_range
            if self.inputs.min() < lo - 1e-12 or self.inputs.max() > hi + 1e-12:
                raise ArgumentError("inputs outside the declared value range")
        if self.image_shape is not None:
            h, w, c = self.image_shape
            if h * w * c != self.inputs.shape[1]:
                raise ArgumentError("image_shape does not match the feature width")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx])

    def class_indices(self, c: int) -> Array:
        return np.nonzero(self.labels == c)[0]


def gen_gaussian_tasks(n_classes: int, d: int, separation: float,
                       n_per_class: int, seed: int = 0) -> Dataset:
    """Seeded Gaussian blobs with means on a sphere of radius `separation`.

    Unit isotropic noise is added per example and the whole sample is
    affinely mapped per dimension into [0, 1].
    """
    if n_classes < 2 or d < 2:
        raise ArgumentError("need at least 2 classes and 2 dimensions")
    if n_per_class < 1:
        raise ArgumentError("n_per_class must be positive")
    rng = derive_rng(seed, purpose="data")
    gauss = rng.normal(size=(max(n_classes, d), d)) if n_classes <= d else None
    if gauss is not None:
        # orthonormal directions (seeded rotation) keep every pair of means
        # at distance separation * sqrt(2); falls back to random directions
        # when there are more classes than dimensions
        q, r = np.linalg.qr(gauss.T)
        dirs = (q * np.sign(np.diag(r))).T[:n_classes]
    else:
        dirs = rng.normal(size=(n_classes, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = separation * dirs
    xs, ys = [], []
    for c in range(n_classes):
        xs.append(means[c] + rng.normal(size=(n_per_class, d)))
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    inputs = np.concatenate(xs)
    lo = inputs.min(axis=0)
    hi = inputs.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    inputs = (inputs - lo) / span
    return Dataset(inputs, np.concatenate(ys), n_classes, value_range=(0.0, 1.0))


# ---------------------------------------------------------------------------
# CSV loading


def _open_text(path: str):
    if str(path).endswith(".gz"):
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline="")
    return open(path, "r", encoding="utf-8", newline="")


def load_csv_dataset(path: str) -> Dataset:
    """Load `label,f0,f1,...` rows; values validated into [0, 1]."""
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: missing header row") from None
        if not header or header[0] != "label" or len(header) < 2:
            raise ParseError(f"{path}: header must be 'label,f0,f1,...'")
        width = len(header) - 1
        labels: list[int] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width + 1:
                raise ParseError(f"{path}:{lineno}: expected {width + 1} columns, "
                                 f"got {len(row)}")
            try:
                label = int(row[0])
                feats = [float(v) for v in row[1:]]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric cell") from None
            if label < 0:
                raise ParseError(f"{path}:{lineno}: negative label")
            if any(not np.isfinite(v) or v < 0.0 or v > 1.0 for v in feats):
                raise ParseError(f"{path}:{lineno}: feature outside [0, 1]")
            labels.append(label)
            rows.append(feats)
    inputs = np.asarray(rows, dtype=np.float64).reshape(len(rows), width)
    labels_arr = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels_arr.max()) + 1 if labels_arr.size else 0
    return Dataset(inputs, labels_arr, max(n_classes, 1) if labels_arr.size else 0,
                   value_range=(0.0, 1.0))


def save_csv_dataset(ds: Dataset, path: str) -> None:
    """Write a dataset in the loadable CSV format (gzipped when `.gz`)."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wt", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(ds.input_dim)])
        for y, row in zip(ds.labels, ds.inputs):
            writer.writerow([int(y)] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    n_ops: int = 1
    magnitude: float = 0.5
    op_pool: tuple[str, ...] = VECTOR_OPS
    seed: int = 0

    def __post_init__(self):
        if self.n_ops < 1:
            raise ConfigurationError("n_ops must be positive")
        if not 0.0 <= self.magnitude <= 1.0:
            raise ConfigurationError("magnitude must lie in [0, 1]")
        unknown = set(self.op_pool) - set(OP_POOL)
        if unknown or not self.op_pool:
            raise ConfigurationError(f"bad op pool {self.op_pool!r}")


def apply_op(x: Array, op: str, magnitude: float, rng: np.random.Generator,
             value_range: tuple[float, float] | None = None,
             image_shape: tuple[int, int, int] | None = None) -> Array:
    """Apply one augmentation op to a single flat example."""
    lo, hi = value_range if value_range is not None else (0.0, 1.0)
    span = hi - lo
    if op in IMAGE_OPS:
        if image_shape is None:
            raise ConfigurationError(f"op {op!r} needs image-shaped data")
        h, w, c = image_shape
        img = x.reshape(h, w, c)
        if op == "flip-h":
            return img[:, ::-1, :].reshape(-1).copy()
        if op == "shift":
            k = int(np.floor(magnitude * min(h, w) / 4))
            dy = int(rng.integers(-k, k + 1)) if k else 0
            dx = int(rng.integers(-k, k + 1)) if k else 0
            out = np.full_like(img, lo)
            ys = slice(max(dy, 0), h + min(dy, 0))
            xs = slice(max(dx, 0), w + min(dx, 0))
            out[ys, xs] = img[slice(max(-dy, 0), h + min(-dy, 0)),
                              slice(max(-dx, 0), w + min(-dx, 0))]
            return out.reshape(-1)
        # cutout
        side = max(1, int(round(magnitude * min(h, w) / 2)))
        top = int(rng.integers(0, max(h - side, 0) + 1))
        left = int(rng.integers(0, max(w - side, 0) + 1))
        out = img.copy()
        out[top:top + side, left:left + side] = lo
        return out.reshape(-1)
    if op == "gaussian-noise":
        return x + rng.normal(0.0, 0.1 * magnitude * span, size=x.shape)
    # scale: stretch around the range midpoint
    mid = (lo + hi) / 2.0
    factor = 1.0 + rng.uniform(-1.0, 1.0) * 0.5 * magnitude
    return mid + (x - mid) * factor


def augment(x: Array, policy: AugmentPolicy,
            value_range: tuple[float, float] | None = None,
            image_shape: tuple[int, int, int] | None = None,
            rng: np.random.Generator | None = None) -> Array:
    """Apply `n_ops` uniformly drawn ops per example; clamp to the range.

    Magnitude zero returns the input unchanged regardless of the pool.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    batch = x[None, :] if squeeze else x
    if policy.magnitude == 0.0:
        return x.copy()
    needs_image = set(policy.op_pool) & set(IMAGE_OPS)
    if needs_image and image_shape is None:
        raise ConfigurationError("policy contains image ops but data has no image_shape")
    if rng is None:
        rng = derive_rng(policy.seed, purpose="augment")
    out = np.empty_like(batch)
    pool = list(policy.op_pool)
    for i in range(batch.shape[0]):
        row = batch[i]
        for _ in range(policy.n_ops):
            op = pool[int(rng.integers(0, len(pool)))]
            row = apply_op(row, op, policy.magnitude, rng, value_range, image_shape)
        out[i] = row
    if value_range is not None:
        out = np.clip(out, value_range[0], value_range[1])
    return out[0] if squeeze else out
