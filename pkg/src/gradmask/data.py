"""Datasets: IDX and CIFAR-10 binary parsers, synthetic corpora, subsetting.

No download logic lives here; loaders read local files only. When no real
corpus is available the procedural digit generator below provides a fully
seeded 28x28 stand-in with tunable difficulty.
"""

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError

IDX_IMAGE_MAGIC = 0x00000803  # 2051
IDX_LABEL_MAGIC = 0x00000801  # 2049
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels


@dataclass
class LabeledDataset:
    name: str
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(f"{self.name}: images must be (N, C, H, W)")
        if self.labels.shape != (self.images.shape[0],):
            raise DataFormatError(
                f"{self.name}: {self.images.shape[0]} images vs "
                f"{self.labels.shape[0]} labels"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataFormatError(f"{self.name}: pixel values outside [0, 1]")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise DataFormatError(f"{self.name}: labels outside [0, {self.num_classes})")

    def __len__(self):
        return self.images.shape[0]

    def content_hash(self):
        h = hashlib.sha256()
        h.update(repr(self.images.shape).encode())
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_be32(fh, what, path):
    data = fh.read(4)
    if len(data) != 4:
        raise DataFormatError(f"{path}: truncated while reading {what}")
    return struct.unpack(">I", data)[0]


def load_mnist_idx(images_path, labels_path, name="mnist"):
    """Parse the classic big-endian IDX pair; transparently handles .gz."""
    with _open_maybe_gzip(images_path) as fh:
        magic = _read_be32(fh, "image magic", images_path)
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(
                f"{images_path}: bad image magic 0x{magic:08x} "
                f"(expected 0x{IDX_IMAGE_MAGIC:08x})"
            )
        count = _read_be32(fh, "image count", images_path)
        rows = _read_be32(fh, "row count", images_path)
        cols = _read_be32(fh, "column count", images_path)
        raw = fh.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise DataFormatError(f"{images_path}: truncated pixel data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)

    with _open_maybe_gzip(labels_path) as fh:
        magic = _read_be32(fh, "label magic", labels_path)
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(
                f"{labels_path}: bad label magic 0x{magic:08x} "
                f"(expected 0x{IDX_LABEL_MAGIC:08x})"
            )
        lcount = _read_be32(fh, "label count", labels_path)
        raw = fh.read(lcount)
        if len(raw) != lcount:
            raise DataFormatError(f"{labels_path}: truncated label data")
    labels = np.frombuffer(raw, dtype=np.uint8)

    if lcount != count:
        raise DataFormatError(
            f"image/label count mismatch: {count} images vs {lcount} labels"
        )
    return LabeledDataset(name, images.astype(np.float64) / 255.0,
                          labels.astype(np.int64), 10)


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist_dir(explicit=None):
    """First existing candidate of: explicit arg, $GRADMASK_MNIST_DIR, ./data/mnist."""
    candidates = [explicit, os.environ.get("GRADMASK_MNIST_DIR"), "data/mnist"]
    for cand in candidates:
        if not cand:
            continue
        img = os.path.join(cand, _MNIST_FILES["train"][0])
        if os.path.exists(img) or os.path.exists(img + ".gz"):
            return cand
    return None


def load_mnist_split(mnist_dir, split):
    img_name, lbl_name = _MNIST_FILES[split]
    paths = []
    for base in (img_name, lbl_name):
        p = os.path.join(mnist_dir, base)
        if not os.path.exists(p) and os.path.exists(p + ".gz"):
            p += ".gz"
        if not os.path.exists(p):
            raise DataFormatError(f"missing MNIST file {p}")
        paths.append(p)
    return load_mnist_idx(paths[0], paths[1], name=f"mnist-{split}")


def load_cifar10_binary(paths, name="cifar10"):
    """Parse one or more CIFAR-10 binary batch files (3073-byte records)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    all_images, all_labels = [], []
    for path in paths:
        with _open_maybe_gzip(path) as fh:
            raw = fh.read()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES:
            raise DataFormatError(
                f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0]
        if labels.max(initial=0) > 9:
            raise DataFormatError(f"{path}: label byte {labels.max()} outside 0..9")
        images = records[:, 1:].reshape(-1, 3, 32, 32)  # channel-major planes
        all_images.append(images)
        all_labels.append(labels)
    images = np.concatenate(all_images).astype(np.float64) / 255.0
    labels = np.concatenate(all_labels).astype(np.int64)
    return LabeledDataset(name, images, labels, 10)


def synthetic_blobs(n, num_classes, seed, side=8):
    """Gaussian blobs at class-specific positions; fast fixture data."""
    if n <= 0 or num_classes <= 0:
        raise ConfigError("n and num_classes must be positive")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    yy, xx = np.mgrid[0:side, 0:side]
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    cy = side / 2.0 + (side / 3.0) * np.sin(angles)
    cx = side / 2.0 + (side / 3.0) * np.cos(angles)
    images = np.empty((n, 1, side, side))
    sigma = side / 7.5
    for i, k in enumerate(labels):
        jy = cy[k] + rng.normal(scale=0.3)
        jx = cx[k] + rng.normal(scale=0.3)
        blob = np.exp(-((yy - jy) ** 2 + (xx - jx) ** 2) / (2.0 * sigma**2))
        blob += rng.normal(scale=0.04, size=blob.shape)
        images[i, 0] = np.clip(blob, 0.0, 1.0)
    return LabeledDataset(f"blobs{num_classes}", images, labels, num_classes)


# ---------------------------------------------------------------------------
# procedural digits: stroke skeletons + affine jitter + noise, 28x28
# ---------------------------------------------------------------------------

def _line(p0, p1, n=40):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1.0 - t) * np.asarray(p0) + t * np.asarray(p1)


def _arc(center, rx, ry, a0, a1, n=60):
    t = np.linspace(a0, a1, n)
    return np.stack([center[0] + rx * np.cos(t), center[1] + ry * np.sin(t)], axis=1)


def _digit_strokes(k):
    """Stroke point lists in a [0,1]^2 box, x right, y down."""
    if k == 0:
        return [_arc((0.5, 0.5), 0.21, 0.30, 0.0, 2.0 * np.pi, 90)]
    if k == 1:
        return [_line((0.52, 0.18), (0.52, 0.82)), _line((0.38, 0.32), (0.52, 0.18), 20)]
    if k == 2:
        return [
            _arc((0.5, 0.36), 0.20, 0.18, np.pi, 2.35 * np.pi, 50),
            _line((0.66, 0.47), (0.32, 0.80)),
            _line((0.32, 0.80), (0.72, 0.80)),
        ]
    if k == 3:
        return [
            _arc((0.47, 0.35), 0.17, 0.15, 1.25 * np.pi, 2.6 * np.pi, 45),
            _arc((0.47, 0.65), 0.19, 0.17, 1.45 * np.pi, 2.85 * np.pi, 45),
        ]
    if k == 4:
        return [
            _line((0.62, 0.18), (0.30, 0.60)),
            _line((0.30, 0.60), (0.78, 0.60)),
            _line((0.62, 0.18), (0.62, 0.84)),
        ]
    if k == 5:
        return [
            _line((0.70, 0.20), (0.36, 0.20)),
            _line((0.36, 0.20), (0.34, 0.47)),
            _arc((0.48, 0.63), 0.19, 0.18, 1.35 * np.pi, 2.8 * np.pi, 50),
        ]
    if k == 6:
        return [
            _arc((0.56, 0.33), 0.22, 0.24, 0.85 * np.pi, 1.55 * np.pi, 40),
            _arc((0.49, 0.64), 0.17, 0.17, 0.0, 2.0 * np.pi, 70),
        ]
    if k == 7:
        return [_line((0.30, 0.22), (0.72, 0.22)), _line((0.72, 0.22), (0.42, 0.82))]
    if k == 8:
        return [
            _arc((0.50, 0.35), 0.15, 0.14, 0.0, 2.0 * np.pi, 60),
            _arc((0.50, 0.66), 0.18, 0.17, 0.0, 2.0 * np.pi, 70),
        ]
    if k == 9:
        return [
            _arc((0.50, 0.36), 0.16, 0.15, 0.0, 2.0 * np.pi, 60),
            _line((0.66, 0.38), (0.58, 0.82)),
        ]
    raise ConfigError(f"no stroke template for digit {k}")


def _render_digit(k, rng, side=28):
    strokes = _digit_strokes(k)
    # small independent offset per stroke varies the relative geometry
    strokes = [s + rng.uniform(-0.025, 0.025, size=2) for s in strokes]
    pts = np.concatenate(strokes, axis=0)
    pts = (pts - 0.5) * 1.25 + 0.5  # fill the canvas the way real digits do

    # per-sample affine jitter around the glyph center
    angle = rng.uniform(-0.28, 0.28)
    scale_x = rng.uniform(0.72, 1.15)
    scale_y = rng.uniform(0.72, 1.15)
    shear = rng.uniform(-0.22, 0.22)
    shift = rng.uniform(-0.11, 0.11, size=2)
    c, s = np.cos(angle), np.sin(angle)
    mat = np.array([[c, -s], [s, c]]) @ np.array([[scale_x, shear], [0.0, scale_y]])
    pts = (pts - 0.5) @ mat.T + 0.5 + shift

    # low-frequency wobble approximates elastic deformation
    for _ in range(2):
        direction = rng.uniform(0.0, 2.0 * np.pi)
        dvec = np.array([np.cos(direction), np.sin(direction)])
        amp = rng.uniform(0.0, 0.030)
        freq = rng.uniform(1.0, 2.5)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = amp * np.sin(2.0 * np.pi * freq * (pts @ dvec) + phase)
        normal = np.array([-dvec[1], dvec[0]])
        pts = pts + wave[:, None] * normal[None, :]

    # occasionally break the stroke: drop a contiguous run of points
    if rng.random() < 0.25 and pts.shape[0] > 20:
        gap = int(pts.shape[0] * rng.uniform(0.08, 0.20))
        start = rng.integers(0, pts.shape[0] - gap)
        keep = np.ones(pts.shape[0], dtype=bool)
        keep[start:start + gap] = False
        pts = pts[keep]

    canvas = np.zeros((side, side))
    px = pts * (side - 1)
    sigma = rng.uniform(0.90, 1.40)
    base = np.floor(px).astype(int)
    offs = np.stack(np.meshgrid(np.arange(-2, 3), np.arange(-2, 3)), -1).reshape(-1, 2)
    cells = base[:, None, :] + offs[None, :, :]
    d2 = ((cells - px[:, None, :]) ** 2).sum(-1)
    w = np.exp(-d2 / (2.0 * sigma**2))
    ix = cells[..., 0].ravel()
    iy = cells[..., 1].ravel()
    wf = w.ravel()
    ok = (ix >= 0) & (ix < side) & (iy >= 0) & (iy < side)
    np.add.at(canvas, (iy[ok], ix[ok]), wf[ok])

    peak = canvas.max()
    if peak > 0:
        canvas = canvas / peak
    # overdrive then clip: saturated stroke cores with antialiased edges
    canvas = np.minimum(canvas * rng.uniform(1.2, 1.6), 1.0)

    # faint clutter blobs keep the background from being a free feature
    if rng.random() < 0.35:
        yy, xx = np.mgrid[0:side, 0:side]
        for _ in range(rng.integers(1, 3)):
            by, bx = rng.uniform(2, side - 2, size=2)
            bs = rng.uniform(0.8, 1.8)
            canvas += rng.uniform(0.10, 0.30) * np.exp(
                -((yy - by) ** 2 + (xx - bx) ** 2) / (2.0 * bs**2)
            )

    noise = rng.normal(scale=rng.uniform(0.03, 0.08), size=canvas.shape)
    return np.clip(canvas + noise, 0.0, 1.0)


def synthetic_digits(n, seed, name="synthetic-digits"):
    """Seeded 28x28 digit-glyph corpus: MNIST-shaped, learnable, not trivial."""
    if n <= 0:
        raise ConfigError("n must be positive")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    images = np.empty((n, 1, 28, 28))
    for i, k in enumerate(labels):
        images[i, 0] = _render_digit(int(k), rng)
    return LabeledDataset(name, images, labels.astype(np.int64), 10)


def subset(dataset, count, seed):
    """Stratified random subset preserving class balance within one sample."""
    n = len(dataset)
    if not 0 < count <= n:
        raise ConfigError(f"subset count {count} outside 1..{n}")
    rng = np.random.default_rng(seed)
    labels = dataset.labels
    classes, class_counts = np.unique(labels, return_counts=True)
    quotas = class_counts * (count / n)
    takes = np.floor(quotas).astype(int)
    remainder = count - takes.sum()
    # largest fractional remainders win the leftover slots
    order = np.argsort(-(quotas - takes), kind="stable")
    takes[order[:remainder]] += 1
    picked = []
    for cls, take in zip(classes, takes):
        cls_idx = np.flatnonzero(labels == cls)
        picked.append(rng.choice(cls_idx, size=take, replace=False))
    idx = np.concatenate(picked)
    idx = idx[rng.permutation(idx.size)]
    return LabeledDataset(
        f"{dataset.name}[{count}]",
        dataset.images[idx].copy(),
        labels[idx].copy(),
        dataset.num_classes,
    )


def resolve_corpus(name, seed, train_count, test_count, mnist_dir=None):
    """Map a config dataset name to (train, test) splits.

    "mnist" requires IDX files; "auto" prefers them and falls back to the
    procedural digits; "synthetic-digits" and "blobs" are always available.
    """
    if name in ("mnist", "auto"):
        found = find_mnist_dir(mnist_dir)
        if found is None:
            if name == "mnist":
                raise DataFormatError(
                    "MNIST IDX files not found (set GRADMASK_MNIST_DIR or pass "
                    "dataset.mnist_dir); no download logic exists by design"
                )
            name = "synthetic-digits"
        else:
            train = subset(load_mnist_split(found, "train"), train_count, seed)
            test = subset(load_mnist_split(found, "test"), test_count, seed + 1)
            return train, test
    if name == "synthetic-digits":
        train = synthetic_digits(train_count, seed=seed * 2 + 1,
                                 name="synthetic-digits-train")
        test = synthetic_digits(test_count, seed=seed * 2 + 2,
                                name="synthetic-digits-test")
        return train, test
    if name == "blobs":
        train = synthetic_blobs(train_count, 10, seed=seed * 2 + 1)
        test = synthetic_blobs(test_count, 10, seed=seed * 2 + 2)
        return train, test
    raise ConfigError(f"unknown dataset {name!r}")
