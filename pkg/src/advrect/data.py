"""Dataset ingestion and generation.

Loaders return a `Dataset` of float32 images in [0,1] with integer labels.
Supported sources: the big-endian IDX pair format used by the MNIST
distribution, a binary dump format for round-tripping batches between
pipeline phases, and two seeded generators (Gaussian blobs for unit tests,
stroke-rendered digits as an offline stand-in for handwritten-digit data).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, ContractViolation, FormatError, Truncated, VersionMismatch

DUMP_MAGIC = b"RLDM"
DUMP_VERSION = 1

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # [M,C,H,W] float32 in [0,1]
    labels: np.ndarray  # [M] int64 in [0,num_classes)
    num_classes: int
    split: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ContractViolation("images must be [M,C,H,W]")
        if len(self.labels) != len(self.images):
            raise ContractViolation("label count does not match image count")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ContractViolation("pixel values must lie in [0,1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractViolation("labels out of range")

    def __len__(self):
        return len(self.images)

    def subset(self, indices, split=None) -> "Dataset":
        return Dataset(
            images=self.images[indices],
            labels=self.labels[indices],
            num_classes=self.num_classes,
            split=split if split is not None else self.split,
            provenance=dict(self.provenance, subset=len(indices)),
        )


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_idx(images_path, labels_path, split="") -> Dataset:
    """Parse a big-endian IDX image/label file pair (MNIST distribution format)."""
    with open(images_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise Truncated(f"{images_path}: too short for a magic number")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != IDX_IMAGE_MAGIC:
        raise BadMagic(f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    if len(blob) < 16:
        raise Truncated(f"{images_path}: truncated header")
    m, h, w = struct.unpack(">III", blob[4:16])
    if len(blob) != 16 + m * h * w:
        raise Truncated(f"{images_path}: expected {16 + m * h * w} bytes, found {len(blob)}")
    pixels = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(m, 1, h, w)

    with open(labels_path, "rb") as fh:
        lblob = fh.read()
    if len(lblob) < 4:
        raise Truncated(f"{labels_path}: too short for a magic number")
    (lmagic,) = struct.unpack(">I", lblob[:4])
    if lmagic != IDX_LABEL_MAGIC:
        raise BadMagic(f"{labels_path}: bad magic 0x{lmagic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
    if len(lblob) < 8:
        raise Truncated(f"{labels_path}: truncated header")
    (lm,) = struct.unpack(">I", lblob[4:8])
    if lm != m:
        raise FormatError(f"image file has {m} items but label file has {lm}")
    if len(lblob) != 8 + lm:
        raise Truncated(f"{labels_path}: expected {8 + lm} bytes, found {len(lblob)}")
    labels = np.frombuffer(lblob, dtype=np.uint8, offset=8).astype(np.int64)

    return Dataset(
        images=pixels.astype(np.float32) / 255.0,
        labels=labels,
        num_classes=int(labels.max()) + 1 if len(labels) else 0,
        split=split,
        provenance={
            "source": "idx",
            "images": str(images_path),
            "labels": str(labels_path),
            "images_sha256": _sha256(images_path),
            "labels_sha256": _sha256(labels_path),
        },
    )


def synth_blobs(classes: int, per_class: int, dim: int, spread: float, seed: int) -> Dataset:
    """Seeded Gaussian clusters with unit-separated means, clipped to [0,1]."""
    if classes < 2:
        raise ContractViolation("need at least 2 classes")
    rng = np.random.default_rng(seed)
    means = np.zeros((classes, dim))
    placed = 0
    while placed < classes:
        cand = rng.uniform(0.15, 0.85, size=dim)
        if all(np.linalg.norm(cand - means[j]) >= 1.0 for j in range(placed)):
            means[placed] = cand
            placed += 1
    xs, ys = [], []
    for c in range(classes):
        pts = means[c] + spread * rng.standard_normal((per_class, dim))
        xs.append(np.clip(pts, 0.0, 1.0))
        ys.append(np.full(per_class, c, dtype=np.int64))
    images = np.concatenate(xs).astype(np.float32).reshape(classes * per_class, 1, 1, dim)
    return Dataset(
        images=images,
        labels=np.concatenate(ys),
        num_classes=classes,
        split="synth",
        provenance={"source": "blobs", "classes": classes, "per_class": per_class,
                    "dim": dim, "spread": spread, "seed": seed},
    )


# ---------------------------------------------------------------------------
# stroke-rendered digits
#
# Each digit is a set of polylines in a unit box (x right, y down). Samples
# get a random affine jitter of the control points, random stroke thickness
# and brightness, and pixel noise. This produces a 10-class [1,S,S] corpus
# with handwriting-like variability for environments without real digit data.

_E = lambda cx, cy, rx, ry, n=14: [
    (cx + rx * np.cos(2 * np.pi * t / n), cy + ry * np.sin(2 * np.pi * t / n)) for t in range(n + 1)
]

_DIGIT_STROKES = {
    0: [_E(0.5, 0.5, 0.26, 0.36)],
    1: [[(0.34, 0.26), (0.54, 0.12), (0.54, 0.9)]],
    2: [[(0.26, 0.3), (0.32, 0.16), (0.52, 0.1), (0.7, 0.17), (0.74, 0.34),
         (0.62, 0.52), (0.3, 0.74), (0.24, 0.88)],
        [(0.24, 0.88), (0.78, 0.88)]],
    3: [[(0.28, 0.18), (0.48, 0.1), (0.68, 0.17), (0.72, 0.3), (0.58, 0.44), (0.44, 0.47)],
        [(0.44, 0.47), (0.64, 0.5), (0.76, 0.64), (0.7, 0.82), (0.5, 0.9), (0.28, 0.82)]],
    4: [[(0.6, 0.08), (0.22, 0.6)], [(0.22, 0.6), (0.82, 0.6)], [(0.62, 0.3), (0.62, 0.92)]],
    5: [[(0.72, 0.12), (0.3, 0.12), (0.28, 0.46)],
        [(0.28, 0.46), (0.52, 0.42), (0.7, 0.5), (0.74, 0.66), (0.62, 0.84), (0.38, 0.9), (0.24, 0.8)]],
    6: [[(0.64, 0.1), (0.46, 0.16), (0.33, 0.36), (0.28, 0.6), (0.33, 0.8), (0.5, 0.9),
         (0.66, 0.82), (0.7, 0.65), (0.6, 0.52), (0.42, 0.53), (0.3, 0.64)]],
    7: [[(0.22, 0.13), (0.78, 0.13)], [(0.78, 0.13), (0.44, 0.9)]],
    8: [_E(0.5, 0.3, 0.2, 0.18), _E(0.5, 0.68, 0.24, 0.2)],
    9: [_E(0.5, 0.32, 0.22, 0.2), [(0.72, 0.34), (0.68, 0.62), (0.54, 0.9)]],
}


def _render_strokes(strokes, size, thickness, aa=0.045):
    ax = (np.arange(size) + 0.5) / size
    px, py = np.meshgrid(ax, ax, indexing="xy")
    dist = np.full((size, size), np.inf)
    for line in strokes:
        pts = np.asarray(line)
        for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
            dx, dy = x1 - x0, y1 - y0
            L2 = dx * dx + dy * dy
            if L2 == 0:
                d = np.hypot(px - x0, py - y0)
            else:
                t = np.clip(((px - x0) * dx + (py - y0) * dy) / L2, 0.0, 1.0)
                d = np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))
            dist = np.minimum(dist, d)
    return np.clip(1.0 - (dist - thickness) / aa, 0.0, 1.0)


def _jitter(strokes, rng, jitter):
    theta = rng.uniform(-0.22, 0.22) * jitter
    shear = rng.uniform(-0.18, 0.18) * jitter
    sx = 1.0 + rng.uniform(-0.16, 0.12) * jitter
    sy = 1.0 + rng.uniform(-0.16, 0.12) * jitter
    tx, ty = rng.uniform(-0.07, 0.07, size=2) * jitter
    c, s = np.cos(theta), np.sin(theta)
    m = np.array([[c, -s], [s, c]]) @ np.array([[sx, shear * sx], [0.0, sy]])
    out = []
    for line in strokes:
        pts = np.asarray(line) - 0.5
        pts = pts @ m.T + 0.5 + np.array([tx, ty])
        out.append(pts)
    return out


def synth_digits(count: int, seed: int, image_size: int = 28, jitter: float = 1.25,
                 noise: float = 0.2, hard_fraction: float = 0.1,
                 split: str = "synth") -> Dataset:
    """Seeded corpus of stroke-rendered digits 0-9, shaped [count,1,S,S].

    `jitter` scales the affine distortion of the stroke skeletons. Each
    image carries uniform pixel noise with a per-image amplitude drawn from
    U(0, noise): the variable amplitude forces a reconstruction head
    trained on this corpus to act as a manifold projector rather than
    memorizing the noise. `hard_fraction` of the samples are rendered
    heavily blurred and faint so a trained model keeps a realistic error
    tail instead of saturating."""
    rng = np.random.default_rng(seed)
    images = np.zeros((count, 1, image_size, image_size), dtype=np.float32)
    labels = rng.integers(0, 10, size=count).astype(np.int64)
    for i in range(count):
        strokes = _jitter(_DIGIT_STROKES[int(labels[i])], rng, jitter)
        hard = rng.random() < hard_fraction
        thickness = rng.uniform(0.04, 0.085)
        aa = rng.uniform(0.16, 0.3) if hard else rng.uniform(0.04, 0.09)
        img = _render_strokes(strokes, image_size, thickness, aa=aa)
        img *= rng.uniform(0.35, 0.55) if hard else rng.uniform(0.7, 1.0)
        amp = rng.uniform(0.0, noise)
        img += rng.uniform(-amp, amp, (image_size, image_size))
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(
        images=images,
        labels=labels,
        num_classes=10,
        split=split,
        provenance={"source": "synth_digits", "count": count, "seed": seed,
                    "image_size": image_size, "jitter": jitter, "noise": noise,
                    "hard_fraction": hard_fraction},
    )


# ---------------------------------------------------------------------------
# dump format


def save_dump(ds: Dataset, path):
    """RLDM container: magic, version u32le, M C H W N u32le, raw float32le
    pixels, then one unsigned label byte per sample."""
    m, c, h, w = ds.images.shape
    if ds.num_classes > 255:
        raise ContractViolation("dump labels are single bytes")
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<IIIIII", DUMP_VERSION, m, c, h, w, ds.num_classes))
        fh.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
        fh.write(ds.labels.astype(np.uint8).tobytes())


def load_dump(path, split="") -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != DUMP_MAGIC:
        raise BadMagic(f"{path}: not a dataset dump")
    if len(blob) < 28:
        raise Truncated(f"{path}: truncated header")
    version, m, c, h, w, n = struct.unpack("<IIIIII", blob[4:28])
    if version != DUMP_VERSION:
        raise VersionMismatch(f"{path}: dump version {version}, expected {DUMP_VERSION}")
    nbytes = 4 * m * c * h * w
    if len(blob) < 28 + nbytes + m:
        raise Truncated(f"{path}: expected {28 + nbytes + m} bytes, found {len(blob)}")
    if len(blob) > 28 + nbytes + m:
        raise FormatError(f"{path}: trailing bytes")
    images = np.frombuffer(blob, dtype="<f4", count=m * c * h * w, offset=28).reshape(m, c, h, w)
    labels = np.frombuffer(blob, dtype=np.uint8, offset=28 + nbytes).astype(np.int64)
    return Dataset(images=images.copy(), labels=labels, num_classes=n, split=split,
                   provenance={"source": "dump", "path": str(path)})
