"""Datasets: the rotated 2-D toy problem, MNIST IDX files and transformed image variants."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text
from .augment import GENERATORS, warp_image
from .linalg import expm3

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    kind: str  # "Points2D" or "Images"
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels) or len(self.labels) == 0:
            raise ValueError("inputs and labels must be non-empty and of equal length")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)

    @property
    def input_dim(self):
        return int(np.prod(self.inputs.shape[1:]))


# --- toy problem --------------------------------------------------------------

TOY_ROTATION = np.pi / 3


def gen_toy(seed, n=200) -> Dataset:
    """Two classes on concentric arcs with a soft +-60 degree rotational invariance.

    Class 0 sits at radius 1, class 1 at radius 2, both around angle 0 with
    angular jitter N(0, 0.1^2) and radial jitter N(0, 0.05^2); every point is
    then rotated about the origin by U[-pi/3, pi/3].
    """
    if n < 2:
        raise ValueError("need at least two points")
    rng = np.random.default_rng([seed, 7001])
    labels = np.repeat([0, 1], [n - n // 2, n // 2])
    radius = np.where(labels == 0, 1.0, 2.0) + rng.normal(0.0, 0.05, n)
    angle = rng.normal(0.0, 0.1, n) + rng.uniform(-TOY_ROTATION, TOY_ROTATION, n)
    x = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    perm = rng.permutation(n)
    return Dataset("Points2D", x[perm], labels[perm], 2, {"generator": "toy", "seed": seed, "n": n})


def to_polar(d: Dataset) -> Dataset:
    """Replace (x1, x2) by (r, cos phi, sin phi); the origin maps to phi = 0."""
    if d.kind != "Points2D":
        raise ValueError("polar features need 2-D points")
    r = np.hypot(d.inputs[:, 0], d.inputs[:, 1])
    phi = np.arctan2(d.inputs[:, 1], d.inputs[:, 0])
    phi = np.where(r == 0, 0.0, phi)
    feats = np.stack([r, np.cos(phi), np.sin(phi)], axis=1)
    return Dataset("Points2D", feats, d.labels, d.n_classes, {**d.provenance, "features": "polar"})


# --- IDX ----------------------------------------------------------------------

def _read_exact(buf, offset, size, what):
    if offset + size > len(buf):
        raise FormatError(f"truncated file while reading {what}")
    return buf[offset:offset + size]


def load_idx(images_path, labels_path) -> Dataset:
    """Read an MNIST-style IDX image/label pair; pixels are scaled to [0, 1]."""
    ib = Path(images_path).read_bytes()
    lb = Path(labels_path).read_bytes()
    magic, count, rows, cols = struct.unpack(">IIII", _read_exact(ib, 0, 16, "image header"))
    if magic != IMAGES_MAGIC:
        raise FormatError(f"image magic: expected 0x{IMAGES_MAGIC:08x}, got 0x{magic:08x}")
    pixels = np.frombuffer(_read_exact(ib, 16, count * rows * cols, "image pixels"), dtype=np.uint8)
    lmagic, lcount = struct.unpack(">II", _read_exact(lb, 0, 8, "label header"))
    if lmagic != LABELS_MAGIC:
        raise FormatError(f"label magic: expected 0x{LABELS_MAGIC:08x}, got 0x{lmagic:08x}")
    if lcount != count:
        raise FormatError(f"count mismatch: {count} images vs {lcount} labels")
    labels = np.frombuffer(_read_exact(lb, 8, lcount, "labels"), dtype=np.uint8)
    images = pixels.reshape(count, rows, cols).astype(np.float64) / 255.0
    return Dataset("Images", images, labels.astype(np.int64), 10, {"source": str(images_path)})


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images (N, H, W) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    atomic_write_bytes(images_path, struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    atomic_write_bytes(labels_path, struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes())


# --- transformed variants -----------------------------------------------------

class TransformKind(str, Enum):
    FULL_ROT = "FullRot"
    PARTIAL_ROT = "PartialRot"
    TRANSLATE = "Translate"
    SCALE = "Scale"
    NONE = "None"


@dataclass(frozen=True)
class TransformSpec:
    kind: TransformKind = TransformKind.NONE
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", TransformKind(self.kind))


def transform_matrices(spec: TransformSpec, n, width):
    """One forward affine matrix per sample for the dataset variant ``spec``."""
    rng = np.random.default_rng([spec.seed, 7002])
    kind = spec.kind
    if kind is TransformKind.PARTIAL_ROT:
        gen = rng.uniform(-np.pi / 2, np.pi / 2, n)[:, None, None] * GENERATORS[2]
    elif kind is TransformKind.FULL_ROT:
        gen = rng.uniform(-np.pi, np.pi, n)[:, None, None] * GENERATORS[2]
    elif kind is TransformKind.TRANSLATE:
        shift = rng.uniform(-8.0, 8.0, (n, 2)) * 2.0 / (width - 1)
        gen = shift[:, 0, None, None] * GENERATORS[0] + shift[:, 1, None, None] * GENERATORS[1]
    elif kind is TransformKind.SCALE:
        s = rng.uniform(-np.log(2.0), np.log(2.0), n)
        gen = s[:, None, None] * (GENERATORS[3] + GENERATORS[4])
    else:
        return None
    return expm3(gen)


def apply_transform(d: Dataset, spec: TransformSpec, chunk=2000) -> Dataset:
    """Transform every image once with an independently drawn affine map."""
    if d.kind != "Images":
        raise ValueError("transforms apply to image datasets")
    T = transform_matrices(spec, len(d), d.inputs.shape[-1])
    if T is None:
        return d
    out = np.empty_like(d.inputs)
    for start in range(0, len(d), chunk):
        sl = slice(start, start + chunk)
        out[sl] = warp_image(d.inputs[sl], T[sl])
    return replace(d, inputs=out, provenance={**d.provenance, "transform": spec.kind.value, "transform_seed": spec.seed})


def subset(d: Dataset, n, seed) -> Dataset:
    """Uniform subset of size ``n`` without replacement."""
    if n > len(d):
        raise ValueError(f"subset of {n} requested from {len(d)} points")
    idx = np.random.default_rng([seed, 7003]).choice(len(d), size=n, replace=False)
    return replace(d, inputs=d.inputs[idx], labels=d.labels[idx], provenance={**d.provenance, "subset": n, "subset_seed": seed})


# --- dataset cache ------------------------------------------------------------

def save_dataset(d: Dataset, path):
    """``<path>.json`` header plus ``<path>.bin`` little-endian float64 inputs then labels."""
    path = Path(path)
    header = {
        "kind": d.kind,
        "input_shape": list(d.inputs.shape),
        "n_classes": d.n_classes,
        "provenance": d.provenance,
        "dtype": "<f8",
        "layout": "inputs (row-major) followed by labels as float",
    }
    payload = np.concatenate([d.inputs.ravel(), d.labels.astype(np.float64)]).astype("<f8").tobytes()
    atomic_write_bytes(path.with_suffix(".bin"), payload)
    atomic_write_text(path.with_suffix(".json"), json.dumps(header, indent=2, default=str))


def load_dataset(path) -> Dataset:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    shape = tuple(header["input_shape"])
    n_in = int(np.prod(shape))
    return Dataset(header["kind"], flat[:n_in].reshape(shape), flat[n_in:].astype(np.int64), header["n_classes"], header["provenance"])
