"""Synthetic identity datasets, image/perturbation file formats, and query perturbation.

Images are ``float32`` arrays of shape ``(3, H, W)`` in pixel units ``[0, 255]``.
"""
from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

SPLITS = ("train", "query", "gallery")

UAP_MAGIC = b"MUAP"
UAP_VERSION = 1
_UAP_HEADER = struct.Struct("<4sIBfIII")
_GAMMA_CODES = {1.0: 1, 2.0: 2, float("inf"): 255}
_GAMMA_FROM_CODE = {v: k for k, v in _GAMMA_CODES.items()}


class UapFormatError(ValueError):
    """Base class for malformed perturbation files."""


class BadMagicError(UapFormatError):
    pass


class TruncatedFileError(UapFormatError):
    pass


class VersionMismatchError(UapFormatError):
    pass


class PpmFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Perturbation:
    """A universal perturbation together with its norm budget."""

    values: np.ndarray
    gamma: float = float("inf")
    epsilon: float = 10.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3:
            raise ValueError(f"perturbation must be (C, H, W), got shape {values.shape}")
        gamma = parse_gamma(self.gamma)
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "epsilon", float(self.epsilon))

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def zeros(cls, shape, gamma=float("inf"), epsilon=10.0) -> "Perturbation":
        return cls(np.zeros(shape, dtype=np.float32), gamma, epsilon)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values.ravel().astype(np.float64), ord=self.gamma))


def parse_gamma(gamma) -> float:
    """Normalise a norm order given as ``1``, ``2``, ``"inf"`` or ``np.inf``."""
    if isinstance(gamma, str):
        gamma = gamma.strip().lower()
        gamma = float("inf") if gamma in ("inf", "infinity", "linf") else float(gamma)
    gamma = float(gamma)
    if gamma not in _GAMMA_CODES:
        raise ValueError(f"norm order must be 1, 2 or inf, got {gamma}")
    return gamma


@dataclass(frozen=True)
class DatasetItem:
    image_id: str
    identity: int
    split: str
    image: np.ndarray


class ImageSet(NamedTuple):
    """Stacked images ``(N, C, H, W)`` with their identity labels ``(N,)``."""

    images: np.ndarray
    identities: np.ndarray

    def __len__(self):
        return len(self.identities)


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 7
    n_train_ids: int = 32
    n_test_ids: int = 16
    views_per_id: int = 8
    height: int = 32
    width: int = 16
    noise_sigma: float = 4.0
    jitter: float = 5.0
    shift_max: int = 3
    contrast: float = 10.0


def _upsample_bilinear(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinearly upsample ``(C, h, w)`` to ``(C, height, width)`` (half-pixel centres)."""
    _, h, w = grid.shape
    ys = np.clip((np.arange(height) + 0.5) * h / height - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * w / width - 0.5, 0, w - 1)
    y0 = np.minimum(np.floor(ys).astype(int), h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    top = grid[:, y0][:, :, x0] * (1 - fx) + grid[:, y0][:, :, x1] * fx
    bottom = grid[:, y1][:, :, x0] * (1 - fx) + grid[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bottom * fy


def _translate(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    # edge-replicating integer shift
    _, h, w = img.shape
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[:, rows][:, :, cols]


def generate_synthetic(spec: SyntheticSpec) -> list[DatasetItem]:
    """Generate a deterministic identity dataset from ``spec``.

    Every identity owns a base pattern: a random 4x2 grid of colours drawn from
    ``127.5 +/- contrast`` in each channel, bilinearly upsampled to
    ``height x width``.  Each view adds a brightness offset, Gaussian noise and
    an integer translation, then clamps to ``[0, 255]``.  Identities
    ``0 .. n_train_ids-1`` form the train split; the remaining ``n_test_ids``
    identities contribute their first view to ``query`` and the rest to ``gallery``.
    """
    if spec.height <= 0 or spec.width <= 0:
        raise ValueError("image dimensions must be positive")
    if spec.views_per_id < 2:
        raise ValueError("views_per_id must be >= 2 so every query has a positive")
    if spec.n_train_ids < 2 or spec.n_test_ids < 2:
        raise ValueError("need at least 2 train and 2 test identities")
    if spec.noise_sigma < 0 or spec.jitter < 0 or spec.shift_max < 0:
        raise ValueError("noise_sigma, jitter and shift_max must be non-negative")
    if not 0 <= spec.contrast <= 127.5:
        raise ValueError("contrast must lie in [0, 127.5]")

    rng = np.random.default_rng(np.uint64(spec.seed))
    items = []
    n_ids = spec.n_train_ids + spec.n_test_ids
    for identity in range(n_ids):
        grid = rng.uniform(127.5 - spec.contrast, 127.5 + spec.contrast, size=(3, 4, 2))
        base = _upsample_bilinear(grid, spec.height, spec.width)
        is_train = identity < spec.n_train_ids
        for view in range(spec.views_per_id):
            offset = rng.uniform(-spec.jitter, spec.jitter)
            noise = rng.normal(0.0, 1.0, size=base.shape) * spec.noise_sigma
            dy, dx = rng.integers(-spec.shift_max, spec.shift_max + 1, size=2)
            img = _translate(base, int(dy), int(dx)) + offset + noise
            img = np.clip(img, 0.0, 255.0).astype(np.float32)
            if is_train:
                split = "train"
            else:
                split = "query" if view == 0 else "gallery"
            items.append(DatasetItem(f"{split}_{identity:04d}_{view:02d}", identity, split, img))
    check_disjoint(items)
    return items


def check_disjoint(items: Iterable[DatasetItem]) -> None:
    """Raise if train identities overlap test identities or a query lacks a gallery match."""
    items = list(items)
    train = {it.identity for it in items if it.split == "train"}
    query = {it.identity for it in items if it.split == "query"}
    gallery = {it.identity for it in items if it.split == "gallery"}
    if train & (query | gallery):
        raise ValueError("train and test identities overlap")
    missing = query - gallery
    if missing:
        raise ValueError(f"query identities without gallery positives: {sorted(missing)}")


def select_split(items: Iterable[DatasetItem], split: str) -> ImageSet:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    chosen = [it for it in items if it.split == split]
    if not chosen:
        raise ValueError(f"dataset has no {split!r} items")
    images = np.stack([it.image for it in chosen]).astype(np.float32)
    ids = np.array([it.identity for it in chosen], dtype=np.int64)
    return ImageSet(images, ids)


def apply_perturbation(q: np.ndarray, u, clamp: bool = True) -> np.ndarray:
    """Return ``q + u``, clamped to ``[0, 255]`` when ``clamp`` is set.

    ``q`` may be a single image or a batch; ``u`` must match the trailing
    ``(C, H, W)`` shape.
    """
    values = u.values if isinstance(u, Perturbation) else np.asarray(u)
    q = np.asarray(q)
    if q.shape[-3:] != values.shape:
        raise ValueError(f"shape mismatch: image {q.shape} vs perturbation {values.shape}")
    out = q + values.astype(q.dtype, copy=False)
    if clamp:
        out = np.clip(out, 0.0, 255.0)
    return out


# -- perturbation files ------------------------------------------------------

def save_uap(u: Perturbation, path) -> None:
    c, h, w = u.values.shape
    header = _UAP_HEADER.pack(UAP_MAGIC, UAP_VERSION, _GAMMA_CODES[u.gamma], u.epsilon, c, h, w)
    payload = np.ascontiguousarray(u.values, dtype="<f4").tobytes()
    atomic_write_bytes(path, header + payload)


def load_uap(path) -> Perturbation:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != UAP_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < _UAP_HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header")
    _, version, gcode, eps, c, h, w = _UAP_HEADER.unpack_from(blob)
    if version != UAP_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {UAP_VERSION}")
    if gcode not in _GAMMA_FROM_CODE:
        raise UapFormatError(f"{path}: unknown norm code {gcode}")
    n = c * h * w
    body = blob[_UAP_HEADER.size:]
    if len(body) < 4 * n:
        raise TruncatedFileError(f"{path}: expected {n} floats, found {len(body) // 4}")
    values = np.frombuffer(body, dtype="<f4", count=n).reshape(c, h, w).astype(np.float32)
    return Perturbation(values, _GAMMA_FROM_CODE[gcode], eps)


# -- PPM images ----------------------------------------------------------------

def save_image_ppm(img: np.ndarray, path) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 255:
        raise ValueError("pixel values must lie in [0, 255]")
    _, h, w = img.shape
    # values are non-negative, so floor(x + 0.5) rounds half away from zero
    data = np.floor(img + 0.5).astype(np.uint8).transpose(1, 2, 0).tobytes()
    atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode("ascii") + data)


def _ppm_tokens(blob: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PpmFormatError("truncated PPM header")
        tokens.append(blob[start:pos])
    return tokens, pos + 1  # one whitespace byte separates header and raster


def load_image_ppm(path, shape=None) -> np.ndarray:
    """Load a binary P6 PPM as a ``(3, H, W)`` float32 image.

    If ``shape`` is given the file must match it.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P6":
        raise PpmFormatError(f"{path}: not a binary P6 PPM")
    (_, w, h, maxval), start = _ppm_tokens(blob, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise PpmFormatError(f"{path}: only 8-bit PPM supported")
    raster = blob[start:start + 3 * w * h]
    if len(raster) != 3 * w * h:
        raise PpmFormatError(f"{path}: raster shorter than {w}x{h}")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    img = img.astype(np.float32)
    if shape is not None and tuple(img.shape) != tuple(shape):
        raise PpmFormatError(f"{path}: dimension mismatch {img.shape} vs {tuple(shape)}")
    return img


# -- manifests -------------------------------------------------------------------

MANIFEST_FIELDS = ("image_id", "path", "identity", "split")


def write_dataset(items: list[DatasetItem], out_dir) -> str:
    """Write images as PPM files plus a ``manifest.csv``; return the manifest path."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    rows = []
    for it in items:
        rel = os.path.join("images", f"{it.image_id}.ppm")
        save_image_ppm(it.image, os.path.join(out_dir, rel))
        rows.append((it.image_id, rel, it.identity, it.split))
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest + ".tmp", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        writer.writerows(rows)
    os.replace(manifest + ".tmp", manifest)
    return manifest


def read_manifest(path) -> list[DatasetItem]:
    root = os.path.dirname(os.path.abspath(path))
    items, shape = [], None
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        for row in reader:
            if row["split"] not in SPLITS:
                raise ValueError(f"{path}: unknown split {row['split']!r}")
            img_path = row["path"]
            if not os.path.isabs(img_path):
                img_path = os.path.join(root, img_path)
            img = load_image_ppm(img_path, shape)
            shape = img.shape
            items.append(DatasetItem(row["image_id"], int(row["identity"]), row["split"], img))
    check_disjoint(items)
    return items


def atomic_write_bytes(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
