"""Synthetic mixture-of-subspaces token data, IDX image files and patch tokenization."""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .linalg import Rng, orthonormalize
from .store import load_arrays, save_arrays

__all__ = [
    "SyntheticSpec",
    "PatchSpec",
    "Dataset",
    "gen_synthetic",
    "save_dataset",
    "load_dataset",
    "read_idx",
    "write_idx",
    "load_idx",
    "patchify",
    "unpatchify",
    "dataset_from_images",
    "nearest_subspace_classify",
]

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 4
    tokens: int = 16
    d_in: int = 48
    subspaces_per_class: int = 2
    p_data: int = 4
    sigma_data: float = 0.1
    samples_per_class: int = 1000
    holdout: float = 0.2
    orthogonal_classes: bool = True
    seed: int = 0

    def __post_init__(self):
        if min(self.classes, self.tokens, self.d_in, self.subspaces_per_class, self.p_data, self.samples_per_class) < 1:
            raise ConfigError("counts and dimensions must be >= 1")
        if self.p_data > self.d_in:
            raise ConfigError("p_data must not exceed d_in")
        if self.sigma_data < 0:
            raise ConfigError("sigma_data must be non-negative")
        if not 0 <= self.holdout < 1:
            raise ConfigError("holdout must lie in [0, 1)")
        need = self.classes * self.subspaces_per_class * self.p_data
        if self.orthogonal_classes and need > self.d_in:
            raise ConfigError(f"orthogonal classes need {need} <= d_in = {self.d_in}")
        if self.subspaces_per_class * self.p_data > self.d_in:
            raise ConfigError("a class's subspaces do not fit in d_in")


@dataclass(frozen=True)
class PatchSpec:
    height: int
    width: int
    patch_height: int
    patch_width: int
    channels: int = 1

    def __post_init__(self):
        if self.height % self.patch_height or self.width % self.patch_width:
            raise ShapeError(
                f"patch {self.patch_height}x{self.patch_width} does not divide image {self.height}x{self.width}"
            )

    @property
    def num_patches(self) -> int:
        return (self.height // self.patch_height) * (self.width // self.patch_width)

    @property
    def patch_dim(self) -> int:
        return self.patch_height * self.patch_width * self.channels


@dataclass
class Dataset:
    """Token samples ``(S, D_in, N)`` with labels and a train(0)/test(1) split.

    Image-backed datasets also keep the raw images so batches can be
    re-tokenized after augmentation.
    """

    tokens: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    meta: dict = field(default_factory=dict)
    images: np.ndarray | None = None
    patch: PatchSpec | None = None
    extras: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.meta.get("classes", int(self.labels.max()) + 1))

    def indices(self, split: str) -> np.ndarray:
        if split == "all":
            return np.arange(len(self))
        code = {"train": 0, "test": 1}[split]
        return np.flatnonzero(self.split == code)

    def batch(self, idx: np.ndarray, flip_mask: np.ndarray | None = None) -> np.ndarray:
        if flip_mask is None or self.images is None or not flip_mask.any():
            return self.tokens[idx]
        imgs = self.images[idx].copy()
        imgs[flip_mask] = imgs[flip_mask][:, :, ::-1]
        return patchify(imgs, self.patch)


def _class_bases(spec: SyntheticSpec, rng: Rng) -> np.ndarray:
    """(C, S, d_in, p) orthonormal bases."""
    C, S, d, p = spec.classes, spec.subspaces_per_class, spec.d_in, spec.p_data
    if spec.orthogonal_classes:
        q = orthonormalize(rng.normal((d, C * S * p)), rng)
        return q.reshape(d, C, S, p).transpose(1, 2, 0, 3).copy()
    out = np.empty((C, S, d, p))
    for c in range(C):
        q = orthonormalize(rng.normal((d, S * p)), rng)
        out[c] = q.reshape(d, S, p).transpose(1, 0, 2)
    return out


def _split(labels: np.ndarray, holdout: float, rng: Rng) -> np.ndarray:
    """Per-class deterministic holdout so both splits see every class."""
    split = np.zeros(len(labels), dtype=np.uint8)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        split[idx[: int(round(holdout * len(idx)))]] = 1
    return split


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Labeled multi-token samples; every token lies on one of its class's subspaces plus noise."""
    rng = Rng(spec.seed)
    bases = _class_bases(spec, rng)
    C, S, n, p, d = spec.classes, spec.subspaces_per_class, spec.tokens, spec.p_data, spec.d_in
    total = C * spec.samples_per_class
    labels = np.repeat(np.arange(C), spec.samples_per_class)
    which = rng.integers(0, S, size=(total, n))
    coeff = rng.normal((total, n, p))
    noise = rng.normal((total, d, n))
    chosen = bases[labels[:, None], which]  # (total, n, d, p)
    clean = np.einsum("tndp,tnp->tdn", chosen, coeff)
    tokens = clean + spec.sigma_data * noise
    split = _split(labels, spec.holdout, rng)
    meta = {"kind": "dataset", "source": "synthetic", "spec": asdict(spec), "classes": C}
    return Dataset(tokens, labels.astype(np.int64), split, meta, extras={"bases": bases, "clean": clean})


def nearest_subspace_classify(tokens: np.ndarray, bases: np.ndarray) -> np.ndarray:
    """Class whose subspaces capture the most token energy, summed over tokens."""
    C, S, d, p = bases.shape
    span = bases.transpose(0, 2, 1, 3).reshape(C, d, S * p)
    energy = np.einsum("cdq,bdn->bcqn", span, tokens)
    return np.argmax((energy**2).sum(axis=(2, 3)), axis=1)


def save_dataset(ds: Dataset, directory) -> Path:
    tensors = {"tokens": ds.tokens, "labels": ds.labels, "split": ds.split}
    if "bases" in ds.extras:
        tensors["bases"] = ds.extras["bases"]
    if ds.images is not None:
        tensors["images"] = ds.images
    meta = dict(ds.meta)
    if ds.patch is not None:
        meta["patch"] = asdict(ds.patch)
    return save_arrays(directory, tensors, meta)


def load_dataset(directory) -> Dataset:
    t, meta = load_arrays(directory)
    if meta.get("kind") != "dataset":
        raise FormatError(f"{directory} does not hold a dataset")
    patch = PatchSpec(**meta["patch"]) if "patch" in meta else None
    extras = {"bases": t["bases"]} if "bases" in t else {}
    return Dataset(t["tokens"], t["labels"], t["split"].astype(np.uint8), meta, t.get("images"), patch, extras)


# --- IDX -------------------------------------------------------------------

def write_idx(path, array: np.ndarray, magic: int):
    a = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * a.ndim, *a.shape))
        fh.write(a.tobytes())


def read_idx(path, magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = found & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - head < count:
        raise FormatError(f"{path}: truncated data, expected {count} bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims).copy()


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images ``(n, rows, cols[, ...])`` and labels ``(n,)`` as uint8 arrays."""
    images = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"count mismatch: {images.shape[0]} images but {labels.shape[0]} labels")
    return images, labels


# --- patches -----------------------------------------------------------------

def _nhwc(images: np.ndarray) -> np.ndarray:
    return images[..., None] if images.ndim == 3 else images


def patchify(images: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """``(B, H, W[, C])`` uint8 -> ``(B, ph*pw*C, num_patches)`` floats in [0, 1].

    Patches are taken in row-major order; inside a patch pixels are row-major
    with channels last.
    """
    x = _nhwc(np.asarray(images))
    B, H, W, C = x.shape
    if (H, W, C) != (spec.height, spec.width, spec.channels):
        raise ShapeError(f"images are {H}x{W}x{C}, patch spec expects {spec.height}x{spec.width}x{spec.channels}")
    ph, pw = spec.patch_height, spec.patch_width
    x = x.reshape(B, H // ph, ph, W // pw, pw, C).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(B, spec.num_patches, spec.patch_dim).transpose(0, 2, 1)
    return x.astype(np.float64) / 255.0


def unpatchify(tokens: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Inverse of :func:`patchify`, returning uint8 images."""
    B = tokens.shape[0]
    ph, pw, C = spec.patch_height, spec.patch_width, spec.channels
    x = np.rint(np.asarray(tokens) * 255.0).astype(np.uint8).transpose(0, 2, 1)
    x = x.reshape(B, spec.height // ph, spec.width // pw, ph, pw, C).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(B, spec.height, spec.width, C)
    return x[..., 0] if C == 1 else x


def dataset_from_images(images: np.ndarray, labels: np.ndarray, spec: PatchSpec, holdout: float = 0.2, seed: int = 0) -> Dataset:
    labels = np.asarray(labels, dtype=np.int64)
    split = _split(labels, holdout, Rng(seed))
    meta = {"kind": "dataset", "source": "idx", "patch": asdict(spec), "classes": int(labels.max()) + 1,
            "holdout": holdout, "seed": seed}
    return Dataset(patchify(images, spec), labels, split, meta, np.asarray(images, dtype=np.uint8), spec)


def spec_from_dict(cls, data: dict):
    """Build a config dataclass, rejecting unknown keys."""
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
