"""Synthetic linearly separable datasets, channel concatenation and CIFAR-10 ingestion.

A sample of D(v) is ``x = eps * y * v + w`` where ``w`` is isotropic Gaussian
noise with its component along ``v`` projected out, so all label information
sits on the single direction ``v``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .seeding import rng as derive_rng

CIFAR_RECORD = 3073
CIFAR_RECORDS_PER_FILE = 10_000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


class DatasetError(ValueError):
    pass


class CifarParseError(DatasetError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: {message} (byte offset {offset})")
        self.path = path
        self.offset = offset


@dataclass(frozen=True, eq=False)
class LinSepSpec:
    v: np.ndarray
    epsilon: float
    sigma: float
    n_train: int
    n_test: int
    height: int
    width: int
    seed: int = 0

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "v", v)
        if v.size != self.height * self.width:
            raise DatasetError(f"v has {v.size} entries, expected height*width = {self.height * self.width}")
        norm = float(np.linalg.norm(v))
        if abs(norm - 1.0) > 1e-6:
            raise DatasetError(f"v must be a unit vector, got norm {norm:.9g}")
        if not self.epsilon > 0:
            raise DatasetError(f"epsilon must be positive, got {self.epsilon}")
        if not self.sigma >= 0:
            raise DatasetError(f"sigma must be non-negative, got {self.sigma}")
        if self.n_train < 0 or self.n_test < 0:
            raise DatasetError("sample counts must be non-negative")

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.v, dtype="<f8").tobytes())
        h.update(json.dumps([self.epsilon, self.sigma, self.n_train, self.n_test,
                             self.height, self.width, self.seed]).encode())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class DatasetHandle:
    """One split of a labeled image set.

    ``labels`` are +-1 for binary tasks. Raw CIFAR-10 keeps its class indices in
    ``classes`` (and, until binarized, in ``labels`` too).
    """

    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int8
    split: str
    provenance: dict = field(default_factory=dict)
    classes: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.split not in ("train", "test"):
            raise DatasetError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def channels(self) -> int:
        return self.images.shape[1]


# ---------------------------------------------------------------------------
# D(v)


def balanced_labels(n: int, gen: np.random.Generator) -> np.ndarray:
    """n labels with exactly floor(n/2) negatives, in random order."""
    labels = np.ones(n, dtype=np.int8)
    labels[: n // 2] = -1
    return labels[gen.permutation(n)]


def sample_linsep(spec: LinSepSpec, split: str = "train", labels: np.ndarray | None = None) -> DatasetHandle:
    """Draw one split of D(v) as single-channel (N, 1, H, W) images.

    Passing ``labels`` fixes the label sequence (used to mirror another
    dataset's class counts); otherwise labels are exactly balanced.
    """
    if split not in ("train", "test"):
        raise DatasetError(f"split must be 'train' or 'test', got {split!r}")
    gen = derive_rng(spec.seed, f"linsep:{split}")
    n = spec.n_train if split == "train" else spec.n_test
    if labels is None:
        y = balanced_labels(n, gen)
    else:
        y = np.asarray(labels, dtype=np.int8).reshape(-1)
        if not np.all((y == 1) | (y == -1)):
            raise DatasetError("labels must be -1 or +1")
        n = y.size
    d = spec.v.size
    g = gen.standard_normal((n, d)) * spec.sigma
    w = g - np.outer(g @ spec.v, spec.v)
    x = spec.epsilon * y[:, None].astype(np.float64) * spec.v[None, :] + w
    images = x.astype(np.float32).reshape(n, 1, spec.height, spec.width)
    prov = {
        "kind": "linsep",
        "spec_digest": spec.digest,
        "epsilon": spec.epsilon,
        "sigma": spec.sigma,
        "seed": spec.seed,
        "split": split,
    }
    return DatasetHandle(images, y, split, prov)


def linsep_splits(spec: LinSepSpec) -> tuple[DatasetHandle, DatasetHandle]:
    return sample_linsep(spec, "train"), sample_linsep(spec, "test")


# ---------------------------------------------------------------------------
# channel concatenation


def concat_channels(d1: DatasetHandle, d2: DatasetHandle, seed: int = 0) -> DatasetHandle:
    """Stack same-label samples of ``d2`` under those of ``d1`` along channels.

    The output keeps ``d1``'s sample order; within each class, ``d2``'s
    samples are shuffled with ``seed`` and paired in turn.
    """
    if d1.images.shape[2:] != d2.images.shape[2:]:
        raise DatasetError(f"spatial dims differ: {d1.images.shape[2:]} vs {d2.images.shape[2:]}")
    if d1.split != d2.split:
        raise DatasetError(f"cannot concatenate a {d1.split} split with a {d2.split} split")
    classes = np.union1d(np.unique(d1.labels), np.unique(d2.labels))
    pairing = np.empty(len(d1), dtype=np.int64)
    for k, label in enumerate(classes):
        idx1 = np.flatnonzero(d1.labels == label)
        idx2 = np.flatnonzero(d2.labels == label)
        if idx1.size != idx2.size:
            raise DatasetError(f"label {int(label)}: {idx1.size} samples in first set but {idx2.size} in second")
        gen = derive_rng(seed, f"concat:{d1.split}", k)
        pairing[idx1] = idx2[gen.permutation(idx2.size)]
    images = np.concatenate([d1.images, d2.images[pairing]], axis=1)
    blocks = list(d1.provenance.get("blocks", [[*range(d1.channels)]]))
    blocks.append([*range(d1.channels, d1.channels + d2.channels)])
    prov = {"kind": "concat", "parts": [d1.provenance, d2.provenance], "pair_seed": seed, "blocks": blocks}
    return DatasetHandle(images, d1.labels.copy(), d1.split, prov, d1.classes)


def ablate_channels(x: np.ndarray, keep: Iterable[int]) -> np.ndarray:
    """Zero every channel not in ``keep``; works on (C, H, W) or (N, C, H, W)."""
    x = np.asarray(x)
    axis = x.ndim - 3
    c = x.shape[axis]
    keep = sorted(set(int(k) for k in keep))
    bad = [k for k in keep if not 0 <= k < c]
    if bad:
        raise IndexError(f"channel indices {bad} out of range for {c} channels")
    out = np.zeros_like(x)
    sl = [slice(None)] * x.ndim
    sl[axis] = keep
    out[tuple(sl)] = x[tuple(sl)]
    return out


# ---------------------------------------------------------------------------
# CIFAR-10


@dataclass(frozen=True)
class Cifar10Source:
    directory: Path

    def __post_init__(self):
        object.__setattr__(self, "directory", Path(self.directory))

    def files(self, split: str) -> tuple[Path, ...]:
        names = CIFAR_TRAIN_FILES if split == "train" else (CIFAR_TEST_FILE,)
        return tuple(self.directory / n for n in names)


def parse_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Return (classes (N,), pixels (N, 3, 32, 32) uint8) for one binary batch file."""
    path = Path(path)
    if not path.exists():
        raise CifarParseError(path, 0, "batch file missing")
    blob = path.read_bytes()
    expected = CIFAR_RECORD * CIFAR_RECORDS_PER_FILE
    if len(blob) != expected:
        full = len(blob) // CIFAR_RECORD
        if len(blob) < expected:
            raise CifarParseError(path, full * CIFAR_RECORD,
                                  f"truncated record {full} ({len(blob)} of {expected} bytes)")
        raise CifarParseError(path, expected, f"trailing bytes ({len(blob)} of {expected} bytes)")
    records = np.frombuffer(blob, dtype=np.uint8).reshape(CIFAR_RECORDS_PER_FILE, CIFAR_RECORD)
    classes = records[:, 0]
    bad = np.flatnonzero(classes > 9)
    if bad.size:
        i = int(bad[0])
        raise CifarParseError(path, i * CIFAR_RECORD, f"corrupt record {i}: label byte {int(classes[i])} > 9")
    return classes.astype(np.int8), records[:, 1:].reshape(-1, 3, 32, 32)


def load_cifar10(src: Cifar10Source | str | Path) -> tuple[DatasetHandle, DatasetHandle]:
    """Load the official binary release as (train, test), pixels scaled to [0, 1]."""
    if not isinstance(src, Cifar10Source):
        src = Cifar10Source(src)
    out = []
    for split in ("train", "test"):
        parts = [parse_cifar_batch(p) for p in src.files(split)]
        classes = np.concatenate([c for c, _ in parts])
        pixels = np.concatenate([px for _, px in parts])
        images = pixels.astype(np.float32) / np.float32(255.0)
        prov = {"kind": "cifar10", "directory": str(src.directory), "split": split}
        out.append(DatasetHandle(images, classes.copy(), split, prov, classes))
    return out[0], out[1]


def binarize_cifar(d: DatasetHandle) -> DatasetHandle:
    """Classes 0-4 -> -1, classes 5-9 -> +1."""
    if d.classes is None:
        raise DatasetError("binarize_cifar needs the 10-class labels in the dataset")
    labels = np.where(d.classes < 5, -1, 1).astype(np.int8)
    return replace(d, labels=labels, provenance={**d.provenance, "binarized": "c<5 -> -1"})


def balanced_subset(d: DatasetHandle, n: int, seed: int = 0) -> DatasetHandle:
    """Pick n samples, half per binary label, with a seeded draw; keeps original order."""
    gen = derive_rng(seed, f"subset:{d.split}")
    chosen = []
    for k, label in enumerate((-1, 1)):
        idx = np.flatnonzero(d.labels == label)
        want = n // 2 if label == -1 else n - n // 2
        if want > idx.size:
            raise DatasetError(f"only {idx.size} samples with label {label}, need {want}")
        chosen.append(np.sort(gen.choice(idx, size=want, replace=False)))
    keep = np.sort(np.concatenate(chosen))
    classes = d.classes[keep] if d.classes is not None else None
    prov = {**d.provenance, "subset": {"n": n, "seed": seed}}
    return DatasetHandle(d.images[keep], d.labels[keep], d.split, prov, classes)


# ---------------------------------------------------------------------------
# normalization


def normalize(d: DatasetHandle, scheme: str = "none", stats: dict | None = None) -> DatasetHandle:
    """Per-channel standardization.

    Without ``stats`` the statistics come from ``d`` itself, which must be the
    train split; the returned provenance carries them so the test split can be
    normalized with ``stats=train_normed.provenance["normalization"]``.
    """
    if scheme == "none":
        return d
    if scheme != "standardize":
        raise DatasetError(f"unknown normalization scheme {scheme!r}")
    if stats is None:
        if d.split != "train":
            raise DatasetError("normalization statistics must come from the train split")
        x = d.images.astype(np.float64)
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
        if np.any(std == 0):
            raise DatasetError(f"zero-std channel(s) {np.flatnonzero(std == 0).tolist()}")
        stats = {"scheme": "standardize", "mean": mean.tolist(), "std": std.tolist()}
    mean = np.asarray(stats["mean"], dtype=np.float64)[None, :, None, None]
    std = np.asarray(stats["std"], dtype=np.float64)[None, :, None, None]
    if mean.shape[1] != d.channels:
        raise DatasetError(f"stats cover {mean.shape[1]} channels, data has {d.channels}")
    images = ((d.images - mean) / std).astype(np.float32)
    return replace(d, images=images, provenance={**d.provenance, "normalization": stats})


# ---------------------------------------------------------------------------
# export

_DATA_MAGIC = b"ANISODAT"
_DATA_VERSION = 1
_DATA_HEADER = struct.Struct("<8sIQIII")


def save_dataset(path, d: DatasetHandle) -> Path:
    """Write the binary dataset file plus a ``.json`` provenance sidecar; returns the sidecar path."""
    path = Path(path)
    n, c, h, w = d.images.shape
    header = _DATA_HEADER.pack(_DATA_MAGIC, _DATA_VERSION, n, c, h, w)
    body = np.asarray(d.labels, dtype="i1").tobytes() + np.asarray(d.images, dtype="<f4").tobytes()
    path.write_bytes(header + body)
    sidecar = path.with_suffix(path.suffix + ".json")
    meta = {"split": d.split, "n": n, "shape": [c, h, w], "provenance": d.provenance}
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return sidecar


def load_dataset(path) -> DatasetHandle:
    path = Path(path)
    blob = path.read_bytes()
    magic, version, n, c, h, w = _DATA_HEADER.unpack_from(blob)
    if magic != _DATA_MAGIC or version != _DATA_VERSION:
        raise DatasetError(f"{path}: not a version-{_DATA_VERSION} dataset file")
    off = _DATA_HEADER.size
    expected = off + n + 4 * n * c * h * w
    if len(blob) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes, found {len(blob)}")
    labels = np.frombuffer(blob, dtype="i1", count=n, offset=off).copy()
    images = np.frombuffer(blob, dtype="<f4", offset=off + n).reshape(n, c, h, w).astype(np.float32)
    meta = {}
    sidecar = path.with_suffix(path.suffix + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    return DatasetHandle(images, labels, meta.get("split", "train"), meta.get("provenance", {}))


def channel_blocks(d: DatasetHandle) -> list[list[int]]:
    return [list(b) for b in d.provenance.get("blocks", [[*range(d.channels)]])]


def unit(v: Sequence[float]) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    return v / np.linalg.norm(v)
