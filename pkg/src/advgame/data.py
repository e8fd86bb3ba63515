"""Datasets: IDX files, synthetic generators and seeded minibatching."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng

IDX_UBYTE = 0x08


class IdxError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


class IdxMagicError(IdxError):
    pass


class IdxTypeError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxTrailingDataError(IdxError):
    pass


def parse_idx_raw(buf: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX buffer into a uint8 array of the stated shape."""
    buf = bytes(buf)
    if len(buf) < 4:
        raise IdxTruncatedError("header shorter than 4 bytes", len(buf))
    if buf[0] != 0 or buf[1] != 0:
        raise IdxMagicError(f"magic bytes {buf[0]:#04x} {buf[1]:#04x}, expected 0x00 0x00", 0)
    if buf[2] != IDX_UBYTE:
        raise IdxTypeError(f"unsupported type code {buf[2]:#04x}", 2)
    rank = buf[3]
    if rank == 0:
        raise IdxMagicError("rank 0 is not a valid IDX tensor", 3)
    end = 4 + 4 * rank
    if len(buf) < end:
        raise IdxTruncatedError(f"dimension table needs {end} bytes, have {len(buf)}", len(buf))
    dims = struct.unpack(f">{rank}I", buf[4:end])
    size = int(np.prod(dims, dtype=np.int64))
    if len(buf) < end + size:
        raise IdxTruncatedError(f"payload needs {size} bytes, have {len(buf) - end}", len(buf))
    if len(buf) > end + size:
        raise IdxTrailingDataError(f"{len(buf) - end - size} unexpected trailing bytes", end + size)
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=end).reshape(dims).copy()


def parse_idx(buf: bytes) -> np.ndarray:
    """IDX payload as float64 scaled to [0, 1] by 1/255."""
    return parse_idx_raw(buf).astype(np.float64) / 255.0


def write_idx(arr: np.ndarray) -> bytes:
    """Encode a uint8 array, or floats in [0, 1] (rounded from x*255), as IDX."""
    arr = np.asarray(arr)
    if arr.ndim == 0 or arr.ndim > 255:
        raise ValueError("IDX needs rank 1..255")
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 1):
            raise ValueError("float input must lie in [0, 1]")
        arr = np.rint(arr * 255.0).astype(np.uint8)
    header = bytes([0, 0, IDX_UBYTE, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    classes: int
    normalization: dict = field(default_factory=lambda: {"scale": 1.0, "offset": 0.0})

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be (examples, dim)")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("one label per example")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs must be finite")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.classes, dict(self.normalization))

    def save_npz(self, path: str | Path) -> None:
        np.savez(path, inputs=self.inputs, labels=self.labels, classes=self.classes)

    @classmethod
    def load_npz(cls, path: str | Path) -> "Dataset":
        with np.load(path) as z:
            return cls(z["inputs"], z["labels"], int(z["classes"]))


def load_idx_dataset(images_path: str | Path, labels_path: str | Path, classes: int = 10) -> Dataset:
    images = parse_idx(Path(images_path).read_bytes())
    labels = parse_idx_raw(Path(labels_path).read_bytes())
    if labels.ndim != 1:
        raise ValueError("label file must be rank 1")
    x = images.reshape(images.shape[0], -1)
    return Dataset(x, labels.astype(np.int64), classes, {"scale": 1 / 255.0, "offset": 0.0})


@dataclass
class SyntheticSpec:
    kind: str = "two_gaussians"
    dim: int = 10
    examples: int = 2000
    margin: float = 2.0
    noise: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("two_gaussians", "two_moons"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.examples < 2:
            raise ValueError("need at least 2 examples")
        if self.dim < 1 or (self.kind == "two_moons" and self.dim < 2):
            raise ValueError("dim too small for this kind")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Two-class toy data; labels alternate so the classes stay balanced.

    ``two_gaussians`` centres the classes at -margin/2 and +margin/2 on the
    first axis with isotropic noise. ``two_moons`` puts interleaved half
    circles (separated by ``margin``/2 vertically) in the first two axes.
    """
    rng = Rng(spec.seed).generator
    N, d = spec.examples, spec.dim
    labels = np.arange(N) % 2
    if spec.kind == "two_gaussians":
        x = np.zeros((N, d))
        x[:, 0] = np.where(labels == 0, -spec.margin / 2, spec.margin / 2)
    else:
        angle = rng.uniform(0.0, np.pi, N)
        x = np.zeros((N, d))
        x[:, 0] = np.where(labels == 0, np.cos(angle), 1.0 - np.cos(angle))
        x[:, 1] = np.where(labels == 0, np.sin(angle), -np.sin(angle) + 0.5 - spec.margin / 4)
    x = x + spec.noise * rng.standard_normal((N, d))
    return Dataset(x, labels, 2, {"scale": 1.0, "offset": 0.0, "synthetic": spec.kind})


def batches(n_examples: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded permutation of ``range(n_examples)`` cut into consecutive slices."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    perm = Rng(seed).child(epoch).generator.permutation(n_examples)
    return [perm[i:i + batch_size] for i in range(0, n_examples, batch_size)]
