"""Corpus generation/ingestion, non-IID partitioning, RFF embedding, quantisation."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, FormatError
from .fixedpoint import FixedSpec, FxMatrix, fx_matmul, track_overflows
from .model import LocalData


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.size:
            raise DimensionMismatchError(
                f"{self.features.shape} features for {self.labels.size} labels")
        if self.labels.size < 1:
            raise ValueError("empty dataset")
        if self.labels.min() < 0:
            raise ValueError("labels must be non-negative class indices")

    @property
    def m(self) -> int:
        return self.labels.size

    @property
    def classes(self) -> int:
        return int(self.labels.max()) + 1


@dataclass(frozen=True)
class EmbeddingSpec:
    gamma: float = 5.0
    n_features: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.gamma <= 0 or self.n_features < 1:
            raise ValueError("need gamma > 0 and n_features >= 1")


def gen_synthetic(m: int, d: int, classes: int, noise: float,
                  rng: np.random.Generator, name: str = "synthetic") -> LabeledDataset:
    """Gaussian features labelled by the argmax of a random linear map plus noise."""
    if m < 1 or d < 1 or classes < 1:
        raise ValueError("m, d, classes must be positive")
    W = rng.standard_normal((d, classes))
    X = rng.standard_normal((m, d))
    scores = X @ W + noise * rng.standard_normal((m, classes))
    return LabeledDataset(X, np.argmax(scores, axis=1), name)


def sort_and_partition(ds: LabeledDataset, D: int) -> list[LabeledDataset]:
    """Stable sort by label, then D equal contiguous blocks.

    When D does not divide m the trailing ``m mod D`` points of the sorted
    corpus are dropped.
    """
    order = np.argsort(ds.labels, kind="stable")
    n = ds.m // D
    if n == 0:
        raise ValueError(f"{ds.m} samples cannot fill {D} devices")
    parts = []
    for i in range(D):
        idx = order[i * n:(i + 1) * n]
        parts.append(LabeledDataset(ds.features[idx], ds.labels[idx], f"{ds.name}[{i}]"))
    return parts


def rff_weights(d_in: int, spec: EmbeddingSpec) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(spec.seed)
    W = np.sqrt(2.0 * spec.gamma) * rng.standard_normal((d_in, spec.n_features))
    b = rng.uniform(0.0, 2.0 * np.pi, spec.n_features)
    return W, b


def rff_embed(X, spec: EmbeddingSpec) -> np.ndarray:
    """Random Fourier features approximating exp(-gamma·||x - y||²)."""
    X = np.asarray(X, dtype=np.float64)
    W, b = rff_weights(X.shape[1], spec)
    return np.sqrt(2.0 / spec.n_features) * np.cos(X @ W + b)


@dataclass
class QuantizedCorpus:
    devices: list[LocalData]
    scale: float
    spec: FixedSpec
    x_max: float
    y_max: float

    def gram_bound(self) -> float:
        """Public bound on |gram| entries implied by the per-device size and x_max."""
        n = max(dev.n for dev in self.devices)
        return n * self.x_max * self.x_max

    def grad_bound(self, theta1_max: float = 0.0) -> float:
        n = max(dev.n for dev in self.devices)
        d = self.devices[0].d
        return n * self.x_max * (self.y_max + d * self.x_max * theta1_max)


def quantize_dataset(blocks: list[tuple[np.ndarray, np.ndarray]], spec: FixedSpec,
                     headroom: float | None = None) -> QuantizedCorpus:
    """Encode per-device (X, Y) blocks and their Gram / XᵀY products in fixed point.

    Features are multiplied by one global factor (never above 1) chosen so the
    largest |gram| and |XᵀY| entry stays within ``headroom`` (default
    2**(k-f-2)). The real views of the returned data hold the decoded
    quantised values, so the real and fixed pipelines see identical inputs.
    """
    if headroom is None:
        headroom = 2.0 ** (spec.k - spec.f - 2)
    g_max = max(float(np.max(np.abs(X.T @ X))) for X, _ in blocks)
    c_max = max(float(np.max(np.abs(X.T @ Y))) for X, Y in blocks)
    y_max = max(float(np.max(np.abs(Y))) for _, Y in blocks)
    if y_max > 1.0:
        raise OverflowError(f"labels must be scaled to magnitude <= 1 (found {y_max})")
    scale = 1.0
    if g_max > headroom:
        scale = min(scale, np.sqrt(headroom / g_max))
    if c_max > headroom:
        scale = min(scale, headroom / c_max)
    devices = []
    x_max = 0.0
    for X, Y in blocks:
        Xq = FxMatrix.from_real(scale * np.asarray(X, dtype=np.float64), spec)
        Yq = FxMatrix.from_real(Y, spec)
        with track_overflows() as ov:
            gram = fx_matmul(Xq.T, Xq)
            xty = fx_matmul(Xq.T, Yq)
        if ov.count:
            raise OverflowError(
                f"{ov.count} overflow(s) forming Gram/XtY (max |gram| {g_max * scale**2:.3g}, "
                f"max |XtY| {c_max * scale:.3g}, headroom {headroom:.3g})")
        dev = LocalData.from_real(Xq.to_real(), Yq.to_real())
        dev.X_fx, dev.Y_fx, dev.gram_fx, dev.xty_fx = Xq, Yq, gram, xty
        devices.append(dev)
        x_max = max(x_max, float(np.max(np.abs(dev.X))))
    return QuantizedCorpus(devices, scale, spec, x_max, y_max)


# ------------------------------------------------------------------ file I/O

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise FormatError("file shorter than IDX magic", len(buf))
    zero, dtype_code, ndim = struct.unpack_from(">HBB", buf, 0)
    if zero != 0 or dtype_code not in _IDX_TYPES or ndim < 1:
        raise FormatError(f"bad IDX magic 0x{int.from_bytes(buf[:4], 'big'):08x}", 0)
    if len(buf) < 4 + 4 * ndim:
        raise FormatError("truncated IDX dimension header", len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    dt = np.dtype(_IDX_TYPES[dtype_code])
    offset = 4 + 4 * ndim
    need = offset + int(np.prod(dims)) * dt.itemsize
    if len(buf) != need:
        raise FormatError(f"IDX payload should end at {need}, file has {len(buf)} bytes",
                          min(len(buf), need))
    return np.frombuffer(buf, dtype=dt, offset=offset).reshape(dims)


_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}


def write_idx(path, arr: np.ndarray):
    arr = np.asarray(arr)
    code = _IDX_CODES[arr.dtype.newbyteorder("=")]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, code, arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(_IDX_TYPES[code]).tobytes())


def load_idx(images_path, labels_path, name: str = "idx") -> LabeledDataset:
    """Load an IDX image/label pair; images are flattened and scaled to [0, 1] if uint8."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise FormatError(f"label file must be 1-D, got {labels.ndim} dims", 3)
    if images.shape[0] != labels.shape[0]:
        raise DimensionMismatchError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64)
    if images.dtype == np.uint8:
        X /= 255.0
    return LabeledDataset(X, labels.astype(np.int64), name)


def load_csv(path, name: str | None = None) -> LabeledDataset:
    """Label in the first column, features in the rest; no header row."""
    path = Path(path)
    labels, rows = [], []
    width = None
    offset = 0
    with open(path, "rb") as fh:
        for raw_line in fh:
            line = raw_line.decode("utf-8").strip()
            if line:
                cells = line.split(",")
                try:
                    vals = [float(x) for x in cells]
                except ValueError:
                    raise FormatError(f"non-numeric cell in {path.name}", offset) from None
                if width is None:
                    width = len(vals)
                elif len(vals) != width:
                    raise DimensionMismatchError(
                        f"row has {len(vals)} columns, expected {width}", offset)
                if len(vals) < 2 or vals[0] != int(vals[0]):
                    raise FormatError("row needs an integer label and at least one feature", offset)
                labels.append(int(vals[0]))
                rows.append(vals[1:])
            offset += len(raw_line)
    if not rows:
        raise FormatError(f"{path.name} holds no data rows", 0)
    return LabeledDataset(np.array(rows), np.array(labels), name or path.stem)


def save_csv(ds: LabeledDataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for y, x in zip(ds.labels, ds.features):
            w.writerow([int(y)] + [repr(float(v)) for v in x])
