"""Per-frame descriptor sets: file formats, normalization and synthetic fixtures."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from lcdkit.geometry import Pose

RAW_MAGIC = b"LBD1"
NPY_MAGIC = b"\x93NUMPY"
_RAW_HEADER = struct.Struct("<4sIII")

METRICS = ("euclidean", "cosine")
NORM_TOL = 1e-4

PathLike = Union[str, os.PathLike]


class DescriptorFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    """Row-major ``count x dim`` float32 matrix, one row per frame.

    The array is stored read-only.
    """

    data: np.ndarray
    normalized: bool = False
    metric_hint: str = "euclidean"

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] == 0:
            raise ValueError(f"descriptor data must be a nonempty 2-D array, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("descriptor data contains non-finite values")
        if self.metric_hint not in METRICS:
            raise ValueError(f"unknown metric {self.metric_hint!r}")
        if self.normalized:
            norms = np.linalg.norm(data.astype(np.float64), axis=1)
            bad = np.nonzero(np.abs(norms - 1.0) > NORM_TOL)[0]
            if bad.size:
                raise ValueError(f"row {int(bad[0])} is not unit norm")
        if data is self.data:
            data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self):
        return self.count


@dataclass(frozen=True)
class LocalFeatureSet:
    """Variable-length local descriptors per frame, shared dimension."""

    frames: tuple
    dim: int

    def __post_init__(self):
        frames = []
        for i, f in enumerate(self.frames):
            arr = np.asarray(f, dtype=np.float32)
            if arr.size == 0:
                arr = np.zeros((0, self.dim), dtype=np.float32)
            if arr.ndim != 2 or arr.shape[1] != self.dim:
                raise ValueError(f"frame {i}: expected (n, {self.dim}) features, got {arr.shape}")
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            frames.append(arr)
        object.__setattr__(self, "frames", tuple(frames))

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def total(self) -> int:
        return sum(f.shape[0] for f in self.frames)


def _from_array(arr: np.ndarray) -> DescriptorSet:
    if arr.ndim != 2:
        raise DescriptorFormatError(f"descriptor array must be 2-D, got shape {arr.shape}")
    return DescriptorSet(arr.astype(np.float32))


def _load_raw(buf: bytes) -> DescriptorSet:
    if len(buf) < _RAW_HEADER.size:
        raise DescriptorFormatError("truncated header")
    magic, count, dim, reserved = _RAW_HEADER.unpack_from(buf)
    if magic != RAW_MAGIC:
        raise DescriptorFormatError(f"bad magic {magic!r}")
    if reserved != 0:
        raise DescriptorFormatError("unsupported raw format version")
    expected = count * dim * 4
    payload = buf[_RAW_HEADER.size:]
    if len(payload) < expected:
        raise DescriptorFormatError(
            f"truncated payload: expected {expected} bytes, got {len(payload)}"
        )
    if len(payload) > expected:
        raise DescriptorFormatError("trailing bytes after payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    return _from_array(arr)


def _load_npy(fh) -> DescriptorSet:
    version = np.lib.format.read_magic(fh)
    if version != (1, 0):
        raise DescriptorFormatError(f"unsupported npy version {version}")
    shape, fortran, dtype = np.lib.format.read_array_header_1_0(fh)
    if fortran:
        raise DescriptorFormatError("npy payload must be C-order")
    if len(shape) != 2:
        raise DescriptorFormatError(f"descriptor array must be 2-D, got shape {shape}")
    if dtype.str not in ("<f4", "<f8"):
        raise DescriptorFormatError(f"unsupported element type {dtype.str}")
    nbytes = int(np.prod(shape)) * dtype.itemsize
    payload = fh.read(nbytes)
    if len(payload) < nbytes:
        raise DescriptorFormatError(
            f"truncated payload: expected {nbytes} bytes, got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return _from_array(arr)


def load_descriptors(path: PathLike) -> DescriptorSet:
    """Read a raw ``LBD1`` file or a v1.0 ``.npy`` container.

    Format is detected from the leading magic bytes. float64 input is
    narrowed to float32. No normalization is applied.
    """
    with open(path, "rb") as fh:
        head = fh.read(len(NPY_MAGIC))
        fh.seek(0)
        if head == NPY_MAGIC:
            return _load_npy(fh)
        if head[:4] == RAW_MAGIC:
            return _load_raw(fh.read())
    raise DescriptorFormatError(f"{path}: unrecognized descriptor file magic")


def save_descriptors(ds: DescriptorSet, path: PathLike, fmt: str | None = None) -> None:
    """Write ``ds`` as ``.npy`` (by extension, or ``fmt="npy"``) or raw ``LBD1``."""
    path = Path(path)
    if fmt is None:
        fmt = "npy" if path.suffix == ".npy" else "raw"
    data = np.ascontiguousarray(ds.data, dtype="<f4")
    with open(path, "wb") as fh:
        if fmt == "npy":
            np.lib.format.write_array(fh, data, version=(1, 0), allow_pickle=False)
        elif fmt == "raw":
            fh.write(_RAW_HEADER.pack(RAW_MAGIC, data.shape[0], data.shape[1], 0))
            fh.write(data.tobytes())
        else:
            raise ValueError(f"unknown descriptor format {fmt!r}")


def normalize(ds: DescriptorSet) -> DescriptorSet:
    """Scale every row to unit L2 norm."""
    data = ds.data.astype(np.float64)
    norms = np.linalg.norm(data, axis=1)
    zero = np.nonzero(norms == 0)[0]
    if zero.size:
        raise ValueError(f"row {int(zero[0])} has zero norm")
    out = (data / norms[:, None]).astype(np.float32)
    return DescriptorSet(out, normalized=True, metric_hint=ds.metric_hint)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x64 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x64, axis=1)
    zero = np.nonzero(norms == 0)[0]
    if zero.size:
        raise ValueError(f"row {int(zero[0])} has zero norm")
    return (x64 / norms[:, None]).astype(np.float32)


class DescriptorNormalizer(TransformerMixin, BaseEstimator):
    """Stateless L2 row normalizer for pipelines."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        if isinstance(X, DescriptorSet):
            return normalize(X)
        return normalize_rows(X)


def _pose_features(trajectory: Sequence[Pose], rotation_scale: float) -> np.ndarray:
    pos = np.stack([p.translation for p in trajectory])
    rot = np.stack([p.rotation.reshape(-1) for p in trajectory])
    return np.hstack([pos, rotation_scale * rot])


def synth_descriptors(
    trajectory: Sequence[Pose],
    dim: int,
    noise_sigma: float,
    seed: int,
    length_scale: float = 1.5,
    rotation_scale: float = 3.5,
) -> DescriptorSet:
    """Random Fourier features of pose plus isotropic noise.

    Position and (scaled) rotation entries go through a fixed random
    cosine map, approximating an RBF kernel of width ``length_scale``, so
    frames with nearby poses get nearby descriptors. Noise has expected
    norm ``noise_sigma`` against a signal of norm about 1. Output rows are
    not normalized.
    """
    if dim < 8:
        raise ValueError("dim must be >= 8")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    z = _pose_features(trajectory, rotation_scale)
    freqs = rng.normal(scale=1.0 / length_scale, size=(z.shape[1], dim))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=dim)
    signal = np.sqrt(2.0 / dim) * np.cos(z @ freqs + phases)
    noise = rng.normal(scale=noise_sigma / np.sqrt(dim), size=signal.shape)
    return DescriptorSet((signal + noise).astype(np.float32))


def synth_local_features(
    trajectory: Sequence[Pose],
    dim_local: int = 32,
    n_landmarks: int = 400,
    view_radius: float = 6.0,
    noise_sigma: float = 0.05,
    seed: int = 0,
    max_per_frame: int | None = None,
) -> LocalFeatureSet:
    """Per-frame local descriptors from a synthetic landmark map.

    Landmarks are scattered near the trajectory, each with a random unit
    appearance vector. A frame observes the landmarks within
    ``view_radius`` of its position; each observation yields the landmark's
    appearance plus Gaussian noise. Frames far apart see disjoint
    landmarks, so shared visual words imply spatial proximity.
    """
    rng = np.random.default_rng(seed)
    pos = np.stack([p.translation for p in trajectory])
    anchors = pos[rng.integers(0, len(pos), size=n_landmarks)]
    landmarks = anchors + rng.normal(scale=view_radius / 2.0, size=anchors.shape)
    landmarks[:, 2] = 0.0
    appearance = rng.normal(size=(n_landmarks, dim_local))
    appearance /= np.linalg.norm(appearance, axis=1, keepdims=True)
    frames = []
    for p in pos:
        seen = np.nonzero(np.linalg.norm(landmarks - p, axis=1) < view_radius)[0]
        if max_per_frame is not None and seen.size > max_per_frame:
            seen = np.sort(rng.choice(seen, size=max_per_frame, replace=False))
        feats = appearance[seen] + rng.normal(scale=noise_sigma, size=(seen.size, dim_local))
        frames.append(feats.astype(np.float32))
    return LocalFeatureSet(tuple(frames), dim_local)


def load_local_features(directory: PathLike) -> LocalFeatureSet:
    """One ``.npy`` per frame; files ordered by their numeric stem."""
    directory = Path(directory)
    files = sorted(directory.glob("*.npy"), key=lambda f: int(f.stem))
    if not files:
        raise DescriptorFormatError(f"{directory}: no .npy feature files")
    frames = []
    dim = None
    for f in files:
        arr = np.load(f, allow_pickle=False)
        if arr.ndim != 2:
            raise DescriptorFormatError(f"{f}: expected a 2-D array")
        if dim is None:
            dim = arr.shape[1]
        frames.append(arr.astype(np.float32))
    return LocalFeatureSet(tuple(frames), int(dim))


def save_local_features(features: LocalFeatureSet, directory: PathLike) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(6, len(str(len(features))))
    for i, frame in enumerate(features.frames):
        np.save(directory / f"{i:0{width}d}.npy", np.ascontiguousarray(frame, dtype="<f4"))
