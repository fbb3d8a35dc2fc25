"""Shared tensor containers, validation and manifest-based array storage.

Conventions used across the package:
    * multichannel spectrograms are complex arrays indexed (f, t, m),
      row-major with the channel axis fastest
    * activity masks are binary arrays indexed (n, t)
    * complex payloads are stored as interleaved (real, imag) float pairs,
      little-endian
    * every stochastic operation takes one explicit 64-bit seed; there is
      no ambient global randomness
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np


class SepdiarError(Exception):
    """Base class for errors raised by this package."""


class DimensionMismatch(SepdiarError):
    pass


class NonFiniteValue(SepdiarError):
    pass


class ManifestMismatch(SepdiarError):
    pass


# File-level failures propagate as the standard OS errors.
IoError = OSError

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "arrays.bin"


def make_rng(seed):
    """Deterministic generator from a single 64-bit seed."""
    return np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class Spectrogram:
    """Complex time-frequency tensor of a multichannel signal.

    data holds F*T*M complex values laid out (f, t, m) with m fastest;
    sample_rate and hop carry the analysis configuration so frame indices
    can be mapped back to time.
    """

    data: np.ndarray
    num_freqs: int
    num_frames: int
    num_channels: int
    sample_rate: float = 16000.0
    hop: int = 160

    @classmethod
    def from_array(cls, data_ftm, sample_rate=16000.0, hop=160):
        data_ftm = np.ascontiguousarray(data_ftm, dtype=np.complex128)
        if data_ftm.ndim != 3:
            raise DimensionMismatch(
                f"expected (f, t, m) array, got shape {data_ftm.shape}")
        F, T, M = data_ftm.shape
        return cls(data_ftm, F, T, M, float(sample_rate), int(hop))

    @property
    def tensor(self):
        """The (F, T, M) view of the payload."""
        return self.data.reshape(self.num_freqs, self.num_frames,
                                 self.num_channels)

    @property
    def shape(self):
        return (self.num_freqs, self.num_frames, self.num_channels)


@dataclass(frozen=True)
class ActivityMask:
    """Binary (n, t) speaker-activity matrix."""

    data: np.ndarray
    num_sources: int
    num_frames: int

    @classmethod
    def from_array(cls, data_nt):
        data_nt = np.ascontiguousarray(data_nt)
        if data_nt.ndim != 2:
            raise DimensionMismatch(
                f"expected (n, t) array, got shape {data_nt.shape}")
        values = np.unique(data_nt)
        if not np.isin(values, (0, 1)).all():
            raise ValueError(
                f"mask entries must be 0 or 1, found {values[:5]}")
        return cls(data_nt.astype(np.uint8), data_nt.shape[0],
                   data_nt.shape[1])

    @property
    def matrix(self):
        return self.data.reshape(self.num_sources, self.num_frames)


def validate_spectrogram(spec):
    """Check a Spectrogram against its invariants.

    Raises DimensionMismatch when the payload length disagrees with the
    declared F*T*M, and NonFiniteValue (with the flat position of the first
    violation) when any entry is NaN or infinite.
    """
    expected = spec.num_freqs * spec.num_frames * spec.num_channels
    if spec.num_freqs < 1 or spec.num_frames < 1 or spec.num_channels < 1:
        raise DimensionMismatch(
            f"dimensions must be positive, got {spec.shape}")
    if spec.data.size != expected:
        raise DimensionMismatch(
            f"payload holds {spec.data.size} values, dimensions "
            f"{spec.shape} require {expected}")
    flat = spec.data.reshape(-1)
    finite = np.isfinite(flat.real) & np.isfinite(flat.imag)
    if not finite.all():
        pos = int(np.argmin(finite))
        raise NonFiniteValue(f"non-finite value at flat position {pos}")


def validate_mask(mask, num_frames=None):
    """Check an ActivityMask: binary entries, optional frame-count match."""
    if mask.data.size != mask.num_sources * mask.num_frames:
        raise DimensionMismatch(
            f"payload holds {mask.data.size} values, dimensions "
            f"({mask.num_sources}, {mask.num_frames}) require "
            f"{mask.num_sources * mask.num_frames}")
    values = np.unique(mask.data)
    if not np.isin(values, (0, 1)).all():
        raise NonFiniteValue(
            f"mask entries must be 0 or 1, found {values[:5]}")
    if num_frames is not None and mask.num_frames != num_frames:
        raise DimensionMismatch(
            f"mask has {mask.num_frames} frames, paired tensor has "
            f"{num_frames}")


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    dtype: str
    shape: tuple
    offset: int
    path: str


@dataclass(frozen=True)
class ArrayManifest:
    """Sidecar describing raw little-endian array payloads."""

    entries: tuple
    metadata: dict = field(default_factory=dict)


def _le_dtype(arr):
    dt = arr.dtype.newbyteorder("<")
    return arr.astype(dt, copy=False), dt.str


def save_arrays(out_dir, arrays, metadata=None):
    """Write arrays plus a JSON manifest under out_dir.

    arrays maps unique names to numpy arrays.  Payloads go into one raw
    little-endian file; the manifest records name, dtype, shape, offset and
    payload path for each entry.  Returns the ArrayManifest.
    """
    os.makedirs(out_dir, exist_ok=True)
    names = list(arrays)
    if len(set(names)) != len(names):
        raise ManifestMismatch("array names must be unique")
    entries = []
    offset = 0
    with open(os.path.join(out_dir, PAYLOAD_NAME), "wb") as payload:
        for name in names:
            arr = np.ascontiguousarray(arrays[name])
            arr, dtype_str = _le_dtype(arr)
            raw = arr.tobytes()
            payload.write(raw)
            entries.append(ManifestEntry(name, dtype_str, tuple(arr.shape),
                                         offset, PAYLOAD_NAME))
            offset += len(raw)
    manifest = ArrayManifest(tuple(entries), dict(metadata or {}))
    doc = {
        "version": MANIFEST_VERSION,
        "metadata": manifest.metadata,
        "entries": [
            {"name": e.name, "dtype": e.dtype, "shape": list(e.shape),
             "offset": e.offset, "path": e.path}
            for e in entries
        ],
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w",
              encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_arrays(path):
    """Load arrays saved by save_arrays; returns (arrays, metadata).

    path may be the manifest file or its directory.  Round-trips are
    bit-exact.  Raises ManifestMismatch when a declared dtype/shape does not
    fit the payload.
    """
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    base = os.path.dirname(path)
    arrays = {}
    payload_cache = {}
    declared_extent = {}
    for entry in doc["entries"]:
        name = entry["name"]
        if name in arrays:
            raise ManifestMismatch(f"duplicate entry name {name!r}")
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * dtype.itemsize
        payload_path = os.path.join(base, entry["path"])
        if payload_path not in payload_cache:
            with open(payload_path, "rb") as fh:
                payload_cache[payload_path] = fh.read()
        raw = payload_cache[payload_path]
        offset = int(entry["offset"])
        if offset + nbytes > len(raw):
            raise ManifestMismatch(
                f"entry {name!r} declares {nbytes} bytes at offset {offset} "
                f"but payload holds {len(raw)}")
        declared_extent[payload_path] = max(
            declared_extent.get(payload_path, 0), offset + nbytes)
        view = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
        arrays[name] = view.reshape(shape).copy()
    for payload_path, raw in payload_cache.items():
        if declared_extent[payload_path] != len(raw):
            raise ManifestMismatch(
                f"declared byte length {declared_extent[payload_path]} "
                f"differs from size {len(raw)} of {payload_path}")
    return arrays, doc.get("metadata", {})
