"""Volume and mask containers plus raw-file I/O.

Volumes are stored as ``<name>.f32raw`` (little-endian float32, x fastest)
next to a ``<name>.json`` sidecar. Masks use ``<name>.u8raw`` with one byte
per voxel. Arrays are kept in C order with shape ``(D, H, W)`` so the last
axis is x and the flat order on disk matches ``ndarray.ravel()``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MIN_DIM = 8

VOLUME_EXT = ".f32raw"
MASK_EXT = ".u8raw"


class FormatError(ValueError):
    """A file on disk does not match its declared layout."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    def __eq__(self, other):
        return (isinstance(other, Volume) and self.dims == other.dims
                and self.values.tobytes() == other.values.tobytes())


@dataclass(frozen=True, eq=False)
class Mask:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"mask must be 3-D, got shape {v.shape}")
        if v.dtype != bool:
            if not np.isin(v, (0, 1)).all():
                raise ValueError("mask values must be 0 or 1")
            v = v.astype(bool)
        if not v.any():
            raise ValueError("mask is empty")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    @property
    def count(self) -> int:
        return int(self.values.sum())

    def __eq__(self, other):
        return (isinstance(other, Mask) and self.dims == other.dims
                and np.array_equal(self.values, other.values))


@dataclass(frozen=True)
class Subject:
    id: str
    volume: Volume
    mask: Mask
    true_class: Optional[int] = None

    def __post_init__(self):
        if self.volume.dims != self.mask.dims:
            raise ValueError(
                f"subject {self.id}: volume dims {self.volume.dims} "
                f"!= mask dims {self.mask.dims}")


@dataclass(frozen=True)
class Dataset:
    subjects: tuple[Subject, ...]
    k_true: int
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        subjects = tuple(self.subjects)
        object.__setattr__(self, "subjects", subjects)
        ids = [s.id for s in subjects]
        if len(set(ids)) != len(ids):
            raise ValueError("subject ids must be unique")
        if subjects and len({s.volume.dims for s in subjects}) != 1:
            raise ValueError("all subjects must share dims")
        object.__setattr__(self, "_index", {sid: i for i, sid in enumerate(ids)})

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def __getitem__(self, i):
        return self.subjects[i]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.subjects[0].volume.dims

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.subjects]

    def by_id(self, subject_id: str) -> Subject:
        if subject_id not in self._index:
            raise KeyError(f"unknown subject {subject_id!r}; available: "
                           + ", ".join(self.ids))
        return self.subjects[self._index[subject_id]]

    def true_classes(self) -> np.ndarray:
        return np.array([s.true_class for s in self.subjects], dtype=np.int64)

    def stack(self) -> tuple[np.ndarray, np.ndarray]:
        """Volumes as ``(N, D, H, W)`` float32 and masks as bool."""
        x = np.stack([s.volume.values for s in self.subjects])
        m = np.stack([s.mask.values for s in self.subjects])
        return x, m


def check_divisible(dims: Sequence[int], factor: int) -> None:
    """Network ingestion check: every dim >= 8 and divisible by ``factor``."""
    if min(dims) < MIN_DIM:
        raise ValueError(f"dims {tuple(dims)} below network minimum {MIN_DIM}")
    bad = [d for d in dims if d % factor]
    if bad:
        raise ValueError(
            f"dims {tuple(dims)} must each be divisible by {factor} "
            f"(network downsampling factor)")


def masked_mean(volume: Volume | np.ndarray, mask: Mask | np.ndarray) -> float:
    v = volume.values if isinstance(volume, Volume) else np.asarray(volume)
    m = mask.values if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
    if v.shape != m.shape:
        raise ValueError(f"dims mismatch: {v.shape} vs {m.shape}")
    if not m.any():
        raise ValueError("mask is empty")
    return float(np.mean(v[m], dtype=np.float64))


# ---------------------------------------------------------------------------
# raw files

def _paths(path, ext: str) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (VOLUME_EXT, MASK_EXT, ".json"):
        p = p.with_suffix("")
    return p.with_name(p.name + ext), p.with_name(p.name + ".json")


def _write_raw(path, ext, payload: bytes, sidecar: dict) -> None:
    raw, meta = _paths(path, ext)
    raw.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(payload)
    meta.write_text(json.dumps(sidecar, sort_keys=True) + "\n")


def _read_raw(path, ext, kind: str, itemsize: int) -> tuple[list[int], bytes, dict]:
    raw, meta = _paths(path, ext)
    if not meta.exists():
        raise FileNotFoundError(f"missing sidecar {meta}")
    if not raw.exists():
        raise FileNotFoundError(f"missing payload {raw}")
    info = json.loads(meta.read_text())
    if info.get("kind") != kind:
        raise FormatError(f"{meta}: expected kind {kind!r}, got {info.get('kind')!r}")
    dims = [int(d) for d in info["dims"]]
    payload = raw.read_bytes()
    if len(payload) != int(np.prod(dims)) * itemsize:
        raise FormatError(
            f"{raw}: payload size mismatch ({len(payload)} bytes for dims {dims})")
    return dims, payload, info


def save_volume(volume: Volume, path) -> None:
    _write_raw(path, VOLUME_EXT, volume.values.astype("<f4").tobytes(),
               {"dims": list(volume.dims), "dtype": "f32le", "kind": "volume"})


def load_volume(path) -> Volume:
    dims, payload, _ = _read_raw(path, VOLUME_EXT, "volume", 4)
    values = np.frombuffer(payload, dtype="<f4").reshape(dims)
    if not np.all(np.isfinite(values)):
        raise FormatError(f"{path}: non-finite values in payload")
    return Volume(values.astype(np.float32))


def save_mask(mask: Mask | np.ndarray, path) -> None:
    v = mask.values if isinstance(mask, Mask) else np.asarray(mask)
    if not np.isin(v, (0, 1)).all():
        raise FormatError("mask values must be 0 or 1")
    _write_raw(path, MASK_EXT, v.astype(np.uint8).tobytes(),
               {"dims": list(v.shape), "dtype": "u8", "kind": "mask"})


def load_mask(path) -> Mask:
    dims, payload, _ = _read_raw(path, MASK_EXT, "mask", 1)
    values = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    if not np.isin(values, (0, 1)).all():
        raise FormatError(f"{path}: mask values outside {{0, 1}}")
    return Mask(values.astype(bool))


# ---------------------------------------------------------------------------
# dataset manifest

MANIFEST_NAME = "manifest.json"


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write every subject plus ``manifest.json``; paths are relative to it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in dataset:
        save_volume(s.volume, out / s.id)
        save_mask(s.mask, out / f"{s.id}_mask")
        entries.append({
            "id": s.id,
            "volume_path": s.id + VOLUME_EXT,
            "mask_path": f"{s.id}_mask{MASK_EXT}",
            "true_class": s.true_class,
        })
    manifest = out / MANIFEST_NAME
    manifest.write_text(json.dumps(entries, indent=1) + "\n")
    return manifest


def load_dataset(path) -> Dataset:
    """Load from a manifest file or a directory containing one."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    entries = json.loads(p.read_text())
    subjects = []
    for e in entries:
        subjects.append(Subject(
            id=e["id"],
            volume=load_volume(p.parent / e["volume_path"]),
            mask=load_mask(p.parent / e["mask_path"]),
            true_class=e.get("true_class"),
        ))
    classes = {s.true_class for s in subjects if s.true_class is not None}
    return Dataset(tuple(subjects), k_true=len(classes))
