"""Dense clustering activation maps.

The head is a per-voxel affine map, so applying it to the dense features
before pooling gives one logit volume per cluster whose lung mean is the
pooled logit the classifier actually sees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import FeatureNet, Head, masked_avg_pool, unet_forward
from .phantom import mask_thirds
from .volume import Subject

AXES = {"z": 0, "y": 1, "x": 2}
AXIS_ALIASES = {"axial": "z", "coronal": "y", "sagittal": "x"}
MID_GRAY = 128


class DCAMRefused(ValueError):
    """The network cannot produce full-resolution maps."""


@dataclass(frozen=True)
class DCAM:
    maps: np.ndarray  # (k, D, H, W) raw logits
    subject_id: str
    cluster: int
    mask: np.ndarray

    def __post_init__(self):
        if self.maps.ndim != 4 or self.maps.shape[1:] != self.mask.shape:
            raise ValueError(f"maps {self.maps.shape} do not match mask {self.mask.shape}")

    @property
    def k(self) -> int:
        return self.maps.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.maps.shape[1:])

    def masked_means(self) -> np.ndarray:
        return self.maps[:, self.mask].mean(axis=1)


def refusal_message(net: FeatureNet) -> str:
    f = net.topology.factor
    return (f"dense activation maps need full-resolution features; the {net.topology.variant} "
            f"network ends at 1/{f} resolution and has no upsampling path")


def compute_dcam(net: FeatureNet, head: Head, subject: Subject) -> DCAM:
    """Apply ``head`` to every voxel of the dense features of ``subject``.

    Maps are computed in float64 from the network output so the lung mean
    of each channel matches the pooled logit to rounding.
    """
    if not net.topology.with_upsampling:
        raise DCAMRefused(refusal_message(net))
    if head.in_channels != net.topology.out_channels:
        raise ValueError(f"head expects {head.in_channels} channels, "
                         f"network gives {net.topology.out_channels}")
    feats = unet_forward(net, subject.volume).astype(np.float64)
    h64 = head.copy(np.float64)
    mask = subject.mask.values
    maps = np.moveaxis(h64(feats), -1, 0)
    pooled_logits = h64(masked_avg_pool(feats, mask))
    return DCAM(np.ascontiguousarray(maps), subject.id, int(np.argmax(pooled_logits)),
                mask.copy())


def resolve_axis(axis: str) -> str:
    name = AXIS_ALIASES.get(axis, axis)
    if name not in AXES:
        raise ValueError(f"unknown axis {axis!r}; use one of z, y, x, axial, coronal, sagittal")
    return name


def normalize_channel(dcam: DCAM, channel: int) -> np.ndarray:
    """8-bit display image: min-max over the mask, zero outside it."""
    if not 0 <= channel < dcam.k:
        raise ValueError(f"channel {channel} out of range [0, {dcam.k})")
    values = dcam.maps[channel]
    inside = values[dcam.mask]
    lo, hi = inside.min(), inside.max()
    out = np.zeros(values.shape, dtype=np.uint8)
    if hi - lo <= 0:
        out[dcam.mask] = MID_GRAY
        return out
    scaled = np.rint((values - lo) / (hi - lo) * 255.0)
    out[dcam.mask] = np.clip(scaled[dcam.mask], 0, 255).astype(np.uint8)
    return out


def write_pgm(path, image: np.ndarray) -> None:
    h, w = image.shape
    with Path(path).open("wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w)


def export_slices(dcam: DCAM, channel: int, axis: str, out_dir) -> list[Path]:
    """Write one PGM per slice along ``axis``; returns the paths in order."""
    name = resolve_axis(axis)
    image = normalize_channel(dcam, channel)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(image.shape[AXES[name]]):
        path = out / f"{dcam.subject_id}_c{channel}_{name}{i}.pgm"
        write_pgm(path, np.take(image, i, axis=AXES[name]))
        paths.append(path)
    return paths


def save_dcam(dcam: DCAM, stem) -> Path:
    """Raw float32 dump of all channels plus a JSON sidecar."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    raw = stem.with_name(stem.name + ".f32raw")
    raw.write_bytes(dcam.maps.astype("<f4").tobytes())
    meta = {"dims": list(dcam.dims), "channels": dcam.k, "dtype": "f32le", "kind": "dcam",
            "subject": dcam.subject_id, "cluster": dcam.cluster}
    stem.with_name(stem.name + ".json").write_text(json.dumps(meta, indent=1) + "\n")
    return raw


def top_bottom_mass(dcam: DCAM, channel: int | None = None) -> tuple[float, float]:
    """Positive activation mass in the top and bottom thirds of the mask.

    The channel (default: the assigned cluster) is centred on its lung mean
    and scaled by its lung range; only the part above the mean counts.
    """
    c = dcam.cluster if channel is None else channel
    values = dcam.maps[c]
    inside = values[dcam.mask]
    spread = inside.max() - inside.min()
    if spread <= 0:
        return 0.0, 0.0
    pos = np.maximum((values - inside.mean()) / spread, 0.0)
    top, bottom = mask_thirds(dcam.mask)
    return float(pos[top].sum()), float(pos[bottom].sum())
