"""Synthetic lung phantoms standing in for CT scans.

Every phantom has the same centred ellipsoidal "lung" mask filling about
40% of the grid. Inside the mask a smooth parenchyma texture sits around
0.5; lesions pull intensity towards 0.1. Outside the mask is brighter soft
tissue. The class decides where the lesions go:

* 0: no lesions, texture only
* 1: blobs confined to the top third of the mask (axis 0, low indices)
* 2: a partial low-intensity rim within 2 voxels of the mask boundary
* 3+: blobs anywhere in the mask, with size and count varying by class
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .volume import Dataset, Mask, Subject, Volume

LUNG_FILL = 0.4
TISSUE = 0.8
PARENCHYMA = 0.5
LESION = 0.1
RIM_WIDTH = 2.0
# lesion strengths chosen so that no class dominates the others in total
# lesion burden: at 16^3 the rim covers most of the mask, so it is partial
CLASS1_BLOBS = (10, 2.0)  # (count, radius) at 16^3
RIM_WEIGHT = (0.3, 0.5)

# (radius, count) at 16^3 for classes 3, 4, 5, ...; cycles for higher ids
_BLOB_PLANS = [(2.5, 3), (1.0, 24), (1.7, 9)]


def ellipsoid_mask(dims) -> np.ndarray:
    d = np.asarray(dims, dtype=np.float64)
    scale = (LUNG_FILL * 6.0 / np.pi) ** (1.0 / 3.0)
    radii = scale * d / 2.0
    grids = np.meshgrid(*[(np.arange(n) + 0.5 - n / 2.0) / r
                          for n, r in zip(dims, radii)], indexing="ij")
    return sum(g * g for g in grids) <= 1.0


def mask_thirds(mask) -> tuple[np.ndarray, np.ndarray]:
    """Split a mask into its top and bottom thirds along axis 0."""
    m = mask.values if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
    z = np.nonzero(m.any(axis=(1, 2)))[0]
    lo, hi = z[0], z[-1] + 1
    third = (hi - lo) / 3.0
    idx = np.arange(m.shape[0])[:, None, None]
    top = m & (idx < lo + third)
    bottom = m & (idx >= hi - third)
    return top, bottom


def _blobs(rng, region: np.ndarray, count: int, radius: float) -> np.ndarray:
    centers = np.argwhere(region)
    picks = centers[rng.choice(len(centers), size=count, replace=True)]
    picks = picks + rng.uniform(-0.5, 0.5, size=picks.shape)
    grid = np.indices(region.shape, dtype=np.float64)
    lesion = np.zeros(region.shape)
    for c in picks:
        d2 = sum((grid[a] - c[a]) ** 2 for a in range(3))
        lesion = np.maximum(lesion, np.exp(-d2 / (radius * radius)))
    return lesion


def generate_phantom(class_id: int, dims=(16, 16, 16), seed: int = 0,
                     k_true: int | None = None, subject_id: str | None = None) -> Subject:
    if class_id < 0 or (k_true is not None and class_id >= k_true):
        raise ValueError(f"invalid class_id {class_id}")
    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng([int(seed), int(class_id), *dims])
    scale = min(dims) / 16.0
    mask = ellipsoid_mask(dims)

    texture = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=1.0)
    texture *= 0.04 / max(texture.std(), 1e-12)
    values = np.where(mask, PARENCHYMA + texture, TISSUE)

    if class_id == 0:
        lesion = np.zeros(dims)
    elif class_id == 1:
        top, _ = mask_thirds(mask)
        count, radius = CLASS1_BLOBS
        lesion = _blobs(rng, top, count=max(1, round(count * scale ** 2)),
                        radius=radius * scale)
    elif class_id == 2:
        depth = ndimage.distance_transform_edt(mask)
        lesion = (depth <= RIM_WIDTH) * rng.uniform(*RIM_WEIGHT, size=dims)
    else:
        radius, count = _BLOB_PLANS[(class_id - 3) % len(_BLOB_PLANS)]
        radius *= 1.0 + 0.25 * ((class_id - 3) // len(_BLOB_PLANS))
        lesion = _blobs(rng, mask, count=max(1, round(count * scale ** 3)),
                        radius=radius * scale)

    lesion = np.where(mask, np.clip(lesion, 0.0, 1.0), 0.0)
    values = values * (1.0 - lesion) + LESION * lesion
    values = values + 0.02 * rng.standard_normal(dims)
    sid = subject_id if subject_id is not None else f"c{class_id}_s{seed}"
    return Subject(sid, Volume(values.astype(np.float32)), Mask(mask), class_id)


def generate_dataset(k_true: int, n_per_class: int, dims=(16, 16, 16), seed: int = 0,
                     id_prefix: str = "s") -> Dataset:
    """Balanced, deterministically shuffled phantom dataset."""
    if k_true < 2:
        raise ValueError("k_true must be >= 2")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    n = k_true * n_per_class
    rng = np.random.default_rng(seed)
    classes = rng.permutation(np.repeat(np.arange(k_true), n_per_class))
    seeds = rng.integers(0, 2**31 - 1, size=n)
    subjects = [
        generate_phantom(int(c), dims, int(s), k_true=k_true,
                         subject_id=f"{id_prefix}{i:04d}")
        for i, (c, s) in enumerate(zip(classes, seeds))
    ]
    return Dataset(tuple(subjects), k_true=k_true)
