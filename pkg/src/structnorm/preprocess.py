"""Voxel-ratio resampling, HU windowing and mask slice completion."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dataset import VolumeSample


@dataclass
class PreprocessConfig:
    target_ratio: tuple[float, float, float] = (0.77, 1.0, 1.0)
    hu_window: tuple[float, float] = (-1000.0, 2500.0)
    # absolute in-plane spacing in mm; None keeps the finer input in-plane spacing
    target_inplane_spacing: Optional[float] = None

    def __post_init__(self):
        self.target_ratio = tuple(float(r) for r in self.target_ratio)
        self.hu_window = tuple(float(h) for h in self.hu_window)
        self.validate()

    def validate(self) -> None:
        if len(self.target_ratio) != 3 or any(r <= 0 for r in self.target_ratio):
            raise ValueError("target_ratio components must be positive")
        lo, hi = self.hu_window
        if not lo < hi:
            raise ValueError("hu_window must satisfy low < high")
        if self.target_inplane_spacing is not None and self.target_inplane_spacing <= 0:
            raise ValueError("target_inplane_spacing must be positive")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _linear_axis(grid: np.ndarray, axis: int, new_len: int) -> np.ndarray:
    old_len = grid.shape[axis]
    if new_len == old_len:
        return grid
    if old_len == 1:
        return np.repeat(grid, new_len, axis=axis)
    if new_len == 1:
        pos = np.zeros(1)
    else:
        # corner-aligned: first and last samples coincide with the input's
        pos = np.arange(new_len) * ((old_len - 1) / (new_len - 1))
    lo = np.clip(np.floor(pos).astype(int), 0, old_len - 2)
    frac = pos - lo
    shape = [1] * grid.ndim
    shape[axis] = new_len
    frac = frac.reshape(shape)
    a = np.take(grid, lo, axis=axis)
    b = np.take(grid, lo + 1, axis=axis)
    return a + (b - a) * frac


def trilinear_resample(grid: np.ndarray, new_shape) -> np.ndarray:
    """Separable corner-aligned trilinear interpolation of a 3-D grid."""
    new_shape = tuple(int(n) for n in new_shape)
    if len(new_shape) != grid.ndim or any(n < 1 for n in new_shape) or min(grid.shape) < 1:
        raise ValueError(f"cannot resample {grid.shape} to {new_shape}")
    if new_shape == grid.shape:
        return grid.copy()
    out_dtype = grid.dtype if np.issubdtype(grid.dtype, np.floating) else np.float64
    out = grid.astype(np.float64)
    for axis, n in enumerate(new_shape):
        out = _linear_axis(out, axis, n)
    return out.astype(out_dtype)


def resample_mask(mask: np.ndarray, new_shape) -> np.ndarray:
    """Trilinear interpolation thresholded at 0.5; keeps at least one voxel if the input had one."""
    if tuple(new_shape) == mask.shape:
        return mask.astype(np.uint8).copy()
    soft = trilinear_resample(mask.astype(np.float64), new_shape)
    out = (soft >= 0.5).astype(np.uint8)
    if not out.any() and mask.any():
        out[np.unravel_index(int(np.argmax(soft)), soft.shape)] = 1
    return out


def target_spacing(spacing, config: PreprocessConfig) -> tuple[float, float, float]:
    ratio = np.array(config.target_ratio)
    inplane = config.target_inplane_spacing
    if inplane is None:
        inplane = min(spacing[1], spacing[2])
    return tuple(float(v) for v in inplane * ratio / ratio[1])


def normalized_shape(shape, spacing, new_spacing) -> tuple[int, int, int]:
    out = []
    for n, s, t in zip(shape, spacing, new_spacing):
        extent = (n - 1) * s
        out.append(_round_half_up(extent / t) + 1)
    return tuple(out)


def normalize_voxels(sample: VolumeSample, config: Optional[PreprocessConfig] = None) -> VolumeSample:
    """Resample so spacing follows ``config.target_ratio`` while keeping physical extent."""
    config = config or PreprocessConfig()
    new_spacing = target_spacing(sample.spacing, config)
    new_shape = normalized_shape(sample.shape, sample.spacing, new_spacing)
    if min(new_shape) < 1:
        raise ValueError(f"normalized shape {new_shape} is empty")
    if new_shape == sample.shape:
        return sample.with_arrays(sample.ct.copy(), sample.mask.copy(), new_spacing)
    ct = trilinear_resample(sample.ct, new_shape)
    mask = resample_mask(sample.mask, new_shape)
    return sample.with_arrays(ct, mask, new_spacing)


def normalize_hu(ct: np.ndarray, config: Optional[PreprocessConfig] = None) -> np.ndarray:
    lo, hi = (config or PreprocessConfig()).hu_window
    ct = np.asarray(ct, dtype=np.float64)
    return ((np.clip(ct, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def fill_missing_mask_slices(mask: np.ndarray) -> np.ndarray:
    """Copy the nearest nonempty axial slice into empty slices inside the contour span.

    Ties between equally distant neighbours go to the lower slice index.
    """
    filled = np.array(mask, dtype=np.uint8, copy=True)
    nonempty = np.flatnonzero(filled.reshape(filled.shape[0], -1).any(axis=1))
    if len(nonempty) == 0:
        raise ValueError("mask is empty; nothing to fill from")
    for z in range(nonempty[0] + 1, nonempty[-1]):
        if z in nonempty:
            continue
        j = np.searchsorted(nonempty, z)
        below, above = nonempty[j - 1], nonempty[j]
        src = below if z - below <= above - z else above
        filled[z] = mask[src]
    return filled


def preprocess_sample(sample: VolumeSample, config: Optional[PreprocessConfig] = None) -> VolumeSample:
    """Full pipeline; HU normalization is applied exactly once, tracked by ``hu_normalized``."""
    config = config or PreprocessConfig()
    if sample.hu_normalized:
        return sample
    out = normalize_voxels(sample, config)
    mask = fill_missing_mask_slices(out.mask)
    ct = normalize_hu(out.ct, config)
    out = out.with_arrays(ct, mask)
    out.hu_normalized = True
    return out
