"""Adaptive sampling and adaptive cropping (ASAC).

Each preprocessed sample is cut into multi-scale cubes sliding along the
patient long axis; every cube is resized to the network input shape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .dataset import DatasetManifest, VolumeSample
from .preprocess import resample_mask, trilinear_resample

DEFAULT_SCALES = ((12, 128), (18, 192), (24, 256), (30, 320), (36, 384))


@dataclass
class AugmentConfig:
    max_translation: float = 10.0  # voxels, in-plane
    max_rotation: float = 10.0  # degrees
    max_shear: float = 5.0  # degrees
    scale_range: tuple[float, float] = (0.9, 1.1)
    max_retries: int = 5

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)


@dataclass
class AsacConfig:
    scales: tuple[tuple[int, int], ...] = DEFAULT_SCALES
    input_shape: tuple[int, int, int] = (12, 128, 128)
    train_shape: tuple[int, int, int] = (12, 96, 96)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    # "asac": multi-scale sliding cubes; "global": one cube covering the whole volume
    mode: str = "asac"
    skip_empty_crops: bool = True

    def __post_init__(self):
        self.scales = tuple((int(n), int(m)) for n, m in self.scales)
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.train_shape = tuple(int(v) for v in self.train_shape)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        self.validate()

    def validate(self) -> None:
        if not self.scales:
            raise ValueError("at least one scale is required")
        if any(n < 1 or m < 1 for n, m in self.scales):
            raise ValueError("scale extents must be positive")
        if any(t > i for t, i in zip(self.train_shape, self.input_shape)):
            raise ValueError("train_shape must fit inside input_shape")
        if self.mode not in ("asac", "global"):
            raise ValueError(f"unknown crop mode {self.mode!r}")

    @property
    def largest_inplane(self) -> int:
        return max(m for _, m in self.scales)

    def select_scales(self, indices: Sequence[int]) -> "AsacConfig":
        from dataclasses import replace
        return replace(self, scales=tuple(self.scales[i] for i in indices))


def desk_asac_config(**overrides) -> AsacConfig:
    """Default scale table shrunk 3/8 in-plane, for CPU-sized phantoms."""
    kw = dict(
        scales=((12, 48), (18, 72), (24, 96), (30, 120), (36, 144)),
        input_shape=(12, 48, 48),
        train_shape=(12, 36, 36),
        augment=AugmentConfig(max_translation=4.0),
    )
    kw.update(overrides)
    return AsacConfig(**kw)


@dataclass(frozen=True)
class CropCubeSpec:
    scale_index: int
    n: int
    m: int
    z_start: int


@dataclass
class ModelInput:
    tensor: np.ndarray  # (2, d, h, w): channel 0 CT, channel 1 mask
    sample_id: str
    spec: Optional[CropCubeSpec]


def mask_bbox(mask: np.ndarray):
    idx = np.nonzero(mask)
    if len(idx[0]) == 0:
        return None
    return tuple((int(i.min()), int(i.max())) for i in idx)


def adaptive_preresize(sample: VolumeSample, largest_inplane: int = 384) -> tuple[VolumeSample, float]:
    """Shrink the whole volume uniformly when the organ's in-plane box exceeds the largest cube."""
    bbox = mask_bbox(sample.mask)
    if bbox is None:
        return sample, 1.0
    extent = max(bbox[1][1] - bbox[1][0] + 1, bbox[2][1] - bbox[2][0] + 1)
    if extent <= largest_inplane:
        return sample, 1.0
    f = largest_inplane / extent
    for _ in range(20):
        new_shape = tuple(max(1, int(math.floor(s * f + 0.5))) for s in sample.shape)
        mask = resample_mask(sample.mask, new_shape)
        b = mask_bbox(mask)
        if max(b[1][1] - b[1][0] + 1, b[2][1] - b[2][0] + 1) <= largest_inplane:
            break
        f *= 0.99
    ct = trilinear_resample(sample.ct, new_shape)
    spacing = tuple(s * (o - 1) / (n - 1) if n > 1 else s for s, o, n in zip(sample.spacing, sample.shape, new_shape))
    return sample.with_arrays(ct, mask, spacing), largest_inplane / extent


def axial_starts(depth: int, n: int) -> list[int]:
    """Start slices for an n-slice cube sliding with step 2n/3; always ends at depth - n."""
    if depth <= n:
        return [0]
    step = max(1, (2 * n) // 3)
    starts = list(range(0, depth - n + 1, step))
    if starts[-1] != depth - n:
        starts.append(depth - n)
    return starts


def enumerate_crops(sample: VolumeSample, scales: Sequence[tuple[int, int]] = DEFAULT_SCALES) -> list[CropCubeSpec]:
    depth = sample.shape[0]
    return [
        CropCubeSpec(k, n, m, z)
        for k, (n, m) in enumerate(scales)
        for z in axial_starts(depth, n)
    ]


def global_crop(sample: VolumeSample) -> CropCubeSpec:
    """A single cube spanning the whole volume (the non-ASAC input)."""
    d, h, w = sample.shape
    return CropCubeSpec(-1, d, max(h, w), 0)


def _window(arr: np.ndarray, z0: int, n: int, y0: int, x0: int, m: int) -> np.ndarray:
    """Zero-padded [z0:z0+n, y0:y0+m, x0:x0+m] window."""
    out = np.zeros((n, m, m), dtype=arr.dtype)
    d, h, w = arr.shape
    src = []
    dst = []
    for start, size, limit in ((z0, n, d), (y0, m, h), (x0, m, w)):
        lo, hi = max(start, 0), min(start + size, limit)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - start, hi - start))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def inplane_centroid(mask: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(mask.any(axis=0))
    if len(ys) == 0:
        return (mask.shape[1] - 1) / 2.0, (mask.shape[2] - 1) / 2.0
    w = mask.sum(axis=0)[ys, xs].astype(float)
    return float(np.average(ys, weights=w)), float(np.average(xs, weights=w))


def extract_and_resize(
    sample: VolumeSample, spec: CropCubeSpec, input_shape=(12, 128, 128), sample_id: str = "",
) -> ModelInput:
    d = sample.shape[0]
    if spec.scale_index < 0:
        # global cube: whole volume, centred in-plane
        cy, cx = (sample.shape[1] - 1) / 2.0, (sample.shape[2] - 1) / 2.0
    else:
        cy, cx = inplane_centroid(sample.mask)
    n, m = spec.n, spec.m
    z0 = spec.z_start
    if d < n:
        # symmetric zero padding along z
        z0 = -((n - d) // 2)
    y0 = int(math.floor(cy + 0.5)) - m // 2
    x0 = int(math.floor(cx + 0.5)) - m // 2
    if spec.scale_index < 0:
        y0 = -((m - sample.shape[1]) // 2)
        x0 = -((m - sample.shape[2]) // 2)

    ct = _window(sample.ct, z0, n, y0, x0, m)
    mask = _window(sample.mask, z0, n, y0, x0, m)
    ct = trilinear_resample(ct, input_shape).astype(np.float32)
    mask_r = trilinear_resample(mask.astype(np.float64), input_shape)
    mask_r = (mask_r >= 0.5).astype(np.float32)
    return ModelInput(np.stack([ct, mask_r]), sample_id, spec)


def model_inputs(
    sample: VolumeSample, config: AsacConfig, sample_id: str = "",
) -> list[ModelInput]:
    """Every input the network sees for one preprocessed sample at inference time."""
    if config.mode == "global":
        return [extract_and_resize(sample, global_crop(sample), config.input_shape, sample_id)]
    sample, _ = adaptive_preresize(sample, config.largest_inplane)
    inputs = [
        extract_and_resize(sample, spec, config.input_shape, sample_id)
        for spec in enumerate_crops(sample, config.scales)
    ]
    if config.skip_empty_crops:
        kept = [x for x in inputs if x.tensor[1].any()]
        if kept:
            return kept
    return inputs


# ---------------------------------------------------------------------------
# Training-time augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineParams:
    translation: tuple[float, float] = (0.0, 0.0)  # (y, x) voxels
    rotation: float = 0.0  # degrees
    shear: float = 0.0  # degrees
    scale: float = 1.0

    @property
    def is_identity(self) -> bool:
        return self == AffineParams()


def sample_affine(rng: np.random.Generator, cfg: AugmentConfig) -> AffineParams:
    t = cfg.max_translation
    return AffineParams(
        translation=(float(rng.uniform(-t, t)), float(rng.uniform(-t, t))),
        rotation=float(rng.uniform(-cfg.max_rotation, cfg.max_rotation)),
        shear=float(rng.uniform(-cfg.max_shear, cfg.max_shear)),
        scale=float(rng.uniform(*cfg.scale_range)),
    )


def _inplane_matrix(p: AffineParams) -> np.ndarray:
    th, sh = np.deg2rad(p.rotation), np.deg2rad(p.shear)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    shear = np.array([[1.0, np.tan(sh)], [0.0, 1.0]])
    return p.scale * rot @ shear


def apply_inplane_affine(tensor: np.ndarray, p: AffineParams) -> np.ndarray:
    """Apply the same in-plane affine to both channels; mask re-binarized at 0.5."""
    if p.is_identity:
        return tensor.copy()
    _, d, h, w = tensor.shape
    a = _inplane_matrix(p)
    inv = np.linalg.inv(a)
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    t = np.array(p.translation)
    # output(q) = input(inv @ (q - c - t) + c)
    matrix = np.eye(3)
    matrix[1:, 1:] = inv
    offset = np.zeros(3)
    offset[1:] = c - inv @ (c + t)
    ct = ndimage.affine_transform(tensor[0].astype(np.float64), matrix, offset, order=1, mode="constant", cval=0.0)
    mask = ndimage.affine_transform(tensor[1].astype(np.float64), matrix, offset, order=1, mode="constant", cval=0.0)
    return np.stack([ct, (mask >= 0.5).astype(np.float64)]).astype(np.float32)


def center_crop(tensor: np.ndarray, shape) -> np.ndarray:
    starts = [(s - t) // 2 for s, t in zip(tensor.shape[1:], shape)]
    sl = tuple(slice(st, st + t) for st, t in zip(starts, shape))
    return tensor[(slice(None),) + sl]


def augment(inp: ModelInput, seed, cfg: Optional[AugmentConfig] = None, train_shape=(12, 96, 96)) -> ModelInput:
    """Random in-plane affine on both channels, then the central ``train_shape`` cube."""
    cfg = cfg or AugmentConfig()
    rng = np.random.default_rng(seed)
    out = None
    for _ in range(cfg.max_retries):
        cand = center_crop(apply_inplane_affine(inp.tensor, sample_affine(rng, cfg)), train_shape)
        if cand[1].any() or not inp.tensor[1].any():
            out = cand
            break
    if out is None:
        out = center_crop(inp.tensor, train_shape)
    return ModelInput(np.ascontiguousarray(out, dtype=np.float32), inp.sample_id, inp.spec)


def balanced_sampling_weights(manifest: DatasetManifest, split: Optional[str] = "train") -> np.ndarray:
    """Per-entry weight 1/count(class) over the chosen split (in split order)."""
    entries = manifest.entries if split is None else manifest.subset(split)
    if not entries:
        raise ValueError("no entries to weight")
    labels = np.array([e.true_class for e in entries])
    counts = np.bincount(labels, minlength=len(manifest.vocabulary))
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        names = [manifest.vocabulary[i] for i in empty]
        raise ValueError(f"classes with no entries: {names}")
    return 1.0 / counts[labels]
