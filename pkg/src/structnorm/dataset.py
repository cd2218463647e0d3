"""Sample persistence, manifests, label vocabulary and the phantom generator.

A sample lives in its own directory::

    meta.json   shape, spacing, original_label, true_class, hu_normalized, format_version
    ct.f32      C-order little-endian float32 payload
    mask.u8     C-order uint8 payload
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")

# Head-and-neck OAR list, TG-263 style names.
HEAD_NECK_OARS = (
    "Lens_L", "Lens_R", "Eye_L", "Eye_R",
    "GlnD_Lacrimal_L", "GlnD_Lacrimal_R", "Parotid_L", "Parotid_R",
    "GlnD_Submand_L", "GlnD_Submand_R", "Cavity_Oral", "Lips",
    "Bone_Mandible", "Cochlea_L", "Cochlea_R", "Musc_Constrict",
    "Larynx", "Esophagus", "BrachialPlex_L", "BrachialPlex_R",
    "Thyroid", "Brain", "Brainstem", "Pituitary",
    "OpticChiasm", "OpticNrv_L", "OpticNrv_R", "SpinalCord",
)


class SampleFormatError(ValueError):
    """Raised when a sample or manifest violates the on-disk contract."""


@dataclass(frozen=True)
class LabelVocabulary:
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(set(names)) != len(names):
            raise ValueError("vocabulary names must be unique")
        if not names:
            raise ValueError("vocabulary must not be empty")

    @classmethod
    def default(cls) -> "LabelVocabulary":
        return cls(HEAD_NECK_OARS)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"{name!r} not in vocabulary") from None

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, i: int) -> str:
        return self.names[i]


@dataclass
class VolumeSample:
    """A (CT, mask) pair in (z, y, x) order with spacing in mm."""

    ct: np.ndarray
    mask: np.ndarray
    spacing: tuple[float, float, float]
    original_label: str = ""
    true_class: Optional[int] = None
    hu_normalized: bool = False

    def __post_init__(self):
        self.ct = np.asarray(self.ct, dtype=np.float32)
        mask = np.asarray(self.mask)
        if mask.size and not np.isin(mask, (0, 1)).all():
            raise SampleFormatError("mask values must be 0 or 1")
        self.mask = mask.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.validate()

    def validate(self) -> None:
        if self.ct.ndim != 3:
            raise SampleFormatError(f"ct must be 3-D, got shape {self.ct.shape}")
        if self.ct.shape != self.mask.shape:
            raise SampleFormatError(f"ct {self.ct.shape} and mask {self.mask.shape} differ")
        if len(self.spacing) != 3 or not all(s > 0 for s in self.spacing):
            raise SampleFormatError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.ct.shape)

    def with_arrays(self, ct, mask, spacing=None) -> "VolumeSample":
        return replace(self, ct=ct, mask=mask, spacing=self.spacing if spacing is None else spacing)


def write_sample(sample: VolumeSample, dir_path) -> None:
    # validate everything before touching the filesystem
    if not np.isin(sample.mask, (0, 1)).all():
        raise SampleFormatError("mask values must be 0 or 1")
    sample.validate()
    ct = np.ascontiguousarray(sample.ct, dtype="<f4")
    mask = np.ascontiguousarray(sample.mask, dtype=np.uint8)

    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "shape": list(sample.shape),
        "spacing": list(sample.spacing),
        "original_label": sample.original_label,
        "true_class": sample.true_class,
        "hu_normalized": bool(sample.hu_normalized),
    }
    (d / "ct.f32").write_bytes(ct.tobytes(order="C"))
    (d / "mask.u8").write_bytes(mask.tobytes(order="C"))
    (d / "meta.json").write_text(json.dumps(meta, indent=2))


def read_sample(dir_path) -> VolumeSample:
    d = Path(dir_path)
    for name in ("meta.json", "ct.f32", "mask.u8"):
        if not (d / name).is_file():
            raise SampleFormatError(f"missing {name} in {d}")
    meta = json.loads((d / "meta.json").read_text())
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise SampleFormatError(f"unknown format version {version!r}")
    shape = tuple(int(s) for s in meta["shape"])
    n = int(np.prod(shape))

    ct_bytes = (d / "ct.f32").read_bytes()
    mask_bytes = (d / "mask.u8").read_bytes()
    if len(ct_bytes) != 4 * n:
        raise SampleFormatError(f"ct.f32 holds {len(ct_bytes)} bytes, expected {4 * n}")
    if len(mask_bytes) != n:
        raise SampleFormatError(f"mask.u8 holds {len(mask_bytes)} bytes, expected {n}")

    ct = np.frombuffer(ct_bytes, dtype="<f4").reshape(shape).astype(np.float32)
    mask = np.frombuffer(mask_bytes, dtype=np.uint8).reshape(shape).copy()
    tc = meta.get("true_class")
    return VolumeSample(
        ct=ct,
        mask=mask,
        spacing=tuple(meta["spacing"]),
        original_label=meta.get("original_label", ""),
        true_class=None if tc is None else int(tc),
        hu_normalized=bool(meta.get("hu_normalized", False)),
    )


@dataclass
class ManifestEntry:
    path: str
    true_class: int
    split: str = "train"


@dataclass
class DatasetManifest:
    vocabulary: LabelVocabulary
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Optional[Path] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise SampleFormatError("manifest paths must be unique")
        k = len(self.vocabulary)
        for e in self.entries:
            if not 0 <= e.true_class < k:
                raise SampleFormatError(f"class {e.true_class} of {e.path} outside vocabulary")
            if e.split not in SPLITS:
                raise SampleFormatError(f"unknown split tag {e.split!r}")

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def load(self, entry: ManifestEntry) -> VolumeSample:
        return read_sample(self.resolve(entry))

    def subset(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def class_counts(self, split: Optional[str] = None) -> np.ndarray:
        entries = self.entries if split is None else self.subset(split)
        return np.bincount([e.true_class for e in entries], minlength=len(self.vocabulary))

    def to_json(self) -> dict:
        return {
            "vocabulary": list(self.vocabulary.names),
            "entries": [{"path": e.path, "class": e.true_class, "split": e.split} for e in self.entries],
        }

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load_file(cls, path) -> "DatasetManifest":
        path = Path(path)
        raw = json.loads(path.read_text())
        entries = [ManifestEntry(e["path"], int(e["class"]), e.get("split", "train")) for e in raw["entries"]]
        return cls(LabelVocabulary(tuple(raw["vocabulary"])), entries, root=path.parent)


def _round_quotas(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of n items; each quota within 1 of exact."""
    total = float(sum(ratios))
    exact = [n * r / total for r in ratios]
    quotas = [int(np.floor(x)) for x in exact]
    remainders = [x - q for x, q in zip(exact, quotas)]
    # ties go to the earlier split
    order = sorted(range(len(ratios)), key=lambda i: (-remainders[i], i))
    for i in order[: n - sum(quotas)]:
        quotas[i] += 1
    return quotas


def split_manifest(manifest: DatasetManifest, ratios=(3, 1, 1), seed: int = 0) -> DatasetManifest:
    """Stratified train/val/test split. Classes with fewer than 3 samples go to train."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("ratios must be three positive numbers")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, e in enumerate(manifest.entries):
        by_class.setdefault(e.true_class, []).append(i)

    tags = [""] * len(manifest.entries)
    for cls in sorted(by_class):
        idx = by_class[cls]
        if len(idx) < 3:
            warnings.warn(
                f"class {manifest.vocabulary[cls]!r} has {len(idx)} samples; placing all in train",
                stacklevel=2,
            )
            for i in idx:
                tags[i] = "train"
            continue
        perm = [idx[j] for j in rng.permutation(len(idx))]
        quotas = _round_quotas(len(idx), ratios)
        start = 0
        for split, q in zip(SPLITS, quotas):
            for i in perm[start:start + q]:
                tags[i] = split
            start += q

    entries = [ManifestEntry(e.path, e.true_class, t) for e, t in zip(manifest.entries, tags)]
    return DatasetManifest(manifest.vocabulary, entries, root=manifest.root)


# ---------------------------------------------------------------------------
# Phantom generator
# ---------------------------------------------------------------------------

SHAPES = ("ellipsoid", "tube", "box", "shell", "cone")


@dataclass
class PhantomClass:
    """One organ template.

    center is fractional in (z, y, x) relative to ``grid_shape - 1``; radii are
    in voxels. A class with ``mirror_of`` copies that class's geometry reflected
    across the mid-sagittal plane (x -> W - 1 - x).
    """

    name: str
    shape: str = "ellipsoid"
    center: tuple[float, float, float] = (0.5, 0.5, 0.5)
    radii: tuple[float, float, float] = (3.0, 3.0, 3.0)
    hu: float = 40.0
    mirror_of: Optional[str] = None


@dataclass
class PhantomConfig:
    classes: list[PhantomClass]
    per_class_counts: list[int]
    grid_shape: tuple[int, int, int] = (24, 96, 96)
    spacing: tuple[float, float, float] = (0.77, 1.0, 1.0)
    jitter: float = 1.0  # max center displacement per axis, voxels
    delineation_noise: float = 0.0
    size_jitter: float = 0.1
    hu_noise: float = 20.0
    render_all_organs: bool = True

    def __post_init__(self):
        self.classes = [c if isinstance(c, PhantomClass) else PhantomClass(**c) for c in self.classes]
        self.grid_shape = tuple(int(g) for g in self.grid_shape)
        self.spacing = tuple(float(s) for s in self.spacing)

    def validate(self) -> None:
        if len(self.classes) < 2:
            raise ValueError("phantom needs at least 2 classes")
        if len(self.per_class_counts) != len(self.classes):
            raise ValueError("per_class_counts must match classes")
        if any(c < 1 for c in self.per_class_counts):
            raise ValueError("every class needs at least one sample")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValueError("phantom class names must be unique")
        for c in self.classes:
            if c.shape not in SHAPES:
                raise ValueError(f"unknown organ shape {c.shape!r}")
            if c.mirror_of is not None and c.mirror_of not in names:
                raise ValueError(f"{c.name} mirrors unknown class {c.mirror_of}")
        for c in self.resolved_classes():
            _check_fits(c, self.grid_shape, self.jitter, self.size_jitter)

    def resolved_classes(self) -> list[PhantomClass]:
        by_name = {c.name: c for c in self.classes}
        out = []
        for c in self.classes:
            if c.mirror_of is not None:
                src = by_name[c.mirror_of]
                cz, cy, cx = src.center
                c = replace(src, name=c.name, center=(cz, cy, 1.0 - cx), mirror_of=None)
            out.append(c)
        return out

    def to_json(self) -> dict:
        from dataclasses import asdict
        return asdict(self)


def default_phantom_config(counts: Optional[Sequence[int]] = None, **overrides) -> PhantomConfig:
    """Eight-class head-and-neck-like phantom.

    Parotid_L/R are mirrored; OpticChiasm/Pituitary are the confusable small pair
    (same HU as soft tissue; B is slightly elongated in x and offset by one voxel in y).
    """
    classes = [
        PhantomClass("Brain", "ellipsoid", (0.5, 0.32, 0.5), (7.0, 18.0, 24.0), 30.0),
        PhantomClass("SpinalCord", "tube", (0.5, 0.78, 0.5), (9.0, 4.0, 4.0), 60.0),
        PhantomClass("Parotid_L", "ellipsoid", (0.5, 0.55, 0.27), (5.0, 8.0, 5.0), 50.0),
        PhantomClass("Parotid_R", mirror_of="Parotid_L"),
        PhantomClass("Bone_Mandible", "shell", (0.5, 0.62, 0.5), (4.0, 10.0, 18.0), 900.0),
        PhantomClass("Esophagus", "tube", (0.5, 0.68, 0.5), (8.0, 3.0, 4.5), 20.0),
        PhantomClass("OpticChiasm", "ellipsoid", (0.5, 0.47, 0.5), (1.5, 1.5, 1.5), 40.0),
        PhantomClass("Pituitary", "ellipsoid", (0.5, 0.478, 0.5), (1.5, 1.5, 2.2), 40.0),
    ]
    if counts is None:
        counts = [60, 60, 60, 60, 60, 60, 16, 16]
    overrides.setdefault("grid_shape", (24, 128, 128))
    return PhantomConfig(classes=classes, per_class_counts=list(counts), **overrides)


def transfer_phantom_config(counts: Optional[Sequence[int]] = None, **overrides) -> PhantomConfig:
    """Four organ shapes absent from the default phantom, for fine-tuning."""
    classes = [
        PhantomClass("Thyroid", "shell", (0.5, 0.6, 0.5), (5.0, 5.0, 9.0), 80.0),
        PhantomClass("Larynx", "box", (0.5, 0.58, 0.5), (6.0, 4.0, 4.0), 10.0),
        PhantomClass("Cavity_Oral", "cone", (0.5, 0.5, 0.5), (8.0, 8.0, 8.0), 0.0),
        PhantomClass("Eye_L", "ellipsoid", (0.5, 0.25, 0.3), (3.0, 4.0, 4.0), 15.0),
    ]
    if counts is None:
        counts = [5, 5, 5, 5]
    return PhantomConfig(classes=classes, per_class_counts=list(counts), **overrides)


def _center_voxels(c: PhantomClass, grid_shape) -> np.ndarray:
    return np.array(c.center, dtype=float) * (np.array(grid_shape, dtype=float) - 1.0)


def _check_fits(c: PhantomClass, grid_shape, jitter, size_jitter) -> None:
    center = _center_voxels(c, grid_shape)
    reach = np.array(c.radii, dtype=float) * (1.0 + size_jitter) + jitter
    lo, hi = center - reach, center + reach
    if (lo < 0).any() or (hi > np.array(grid_shape) - 1).any():
        raise ValueError(f"organ {c.name} does not fit grid {tuple(grid_shape)}")


def _organ_field(shape: str, coords, center, radii) -> np.ndarray:
    """Boolean occupancy of an organ template at voxel-center coordinates."""
    dz, dy, dx = ((coords[i] - center[i]) / radii[i] for i in range(3))
    if shape == "ellipsoid":
        return dz ** 2 + dy ** 2 + dx ** 2 <= 1.0
    if shape == "tube":
        return (dy ** 2 + dx ** 2 <= 1.0) & (np.abs(dz) <= 1.0)
    if shape == "box":
        return (np.abs(dz) <= 1.0) & (np.abs(dy) <= 1.0) & (np.abs(dx) <= 1.0)
    if shape == "shell":
        r2 = dz ** 2 + dy ** 2 + dx ** 2
        return (r2 <= 1.0) & (r2 >= 0.45)
    if shape == "cone":
        taper = 1.0 - (dz + 1.0) / 2.0
        return (np.abs(dz) <= 1.0) & (dy ** 2 + dx ** 2 <= np.maximum(taper, 0.15) ** 2)
    raise ValueError(shape)


def _body_ct(grid_shape, coords) -> np.ndarray:
    _, H, W = grid_shape
    _, y, x = coords
    ct = np.full(grid_shape, -1000.0)
    body = ((y - 0.5 * (H - 1)) / (0.42 * H)) ** 2 + ((x - 0.5 * (W - 1)) / (0.42 * W)) ** 2 <= 1.0
    ct[np.broadcast_to(body, grid_shape)] = 40.0
    spine = ((y - 0.82 * (H - 1)) / (0.07 * W)) ** 2 + ((x - 0.5 * (W - 1)) / (0.07 * W)) ** 2 <= 1.0
    spine = np.broadcast_to(spine, grid_shape)
    ct[spine] = 700.0
    return ct


def render_phantom_sample(
    config: PhantomConfig, class_index: int, rng: np.random.Generator,
    delineation_noise: Optional[float] = None,
) -> VolumeSample:
    """Render one patient; the CT holds every organ, the mask only ``class_index``."""
    noise = config.delineation_noise if delineation_noise is None else delineation_noise
    classes = config.resolved_classes()
    shape = config.grid_shape
    coords = np.ogrid[: shape[0], : shape[1], : shape[2]]
    coords = [c.astype(float) for c in coords]

    ct = _body_ct(shape, coords)
    patient_shift = rng.uniform(-config.jitter, config.jitter, size=3)
    target_geom = None
    for k, c in enumerate(classes):
        # per-organ residual jitter keeps mirrored classes individually displaced
        center = _center_voxels(c, shape) + patient_shift * 0.5 + rng.uniform(-0.5, 0.5, 3) * config.jitter
        radii = np.array(c.radii, dtype=float) * (1.0 + rng.uniform(-config.size_jitter, config.size_jitter))
        occ = _organ_field(c.shape, coords, center, radii)
        if config.render_all_organs or k == class_index:
            ct[occ] = c.hu
        if k == class_index:
            target_geom = (c, center, radii, occ)

    c, center, radii, occ = target_geom
    if noise > 0:
        # poor delineation: perturbed contour, boundary flips, dropped slices
        d_radii = radii * np.clip(1.0 + noise * rng.normal(0.0, 0.25, 3), 0.5, 1.8)
        d_center = center + noise * rng.normal(0.0, 0.35, 3) * radii
        occ = _organ_field(c.shape, coords, d_center, d_radii)
        band = _organ_field(c.shape, coords, d_center, d_radii * 1.25) & ~_organ_field(
            c.shape, coords, d_center, d_radii * 0.75)
        flips = band & (rng.random(shape) < 0.35 * noise)
        occ = occ ^ flips
        zs = np.flatnonzero(occ.any(axis=(1, 2)))
        if len(zs) > 2 and rng.random() < noise:
            drop = rng.integers(zs[0] + 1, zs[-1])
            occ[drop] = False
    mask = occ.astype(np.uint8)
    if not mask.any():
        mask[tuple(np.clip(np.round(center).astype(int), 0, np.array(shape) - 1))] = 1

    ct = ct + rng.normal(0.0, config.hu_noise, size=shape)
    return VolumeSample(
        ct=ct.astype(np.float32), mask=mask, spacing=config.spacing,
        original_label=_messy_label(c.name, rng), true_class=class_index,
    )


_LABEL_STYLES = (
    lambda s: s,
    lambda s: s.upper(),
    lambda s: s.lower(),
    lambda s: s.replace("_", " "),
    lambda s: s.replace("_L", " left").replace("_R", " right"),
    lambda s: s + "_1",
)


def _messy_label(name: str, rng: np.random.Generator) -> str:
    """Free-text label in one of a few clinician styles."""
    return _LABEL_STYLES[int(rng.integers(len(_LABEL_STYLES)))](name)


def sample_seed(seed: int, class_index: int, sample_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, class_index, sample_index]))


def generate_phantom_dataset(
    config: PhantomConfig, seed: int, out_dir, ratios=(3, 1, 1),
) -> DatasetManifest:
    """Render every sample to ``out_dir/samples`` and write ``out_dir/manifest.json``."""
    config.validate()
    out_dir = Path(out_dir)
    vocab = LabelVocabulary(tuple(c.name for c in config.classes))
    entries = []
    for k, (cls, count) in enumerate(zip(config.classes, config.per_class_counts)):
        for i in range(count):
            sample = render_phantom_sample(config, k, sample_seed(seed, k, i))
            rel = f"samples/{cls.name}_{i:04d}"
            write_sample(sample, out_dir / rel)
            entries.append(ManifestEntry(rel, k, "train"))
    manifest = DatasetManifest(vocab, entries, root=out_dir)
    if ratios is not None:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            manifest = split_manifest(manifest, ratios, seed)
    manifest.save(out_dir / "manifest.json")
    logger.info("wrote %d phantom samples to %s", len(entries), out_dir)
    return manifest
