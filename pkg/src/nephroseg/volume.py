"""Volumetric data model and preprocessing.

Covers resampling onto a uniform grid, HU clipping with per-volume z-score
normalization, patch tiling and blending, and patient-level splits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CoverageError,
    DegenerateError,
    DomainError,
    ModeError,
    SizeError,
    ValidationError,
)
from .nifti import NiftiImage, atomic_write_bytes, image_from_array

LABELS = (0, 1, 2)
BACKGROUND, KIDNEY, LESION = LABELS
CLASS_NAMES = {KIDNEY: "kidney", LESION: "lesion"}

PAPER_SPACING = (1.62, 1.62, 3.22)
CLIP_RANGE = (-79.0, 304.0)
DEFAULT_PATCH = (32, 32, 16)


def _spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise DomainError(f"spacing must be three positive values, got {spacing}")
    return spacing


@dataclass(frozen=True)
class VolumeGrid:
    values: np.ndarray = field(repr=False)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ValidationError(f"volume must be rank 3, got shape {values.shape}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", _spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray = field(repr=False)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValidationError(f"label map must be rank 3, got shape {labels.shape}")
        if labels.dtype.kind == "f":
            if not np.all(labels == np.rint(labels)):
                raise ValidationError("label map holds non-integer values")
        labels = labels.astype(np.uint8) if labels.size == 0 or labels.min() >= 0 else labels
        if labels.size and not np.isin(labels, LABELS).all():
            bad = sorted(set(np.unique(labels).tolist()) - set(LABELS))
            raise ValidationError(f"labels outside {{0, 1, 2}}: {bad}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", _spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class LesionAnnotation:
    side: str  # "right" | "left"
    morphology: str  # "endophytic" | "exophytic"

    def __post_init__(self):
        if self.side not in ("right", "left"):
            raise ValidationError(f"side must be right/left, got {self.side!r}")
        if self.morphology not in ("endophytic", "exophytic"):
            raise ValidationError(f"morphology must be endophytic/exophytic, got {self.morphology!r}")


@dataclass(frozen=True)
class StudyRecord:
    study_id: str
    image: VolumeGrid
    truth: LabelMap
    lesion_annotations: tuple[LesionAnnotation, ...] = ()
    source_id: str | None = None  # set on augmented variants

    def __post_init__(self):
        if self.image.shape != self.truth.shape:
            raise ValidationError(
                f"{self.study_id}: image shape {self.image.shape} != label shape {self.truth.shape}")
        if not np.allclose(self.image.spacing, self.truth.spacing, rtol=0, atol=1e-6):
            raise ValidationError(
                f"{self.study_id}: image spacing {self.image.spacing} != label spacing {self.truth.spacing}")

    @property
    def origin_id(self) -> str:
        return self.source_id or self.study_id


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    folds: tuple[tuple[str, ...], ...] = ()
    seed: int = 0

    def __post_init__(self):
        train, test = set(self.train_ids), set(self.test_ids)
        if train & test:
            raise ValidationError(f"train and test overlap: {sorted(train & test)}")
        if self.folds:
            flat = [i for fold in self.folds for i in fold]
            if len(flat) != len(set(flat)) or set(flat) != train:
                raise ValidationError("folds must partition the training ids")

    def to_json(self) -> dict:
        return {
            "train": list(self.train_ids),
            "test": list(self.test_ids),
            "folds": [list(f) for f in self.folds],
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetSplit":
        try:
            return cls(
                train_ids=tuple(obj["train"]),
                test_ids=tuple(obj["test"]),
                folds=tuple(tuple(f) for f in obj.get("folds", [])),
                seed=int(obj.get("seed", 0)),
            )
        except KeyError as exc:
            raise ValidationError(f"manifest is missing {exc}") from exc


def volume_from_nifti(image: NiftiImage) -> VolumeGrid:
    return VolumeGrid(np.asarray(image.data, dtype=np.float64), image.spacing)


def labels_from_nifti(image: NiftiImage) -> LabelMap:
    return LabelMap(image.data, image.spacing)


def volume_to_nifti(volume: VolumeGrid) -> NiftiImage:
    return image_from_array(volume.values.astype(np.float32), volume.spacing)


def labels_to_nifti(labels: LabelMap) -> NiftiImage:
    return image_from_array(labels.labels.astype(np.uint8), labels.spacing)


# ---------------------------------------------------------------------------
# sampling


def sample_linear(values: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at continuous voxel coordinates.

    ``coords`` has shape ``(3, ...)``.  Samples outside the grid clamp to the
    nearest edge voxel.
    """
    values = np.asarray(values, dtype=np.float64)
    idx = []
    for axis in range(3):
        n = values.shape[axis]
        c = np.clip(coords[axis], 0.0, n - 1)
        lo = np.minimum(np.floor(c).astype(np.intp), max(n - 2, 0))
        hi = np.minimum(lo + 1, n - 1)
        idx.append((lo, hi, c - lo))
    (x0, x1, fx), (y0, y1, fy), (z0, z1, fz) = idx
    out = 0.0
    for xi, wx in ((x0, 1 - fx), (x1, fx)):
        for yi, wy in ((y0, 1 - fy), (y1, fy)):
            for zi, wz in ((z0, 1 - fz), (z1, fz)):
                out = out + values[xi, yi, zi] * (wx * wy * wz)
    return np.asarray(out)


def sample_nearest(values: np.ndarray, coords: np.ndarray) -> np.ndarray:
    idx = tuple(
        np.clip(np.floor(coords[axis] + 0.5).astype(np.intp), 0, values.shape[axis] - 1)
        for axis in range(3)
    )
    return values[idx]


def resampled_shape(shape, spacing, target_spacing) -> tuple[int, int, int]:
    return tuple(
        max(1, int(math.floor(n * s / t + 0.5))) for n, s, t in zip(shape, spacing, target_spacing)
    )


def _source_axes(shape, spacing, target_spacing, out_shape):
    # target voxel centre i sits at (i + 0.5) * t mm from the shared grid edge
    return [
        (np.arange(m) + 0.5) * (t / s) - 0.5
        for m, s, t in zip(out_shape, spacing, target_spacing)
    ]


def resample(volume, target_spacing, mode: str = "trilinear"):
    """Resample a VolumeGrid or LabelMap onto ``target_spacing``.

    Grids share their outer edge; out-of-range samples clamp to the edge
    voxel.  Label maps only accept ``mode="nearest"``.
    """
    target_spacing = _spacing(target_spacing)
    if mode not in ("trilinear", "nearest"):
        raise ModeError(f"unknown resampling mode {mode!r}")
    is_labels = isinstance(volume, LabelMap)
    if is_labels and mode != "nearest":
        raise ModeError("label maps can only be resampled with mode='nearest'")
    data = volume.labels if is_labels else volume.values
    out_shape = resampled_shape(data.shape, volume.spacing, target_spacing)
    if out_shape == data.shape and np.allclose(volume.spacing, target_spacing, rtol=1e-12, atol=0):
        out = data.copy()
    else:
        axes = _source_axes(data.shape, volume.spacing, target_spacing, out_shape)
        coords = np.stack(np.meshgrid(*axes, indexing="ij"))
        out = sample_nearest(data, coords) if mode == "nearest" else sample_linear(data, coords)
    if is_labels:
        return LabelMap(out.astype(data.dtype), target_spacing)
    return VolumeGrid(out, target_spacing)


def clip_and_normalize(volume: VolumeGrid, lo: float = CLIP_RANGE[0], hi: float = CLIP_RANGE[1]):
    """Clamp to ``[lo, hi]`` HU, then z-score with the clipped volume's statistics.

    Returns ``(normalized, mean, sd)``; ``sd`` is the population value.
    """
    if not lo < hi:
        raise DomainError(f"clip bounds must satisfy lo < hi, got ({lo}, {hi})")
    clipped = np.clip(volume.values.astype(np.float64), lo, hi)
    mean = float(clipped.mean())
    sd = float(clipped.std())
    if sd < 1e-8:
        raise DegenerateError("volume is constant after clipping; cannot z-score")
    return VolumeGrid((clipped - mean) / sd, volume.spacing), mean, sd


# ---------------------------------------------------------------------------
# patches


def axis_origins(n: int, p: int, stride: int) -> list[int]:
    origins = list(range(0, n - p + 1, stride))
    if origins[-1] != n - p:
        origins.append(n - p)
    return origins


def patch_origins(shape, patch_shape, stride) -> list[tuple[int, int, int]]:
    patch_shape = tuple(int(p) for p in patch_shape)
    stride = tuple(int(s) for s in stride)
    if any(s < 1 for s in stride):
        raise SizeError(f"stride must be >= 1, got {stride}")
    if any(p < 1 for p in patch_shape):
        raise SizeError(f"patch shape must be >= 1, got {patch_shape}")
    if any(p > n for p, n in zip(patch_shape, shape)):
        raise SizeError(f"patch {patch_shape} larger than volume {tuple(shape)}; pad first")
    per_axis = [axis_origins(n, p, s) for n, p, s in zip(shape, patch_shape, stride)]
    return [(i, j, k) for i in per_axis[0] for j in per_axis[1] for k in per_axis[2]]


def extract_patches(volume: VolumeGrid, patch_shape=DEFAULT_PATCH, stride=None):
    """Tile ``volume`` into ``(origin, patch)`` pairs.

    Origins step by ``stride`` (default: half the patch); the last origin on
    each axis is pulled back so the final patch ends on the boundary.
    """
    if stride is None:
        stride = tuple(max(1, p // 2) for p in patch_shape)
    out = []
    for o in patch_origins(volume.shape, patch_shape, stride):
        sl = tuple(slice(a, a + p) for a, p in zip(o, patch_shape))
        out.append((o, VolumeGrid(volume.values[sl], volume.spacing)))
    return out


def reassemble(patches: Iterable, shape) -> np.ndarray:
    """Average overlapping per-class probability patches into one volume.

    Each patch is ``(origin, probs)`` with ``probs`` shaped ``(px, py, pz, C)``.
    Accumulation runs in sorted origin order, so the result does not depend
    on the order patches arrive in.
    """
    patches = sorted(((tuple(int(v) for v in o), np.asarray(p)) for o, p in patches),
                     key=lambda item: item[0])
    if not patches:
        raise CoverageError("no patches to reassemble")
    shape = tuple(int(s) for s in shape)
    n_classes = patches[0][1].shape[-1]
    total = np.zeros(shape + (n_classes,), dtype=np.float64)
    count = np.zeros(shape, dtype=np.int64)
    for origin, probs in patches:
        if probs.ndim != 4 or probs.shape[-1] != n_classes:
            raise SizeError(f"patch at {origin} has shape {probs.shape}")
        if any(o < 0 or o + p > n for o, p, n in zip(origin, probs.shape[:3], shape)):
            raise SizeError(f"patch at {origin} of shape {probs.shape[:3]} leaves volume {shape}")
        sl = tuple(slice(o, o + p) for o, p in zip(origin, probs.shape[:3]))
        total[sl] += probs
        count[sl] += 1
    if (count == 0).any():
        missing = np.argwhere(count == 0)[0]
        raise CoverageError(f"voxel {tuple(int(v) for v in missing)} is not covered by any patch")
    return total / count[..., None]


# ---------------------------------------------------------------------------
# splits


def split_patients(ids: Sequence[str], test_fraction: float = 0.2, seed: int = 0,
                   k: int = 0) -> DatasetSplit:
    """Random patient-level train/test split, optionally with ``k`` CV folds."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"duplicate study ids: {dupes}")
    if not 0 < test_fraction < 1:
        raise DomainError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n_test = int(math.floor(test_fraction * len(ids) + 0.5))
    order = np.random.default_rng(seed).permutation(len(ids))
    test = [ids[i] for i in sorted(order[:n_test])]
    train = [ids[i] for i in sorted(order[n_test:])]
    folds = make_folds(train, k, seed) if k else []
    return DatasetSplit(tuple(train), tuple(test), tuple(tuple(f) for f in folds), seed)


def make_folds(train_ids: Sequence[str], k: int = 3, seed: int = 0) -> list[list[str]]:
    """Balanced random partition of ``train_ids`` into ``k`` folds."""
    train_ids = list(train_ids)
    if k < 2:
        raise SizeError(f"need at least 2 folds, got {k}")
    if k > len(train_ids):
        raise SizeError(f"cannot make {k} folds from {len(train_ids)} ids")
    order = np.random.default_rng([seed, k]).permutation(len(train_ids))
    return [[train_ids[i] for i in sorted(order[f::k])] for f in range(k)]


def save_manifest(path, split: DatasetSplit) -> None:
    atomic_write_bytes(path, (json.dumps(split.to_json(), indent=2) + "\n").encode())


def load_manifest(path) -> DatasetSplit:
    with open(path) as fh:
        return DatasetSplit.from_json(json.load(fh))
