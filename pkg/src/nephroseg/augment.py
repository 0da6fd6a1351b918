"""Spatial and intensity augmentation for image/label pairs.

Eight transforms: scale, rotation about the slice axis, elastic warp,
mirroring, brightness, contrast, gamma and additive Gaussian noise.
Spatial transforms are composed into a single backward coordinate map, so
each augmented variant is interpolated exactly once.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DegenerateError, DomainError, ValidationError
from .volume import LabelMap, StudyRecord, VolumeGrid, sample_linear, sample_nearest

SPATIAL = ("scale", "rotate", "elastic", "mirror")
INTENSITY = ("brightness", "contrast", "gamma", "noise")
TRANSFORMS = SPATIAL + INTENSITY


# -- transform descriptors ---------------------------------------------------

@dataclass(frozen=True)
class Scale:
    factor: float


@dataclass(frozen=True)
class Rotate:
    degrees: float


@dataclass(frozen=True)
class Elastic:
    field: np.ndarray  # (3, nx, ny, nz) displacement in voxels


@dataclass(frozen=True)
class Mirror:
    axis: int


@dataclass(frozen=True)
class Brightness:
    factor: float


@dataclass(frozen=True)
class Contrast:
    factor: float


@dataclass(frozen=True)
class Gamma:
    exponent: float


@dataclass(frozen=True)
class GaussianNoise:
    sd: float
    seed: int = 0


def _interval(value, name):
    lo, hi = (float(v) for v in value)
    if lo > hi:
        raise ValidationError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
    return (lo, hi)


@dataclass
class AugmentationSpec:
    scale_range: tuple[float, float] = (0.85, 1.25)
    rotation_range_deg: tuple[float, float] = (-15.0, 15.0)
    elastic_alpha: float = 2.0
    elastic_sigma: float = 3.0
    mirror_axes: tuple[int, ...] = (0, 1, 2)
    brightness_range: tuple[float, float] = (0.7, 1.3)
    contrast_range: tuple[float, float] = (0.75, 1.25)
    gamma_range: tuple[float, float] = (0.7, 1.5)
    noise_sd_range: tuple[float, float] = (0.0, 0.05)
    cycles: int = 2
    enabled: dict = field(default_factory=lambda: {name: True for name in TRANSFORMS})
    probability: dict = field(default_factory=lambda: {name: 0.5 for name in TRANSFORMS})

    def __post_init__(self):
        for name in ("scale_range", "rotation_range_deg", "brightness_range",
                     "contrast_range", "gamma_range", "noise_sd_range"):
            setattr(self, name, _interval(getattr(self, name), name))
        if self.scale_range[0] <= 0:
            raise ValidationError("scale_range must be positive")
        if self.contrast_range[0] <= 0 or self.gamma_range[0] <= 0:
            raise ValidationError("contrast and gamma ranges must be positive")
        if self.noise_sd_range[0] < 0:
            raise ValidationError("noise_sd_range must be nonnegative")
        if self.elastic_alpha < 0 or self.elastic_sigma <= 0:
            raise ValidationError("elastic alpha must be >= 0 and sigma > 0")
        if int(self.cycles) != self.cycles or self.cycles < 0:
            raise ValidationError(f"cycles must be a nonnegative integer, got {self.cycles}")
        self.cycles = int(self.cycles)
        self.mirror_axes = tuple(int(a) for a in self.mirror_axes)
        if any(a not in (0, 1, 2) for a in self.mirror_axes):
            raise ValidationError(f"mirror axes must be in 0..2, got {self.mirror_axes}")
        enabled = {name: True for name in TRANSFORMS}
        enabled.update(self.enabled)
        probability = {name: 0.5 for name in TRANSFORMS}
        probability.update(self.probability)
        unknown = (set(enabled) | set(probability)) - set(TRANSFORMS)
        if unknown:
            raise ValidationError(f"unknown transforms: {sorted(unknown)}")
        for name, p in probability.items():
            if not 0 <= p <= 1:
                raise ValidationError(f"probability for {name} must be in [0, 1], got {p}")
        self.enabled = {k: bool(enabled[k]) for k in TRANSFORMS}
        self.probability = {k: float(probability[k]) for k in TRANSFORMS}

    def to_json(self) -> dict:
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "AugmentationSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown augmentation keys: {sorted(unknown)}")
        return cls(**obj)


# -- spatial -----------------------------------------------------------------

def _centre(shape):
    return np.array([(n - 1) / 2.0 for n in shape]).reshape(3, *([1] * len(shape)))


def _backward_map(transform, coords, shape, spacing):
    """Map output-grid coordinates to the input coordinates they sample."""
    if isinstance(transform, Scale):
        if not transform.factor > 0:
            raise DomainError(f"scale factor must be positive, got {transform.factor}")
        c = _centre(shape)
        return c + (coords - c) / transform.factor
    if isinstance(transform, Rotate):
        theta = math.radians(transform.degrees)
        cos, sin = math.cos(theta), math.sin(theta)
        c = _centre(shape)
        # rotate in millimetres so anisotropic in-plane spacing stays correct
        dx = (coords[0] - c[0]) * spacing[0]
        dy = (coords[1] - c[1]) * spacing[1]
        sx = cos * dx + sin * dy
        sy = -sin * dx + cos * dy
        return np.stack([c[0] + sx / spacing[0], c[1] + sy / spacing[1], coords[2]])
    if isinstance(transform, Elastic):
        disp = np.asarray(transform.field)
        if disp.shape != (3, *shape):
            raise ValidationError(f"elastic field shape {disp.shape} != (3, *{shape})")
        idx = tuple(np.clip(np.rint(coords[a]).astype(np.intp), 0, shape[a] - 1) for a in range(3))
        if np.allclose(coords, np.stack(idx)):
            return coords + disp[(slice(None),) + idx]
        return coords + np.stack([sample_linear(disp[a], coords) for a in range(3)])
    if isinstance(transform, Mirror):
        if transform.axis not in (0, 1, 2):
            raise DomainError(f"mirror axis must be 0, 1 or 2, got {transform.axis}")
        out = coords.copy()
        out[transform.axis] = shape[transform.axis] - 1 - coords[transform.axis]
        return out
    raise TypeError(f"not a spatial transform: {transform!r}")


def apply_spatial(image: VolumeGrid, labels: LabelMap, transform) -> tuple[VolumeGrid, LabelMap]:
    """Apply one spatial transform (or a sequence, applied in order) to a pair.

    The image is sampled trilinearly and the labels by nearest neighbour,
    both through the same coordinate map; the output keeps the input grid.
    """
    if image.shape != labels.shape:
        raise ValidationError(f"image {image.shape} and labels {labels.shape} differ in shape")
    transforms = list(transform) if isinstance(transform, (list, tuple)) else [transform]
    if not transforms:
        return image, labels
    shape = image.shape
    coords = np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij"))
    for t in reversed(transforms):
        coords = _backward_map(t, coords, shape, image.spacing)
    return (
        VolumeGrid(sample_linear(image.values, coords), image.spacing),
        LabelMap(sample_nearest(labels.labels, coords), labels.spacing),
    )


def elastic_field(shape, alpha: float, sigma: float, seed: int = 0) -> np.ndarray:
    """Smooth random displacement field with max component magnitude ``alpha``."""
    if alpha < 0:
        raise DomainError(f"alpha must be >= 0, got {alpha}")
    if not sigma > 0:
        raise DomainError(f"sigma must be > 0, got {sigma}")
    shape = tuple(int(n) for n in shape)
    if alpha == 0:
        return np.zeros((3, *shape))
    rng = np.random.default_rng(seed)
    raw = rng.uniform(-1.0, 1.0, size=(3, *shape))
    smooth = np.stack([gaussian_filter(raw[a], sigma, mode="reflect") for a in range(3)])
    peak = np.abs(smooth).max()
    if peak == 0:
        return np.zeros_like(smooth)
    return smooth * (alpha / peak)


# -- intensity ---------------------------------------------------------------

def apply_intensity(image: VolumeGrid, transform) -> VolumeGrid:
    v = image.values.astype(np.float64)
    if isinstance(transform, Brightness):
        out = transform.factor * v
    elif isinstance(transform, Contrast):
        if not transform.factor > 0:
            raise DomainError(f"contrast factor must be positive, got {transform.factor}")
        mean = v.mean()
        out = mean + transform.factor * (v - mean)
    elif isinstance(transform, Gamma):
        if not transform.exponent > 0:
            raise DomainError(f"gamma must be positive, got {transform.exponent}")
        lo = v.min()
        span = v.max() - lo
        if span <= 0:
            raise DegenerateError("gamma needs a nonzero intensity range")
        out = lo + span * ((v - lo) / span) ** transform.exponent
    elif isinstance(transform, GaussianNoise):
        if transform.sd < 0:
            raise DomainError(f"noise sd must be >= 0, got {transform.sd}")
        if transform.sd == 0:
            out = v.copy()
        else:
            out = v + np.random.default_rng(transform.seed).normal(0.0, transform.sd, v.shape)
    else:
        raise TypeError(f"not an intensity transform: {transform!r}")
    return VolumeGrid(out, image.spacing)


# -- pipeline ----------------------------------------------------------------

def variant_seed(seed: int, study_id: str, cycle: int) -> list[int]:
    return [int(seed), zlib.crc32(study_id.encode("utf-8")), int(cycle)]


def draw_transforms(spec: AugmentationSpec, shape, rng: np.random.Generator):
    """Draw one cycle's spatial and intensity transforms from ``spec``."""

    def fires(name):
        # always consume the draw so enabling one transform never shifts another
        roll = rng.random()
        return spec.enabled[name] and roll < spec.probability[name]

    spatial, intensity = [], []
    if fires("scale"):
        spatial.append(Scale(float(rng.uniform(*spec.scale_range))))
    if fires("rotate"):
        spatial.append(Rotate(float(rng.uniform(*spec.rotation_range_deg))))
    if fires("elastic"):
        spatial.append(Elastic(elastic_field(shape, spec.elastic_alpha, spec.elastic_sigma,
                                             int(rng.integers(2**31)))))
    if fires("mirror"):
        for axis in spec.mirror_axes:
            if rng.random() < 0.5:
                spatial.append(Mirror(axis))
    if fires("brightness"):
        intensity.append(Brightness(float(rng.uniform(*spec.brightness_range))))
    if fires("contrast"):
        intensity.append(Contrast(float(rng.uniform(*spec.contrast_range))))
    if fires("gamma"):
        intensity.append(Gamma(float(rng.uniform(*spec.gamma_range))))
    if fires("noise"):
        intensity.append(GaussianNoise(float(rng.uniform(*spec.noise_sd_range)),
                                       int(rng.integers(2**31))))
    return spatial, intensity


def augment_record(record: StudyRecord, spec: AugmentationSpec, seed: int, cycle: int) -> StudyRecord:
    rng = np.random.default_rng(variant_seed(seed, record.study_id, cycle))
    spatial, intensity = draw_transforms(spec, record.image.shape, rng)
    image, labels = apply_spatial(record.image, record.truth, spatial)
    for t in intensity:
        try:
            image = apply_intensity(image, t)
        except DegenerateError:
            continue  # flat patch after warping; gamma is undefined there
    return StudyRecord(
        study_id=f"{record.study_id}_aug{cycle}",
        image=image,
        truth=labels,
        lesion_annotations=record.lesion_annotations,
        source_id=record.origin_id,
    )


def run_augmentation(dataset: Sequence[StudyRecord], spec: AugmentationSpec,
                     seed: int = 0) -> list[StudyRecord]:
    """Each record followed by ``spec.cycles`` augmented variants of it."""
    out = []
    for record in dataset:
        out.append(record)
        for cycle in range(1, spec.cycles + 1):
            out.append(augment_record(record, spec, seed, cycle))
    return out
