"""Synthetic non-contrast CT phantoms standing in for clinical studies.

A phantom is two ellipsoidal kidneys in fat-like background, with optional
spherical cystic lesions that override kidney voxels.  Coordinates are in
millimetres with voxel ``i`` centred at ``i * spacing``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import GeometryError, ValidationError
from .volume import KIDNEY, LESION, PAPER_SPACING, LabelMap, LesionAnnotation, VolumeGrid


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]


@dataclass(frozen=True)
class Lesion:
    center: tuple[float, float, float]
    radius: float
    intensity: float = 10.0


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (48, 48, 32)
    spacing: tuple[float, float, float] = PAPER_SPACING
    kidneys: tuple[Ellipsoid, ...] = ()
    lesions: tuple[Lesion, ...] = ()
    background_hu: float = -100.0
    kidney_hu: float = 30.0
    noise_sd: float = 8.0
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.kidneys = tuple(k if isinstance(k, Ellipsoid) else Ellipsoid(**k) for k in self.kidneys)
        self.lesions = tuple(l if isinstance(l, Lesion) else Lesion(**l) for l in self.lesions)
        if any(s < 1 for s in self.shape) or any(not s > 0 for s in self.spacing):
            raise ValidationError(f"bad grid {self.shape} @ {self.spacing}")
        if self.noise_sd < 0:
            raise ValidationError("noise_sd must be >= 0")
        for k in self.kidneys:
            if any(not a > 0 for a in k.semi_axes):
                raise ValidationError(f"kidney semi-axes must be positive: {k.semi_axes}")
        for les in self.lesions:
            if not les.radius > 0:
                raise ValidationError(f"lesion radius must be positive: {les.radius}")

    @property
    def extent(self) -> tuple[float, float, float]:
        return tuple((n - 1) * s for n, s in zip(self.shape, self.spacing))

    def to_json(self) -> dict:
        return asdict(self)


def _normalized_radius(point, ellipsoid: Ellipsoid) -> float:
    return math.sqrt(sum(((p - c) / a) ** 2 for p, c, a in zip(point, ellipsoid.center, ellipsoid.semi_axes)))


def _check_geometry(spec: PhantomSpec) -> None:
    extent = spec.extent
    for k in spec.kidneys:
        for c, a, e in zip(k.center, k.semi_axes, extent):
            if c - a < 0 or c + a > e:
                raise GeometryError(f"kidney {k} leaves the {extent} mm grid")
    for les in spec.lesions:
        if any(c < 0 or c > e for c, e in zip(les.center, extent)):
            raise GeometryError(f"lesion centre {les.center} lies outside the grid")
        if not spec.kidneys:
            raise GeometryError("lesions need a kidney to sit in")
        # adjacent: centre no further out than one lesion radius past the capsule
        if not any(_normalized_radius(les.center, k) <= 1 + les.radius / min(k.semi_axes)
                   for k in spec.kidneys):
            raise GeometryError(f"lesion at {les.center} is not within or adjacent to a kidney")


def _grid(spec: PhantomSpec):
    return np.meshgrid(*(np.arange(n) * s for n, s in zip(spec.shape, spec.spacing)), indexing="ij")


def generate_phantom(spec: PhantomSpec) -> tuple[VolumeGrid, LabelMap]:
    _check_geometry(spec)
    x, y, z = _grid(spec)
    labels = np.zeros(spec.shape, dtype=np.uint8)
    hu = np.full(spec.shape, spec.background_hu, dtype=np.float64)
    for k in spec.kidneys:
        (cx, cy, cz), (ax, ay, az) = k.center, k.semi_axes
        inside = ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 + ((z - cz) / az) ** 2 <= 1.0
        labels[inside] = KIDNEY
        hu[inside] = spec.kidney_hu
    for les in spec.lesions:
        cx, cy, cz = les.center
        inside = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= les.radius**2
        labels[inside] = LESION
        hu[inside] = les.intensity
    if spec.noise_sd > 0:
        hu = hu + np.random.default_rng(spec.seed).normal(0.0, spec.noise_sd, spec.shape)
    return VolumeGrid(hu, spec.spacing), LabelMap(labels, spec.spacing)


def lesion_annotations(spec: PhantomSpec) -> tuple[LesionAnnotation, ...]:
    """Side and morphology metadata for each lesion.

    Side follows radiological display: the patient's right is the low-x half.
    A lesion whose centre sits outside its kidney's capsule is exophytic.
    """
    mid = spec.extent[0] / 2
    out = []
    for les in spec.lesions:
        host = min(spec.kidneys, key=lambda k: _normalized_radius(les.center, k))
        out.append(LesionAnnotation(
            side="right" if les.center[0] < mid else "left",
            morphology="exophytic" if _normalized_radius(les.center, host) > 1 else "endophytic",
        ))
    return tuple(out)


@dataclass
class PhantomTemplate:
    """Parameters from which per-study phantom geometry is drawn."""

    shape: tuple[int, int, int] = (48, 48, 32)
    spacing: tuple[float, float, float] = PAPER_SPACING
    kidney_semi_axes: tuple[float, float, float] = (11.0, 13.0, 30.0)
    semi_axis_jitter: float = 0.15
    lesion_probability: float = 0.65
    max_lesions: int = 2
    lesion_radius_range: tuple[float, float] = (4.0, 8.0)
    lesion_hu: float = 10.0
    background_hu: float = -100.0
    kidney_hu: float = 30.0
    noise_sd: float = 8.0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "PhantomTemplate":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown phantom keys: {sorted(unknown)}")
        return cls(**obj)


def random_phantom_spec(template: PhantomTemplate, seed: int) -> PhantomSpec:
    """Draw one study's geometry; identical ``(template, seed)`` gives identical specs."""
    rng = np.random.default_rng(seed)
    extent = tuple((n - 1) * s for n, s in zip(template.shape, template.spacing))
    kidneys = []
    for frac in (0.28, 0.72):
        axes = tuple(float(a * (1 + rng.uniform(-template.semi_axis_jitter, template.semi_axis_jitter)))
                     for a in template.kidney_semi_axes)
        centre = []
        for axis, base in enumerate((frac, 0.5, 0.5)):
            lo, hi = axes[axis] + 1.0, extent[axis] - axes[axis] - 1.0
            c = base * extent[axis] + rng.uniform(-0.04, 0.04) * extent[axis]
            centre.append(float(np.clip(c, lo, hi)))
        kidneys.append(Ellipsoid(tuple(centre), axes))
    lesions = []
    if rng.random() < template.lesion_probability:
        for _ in range(int(rng.integers(1, template.max_lesions + 1))):
            host = kidneys[int(rng.integers(2))]
            radius = float(rng.uniform(*template.lesion_radius_range))
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            depth = float(rng.uniform(0.0, 1.1))
            centre = tuple(
                float(np.clip(c + depth * a * u, 0.0, e))
                for c, a, u, e in zip(host.center, host.semi_axes, direction, extent)
            )
            lesions.append(Lesion(centre, radius, template.lesion_hu))
    return PhantomSpec(
        shape=template.shape, spacing=template.spacing, kidneys=tuple(kidneys),
        lesions=tuple(lesions), background_hu=template.background_hu,
        kidney_hu=template.kidney_hu, noise_sd=template.noise_sd, seed=int(seed),
    )
