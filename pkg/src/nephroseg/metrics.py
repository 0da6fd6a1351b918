"""Overlap, volumetry, detection and agreement statistics.

Conventions:

* A class absent from both truth and prediction has no DSC/JI (``None``)
  and is left out of every mean.
* Volume differences and percent errors are truth minus prediction, so an
  overestimating model gives negative values.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.special import betainc

from .errors import (
    DegenerateError,
    EmptyMatrixError,
    SampleSizeError,
    UndefinedError,
    ValidationError,
)
from .volume import KIDNEY, LESION, LabelMap


def _labels(m):
    return np.asarray(m.labels if isinstance(m, LabelMap) else m)


def _masks(truth, pred, cls):
    t, p = _labels(truth), _labels(pred)
    if t.shape != p.shape:
        raise ValidationError(f"shape mismatch: truth {t.shape} vs prediction {p.shape}")
    return t == cls, p == cls


def dice(truth, pred, cls: int) -> float | None:
    a, b = _masks(truth, pred, cls)
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return None
    return 2.0 * int(np.count_nonzero(a & b)) / (na + nb)


def jaccard(truth, pred, cls: int) -> float | None:
    a, b = _masks(truth, pred, cls)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return None
    return int(np.count_nonzero(a & b)) / union


def voxel_volume_mm3(spacing) -> float:
    sx, sy, sz = (float(s) for s in spacing)
    return sx * sy * sz


def segmentation_volume(labels, cls: int, spacing=None) -> float:
    """Volume of class ``cls`` in millilitres."""
    if spacing is None:
        spacing = labels.spacing
    if any(not float(s) > 0 for s in spacing):
        raise ValidationError(f"spacing must be positive, got {tuple(spacing)}")
    return int(np.count_nonzero(_labels(labels) == cls)) * voxel_volume_mm3(spacing) / 1000.0


def percent_error(truth_vol: float, pred_vol: float) -> float:
    """``100 * (truth - pred) / truth``."""
    if truth_vol == 0:
        raise UndefinedError("percent error is undefined when the truth volume is zero")
    return 100.0 * (truth_vol - pred_vol) / truth_vol


@dataclass
class StudyMetrics:
    study_id: str
    dsc_kidney: float | None
    dsc_lesion: float | None
    ji_kidney: float | None
    ji_lesion: float | None
    dsc_total: float
    ji_total: float
    vol_truth_kidney: float
    vol_pred_kidney: float
    vol_truth_lesion: float
    vol_pred_lesion: float
    pct_err_kidney: float | None
    pct_err_lesion: float | None
    pct_err_total: float | None
    has_lesion: bool = False
    flags: list[str] = field(default_factory=list)

    @property
    def vol_truth_total(self) -> float:
        return self.vol_truth_kidney + self.vol_truth_lesion

    @property
    def vol_pred_total(self) -> float:
        return self.vol_pred_kidney + self.vol_pred_lesion

    def to_json(self) -> dict:
        return asdict(self)


def _mean_defined(values):
    values = [v for v in values if v is not None]
    return sum(values) / len(values) if values else None


def _pct_or_flag(truth_vol, pred_vol, name, flags):
    try:
        return percent_error(truth_vol, pred_vol)
    except UndefinedError:
        flags.append(f"pct_err_{name}_undefined")
        return None


def study_summary(truth, pred, spacing=None, study_id: str = "") -> StudyMetrics:
    """Per-class and total overlap, volumes and percent errors for one study."""
    if spacing is None:
        spacing = truth.spacing
    if _labels(truth).shape != _labels(pred).shape:
        raise ValidationError(f"{study_id}: truth and prediction differ in shape")
    dk, dl = dice(truth, pred, KIDNEY), dice(truth, pred, LESION)
    jk, jl = jaccard(truth, pred, KIDNEY), jaccard(truth, pred, LESION)
    vols = {
        (src, cls): segmentation_volume(m, c, spacing)
        for src, m in (("truth", truth), ("pred", pred))
        for cls, c in (("kidney", KIDNEY), ("lesion", LESION))
    }
    flags: list[str] = []
    dsc_total = _mean_defined([dk, dl])
    ji_total = _mean_defined([jk, jl])
    if dsc_total is None:
        flags.append("no_foreground")
        dsc_total = ji_total = 0.0
    vt_total = vols["truth", "kidney"] + vols["truth", "lesion"]
    vp_total = vols["pred", "kidney"] + vols["pred", "lesion"]
    return StudyMetrics(
        study_id=study_id,
        dsc_kidney=dk, dsc_lesion=dl, ji_kidney=jk, ji_lesion=jl,
        dsc_total=dsc_total, ji_total=ji_total,
        vol_truth_kidney=vols["truth", "kidney"], vol_pred_kidney=vols["pred", "kidney"],
        vol_truth_lesion=vols["truth", "lesion"], vol_pred_lesion=vols["pred", "lesion"],
        pct_err_kidney=_pct_or_flag(vols["truth", "kidney"], vols["pred", "kidney"], "kidney", flags),
        pct_err_lesion=_pct_or_flag(vols["truth", "lesion"], vols["pred", "lesion"], "lesion", flags),
        pct_err_total=_pct_or_flag(vt_total, vp_total, "total", flags),
        has_lesion=bool((_labels(truth) == LESION).any()),
        flags=flags,
    )


# -- detection ---------------------------------------------------------------

def connected_components(mask, connectivity: int = 26) -> tuple[np.ndarray, int]:
    """Label connected foreground regions ``1..n`` under 6- or 26-connectivity."""
    if connectivity not in (6, 26):
        raise ValidationError(f"connectivity must be 6 or 26, got {connectivity}")
    mask = np.asarray(mask).astype(bool)
    structure = ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)
    labelled, n = ndimage.label(mask, structure=structure)
    return labelled, int(n)


@dataclass
class DetectionMatrix:
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    def __post_init__(self):
        for name in ("tp", "fn", "fp", "tn"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise ValidationError(f"{name} must be a nonnegative integer, got {value}")
            setattr(self, name, int(value))

    def __add__(self, other: "DetectionMatrix") -> "DetectionMatrix":
        return DetectionMatrix(self.tp + other.tp, self.fn + other.fn,
                               self.fp + other.fp, self.tn + other.tn)

    def to_json(self) -> dict:
        return asdict(self)


def lesion_detection(truth, pred, connectivity: int = 26, min_component_voxels: int = 1) -> DetectionMatrix:
    """Lesion-level TP/FN/FP plus a subject-level TN.

    A truth lesion component touching any predicted lesion voxel is a hit.
    Predicted components smaller than ``min_component_voxels`` are dropped
    before false positives are counted.
    """
    t_mask, p_mask = _masks(truth, pred, LESION)
    t_lab, n_truth = connected_components(t_mask, connectivity)
    p_lab, n_pred = connected_components(p_mask, connectivity)
    sizes = np.bincount(p_lab.ravel(), minlength=n_pred + 1)
    kept = {c for c in range(1, n_pred + 1) if sizes[c] >= min_component_voxels}

    hit = set(np.unique(t_lab[p_mask]).tolist()) - {0}
    tp = len(hit)
    fn = n_truth - tp
    touching = set(np.unique(p_lab[t_mask]).tolist()) - {0}
    fp = len(kept - touching)
    tn = 1 if n_truth == 0 and not kept else 0
    return DetectionMatrix(tp, fn, fp, tn)


def _ratio(num, den):
    return num / den if den > 0 else None


def detection_stats(m: DetectionMatrix) -> dict:
    total = m.tp + m.tn + m.fp + m.fn
    if total == 0:
        raise EmptyMatrixError("detection matrix is all zeros")
    return {
        "accuracy": _ratio(m.tp + m.tn, total),
        "sensitivity": _ratio(m.tp, m.tp + m.fn),
        "specificity": _ratio(m.tn, m.tn + m.fp),
        "ppv": _ratio(m.tp, m.tp + m.fp),
        "npv": _ratio(m.tn, m.tn + m.fn),
    }


# -- agreement ---------------------------------------------------------------

@dataclass
class BlandAltmanSummary:
    bias: float
    sd: float
    lower_limit: float
    upper_limit: float
    n: int
    mode: str = "absolute"
    points: list[tuple[float, float]] = field(default_factory=list)

    def to_json(self, with_points: bool = True) -> dict:
        out = {
            "bias": self.bias, "sd": self.sd,
            "lower_limit": self.lower_limit, "upper_limit": self.upper_limit,
            "n": self.n, "mode": self.mode,
        }
        if with_points:
            out["points"] = [{"mean": m, "difference": d} for m, d in self.points]
        return out


def _sd(values) -> float:
    # two-pass sample sd, n-1 divisor
    n = len(values)
    mean = math.fsum(values) / n
    return math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1))


def _common_grid(bias: float, sd: float) -> tuple[float, float]:
    """Round ``bias`` and ``sd`` to a shared power-of-two quantum.

    The quantum is 2**-51 of the limits' magnitude bound, so bias +/- 2 sd and
    4 sd are all exact multiples below 2**53 quanta and the subtractions
    between them are exact in binary64.
    """
    bound = abs(bias) + 2 * sd
    if bound == 0 or not math.isfinite(bound):
        return bias, sd
    shift = 51 - math.frexp(bound)[1]
    return (math.ldexp(round(math.ldexp(bias, shift)), -shift),
            math.ldexp(round(math.ldexp(sd, shift)), -shift))


def bland_altman(pairs: Sequence[tuple[float, float]], mode: str = "absolute") -> BlandAltmanSummary:
    """Bias and +/-2 SD limits of agreement for ``(truth, prediction)`` pairs.

    ``mode="percent"`` uses ``percent_error`` as the difference; pairs with a
    zero truth value are skipped there.
    """
    if mode not in ("absolute", "percent"):
        raise ValidationError(f"mode must be 'absolute' or 'percent', got {mode!r}")
    points = []
    for t, p in pairs:
        t, p = float(t), float(p)
        if mode == "percent":
            if t == 0:
                continue
            d = percent_error(t, p)
        else:
            d = t - p
        points.append(((t + p) / 2.0, d))
    if len(points) < 2:
        raise SampleSizeError(f"Bland-Altman needs at least 2 pairs, got {len(points)}")
    diffs = [d for _, d in points]
    # on a shared grid the limits and their spread are exact in binary64
    bias, sd = _common_grid(math.fsum(diffs) / len(diffs), _sd(diffs))
    return BlandAltmanSummary(bias, sd, bias - 2 * sd, bias + 2 * sd, len(diffs), mode, points)


def paired_t_test(pairs: Sequence[tuple[float, float]]) -> dict:
    """Two-sided paired t-test on ``truth - prediction`` differences."""
    diffs = [float(t) - float(p) for t, p in pairs]
    n = len(diffs)
    if n < 2:
        raise SampleSizeError(f"t-test needs at least 2 pairs, got {n}")
    sd = _sd(diffs)
    if sd == 0:
        raise DegenerateError("differences have zero variance")
    df = n - 1
    t = (math.fsum(diffs) / n) / (sd / math.sqrt(n))
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return {"t": t, "p": p, "df": df}


# -- aggregation -------------------------------------------------------------

def describe(values) -> dict:
    """Mean, sample sd and median of the defined values, in a fixed order."""
    values = [float(v) for v in values if v is not None]
    n = len(values)
    if n == 0:
        return {"n": 0, "mean": None, "sd": None, "median": None}
    return {
        "n": n,
        "mean": math.fsum(values) / n,
        "sd": _sd(values) if n > 1 else 0.0,
        "median": float(np.median(values)),
    }
