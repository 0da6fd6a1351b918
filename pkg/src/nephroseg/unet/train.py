"""Cross-validated training, checkpoints and patch-tiled prediction."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..errors import DivergenceError, NumericalError, ValidationError
from ..nifti import atomic_write_bytes
from ..volume import DEFAULT_PATCH, LabelMap, StudyRecord, VolumeGrid, patch_origins, reassemble
from .loss import tversky_loss
from .network import NetworkArchitecture, NetworkParameters, backward, forward, init_parameters

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "nephroseg-checkpoint"
CHECKPOINT_VERSION = 1
LOSS_LOG_COLUMNS = ("epoch", "fold", "train_loss", "val_loss")


@dataclass
class TrainConfig:
    epochs: int = 300
    folds: int = 3
    alpha: float = 0.7
    beta: float = 0.3
    eps: float = 1e-6
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 2
    patch_shape: tuple[int, int, int] = DEFAULT_PATCH
    patches_per_volume: int = 1
    foreground_fraction: float = 0.5
    depth: int = 3
    base_channels: int = 8
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.patch_shape = tuple(int(p) for p in self.patch_shape)
        if self.alpha < 0 or self.beta < 0 or not self.eps > 0:
            raise ValidationError("Tversky weights must be >= 0 and eps > 0")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.folds < 2:
            raise ValidationError(f"folds must be >= 2, got {self.folds}")
        if self.batch_size < 1 or self.patches_per_volume < 1:
            raise ValidationError("batch_size and patches_per_volume must be >= 1")
        if not 0 <= self.foreground_fraction <= 1:
            raise ValidationError("foreground_fraction must be in [0, 1]")
        if not self.lr > 0:
            raise ValidationError(f"learning rate must be positive, got {self.lr}")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"dtype must be float32 or float64, got {self.dtype}")
        self.architecture.check_input(self.patch_shape)

    @property
    def architecture(self) -> NetworkArchitecture:
        return NetworkArchitecture(depth=self.depth, base_channels=self.base_channels)

    def to_json(self) -> dict:
        out = asdict(self)
        out["patch_shape"] = list(self.patch_shape)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown training keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class Checkpoint:
    parameters: NetworkParameters
    epoch: int
    fold: int
    validation_loss: float
    log: list[dict] = field(default_factory=list)


class Adam:
    def __init__(self, params: NetworkParameters, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, params: NetworkParameters, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name in sorted(grads):
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params.tensors[name] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(m.dtype)


# -- prediction --------------------------------------------------------------

def _pad_to(values: np.ndarray, shape, fill: float):
    pad = [(0, max(0, s - n)) for n, s in zip(values.shape, shape)]
    if not any(p for _, p in pad):
        return values
    return np.pad(values, pad, constant_values=fill)


def predict_probabilities(params: NetworkParameters, volume: VolumeGrid, patch_shape=DEFAULT_PATCH,
                          stride=None, batch_size: int = 4) -> np.ndarray:
    """Blended per-class probabilities over the whole volume, ``(X, Y, Z, C)``."""
    patch_shape = tuple(int(p) for p in patch_shape)
    if stride is None:
        stride = tuple(max(1, p // 2) for p in patch_shape)
    params.architecture.check_input(patch_shape)
    values = np.asarray(volume.values)
    shape = values.shape
    # pad with the volume minimum: background after normalization
    padded = _pad_to(values, patch_shape, float(values.min()))
    origins = patch_origins(padded.shape, patch_shape, stride)
    pieces = []
    for start in range(0, len(origins), batch_size):
        chunk = origins[start:start + batch_size]
        batch = np.stack([padded[tuple(slice(o, o + p) for o, p in zip(org, patch_shape))]
                          for org in chunk])
        probs = forward(params, batch)
        pieces.extend(zip(chunk, probs))
    blended = reassemble(pieces, padded.shape)
    return blended[: shape[0], : shape[1], : shape[2]]


def predict_volume(params: NetworkParameters, volume: VolumeGrid, patch_shape=DEFAULT_PATCH,
                   stride=None) -> LabelMap:
    """Argmax of the blended probabilities; ties go to the lower class index."""
    probs = predict_probabilities(params, volume, patch_shape, stride)
    return LabelMap(probs.argmax(axis=-1).astype(np.uint8), volume.spacing)


# -- training ----------------------------------------------------------------

def _sample_origin(record: StudyRecord, patch_shape, rng, foreground_fraction):
    shape = record.image.shape
    hi = [n - p for n, p in zip(shape, patch_shape)]
    if rng.random() < foreground_fraction:
        labels = record.truth.labels
        # lesions are rare, so they take precedence over kidney when present
        present = [c for c in (2, 1) if (labels == c).any()]
        if present:
            cls = present[0]
            voxels = np.argwhere(labels == cls)
            voxel = voxels[int(rng.integers(len(voxels)))]
            # the chosen voxel lands anywhere in the patch, not always at its centre
            offset = [int(rng.integers(p)) for p in patch_shape]
            return tuple(int(np.clip(v - o, 0, h)) for v, o, h in zip(voxel, offset, hi))
    return tuple(int(rng.integers(h + 1)) for h in hi)


def _crop(arr, origin, patch_shape):
    return arr[tuple(slice(o, o + p) for o, p in zip(origin, patch_shape))]


def _padded_record(record: StudyRecord, patch_shape) -> StudyRecord:
    if all(n >= p for n, p in zip(record.image.shape, patch_shape)):
        return record
    values = _pad_to(record.image.values, patch_shape, float(record.image.values.min()))
    labels = _pad_to(record.truth.labels, patch_shape, 0)
    return StudyRecord(record.study_id, VolumeGrid(values, record.image.spacing),
                       LabelMap(labels, record.truth.spacing), record.lesion_annotations,
                       record.source_id)


def validation_loss(params: NetworkParameters, records: Sequence[StudyRecord], config: TrainConfig) -> float:
    """Mean whole-volume Tversky loss over ``records``.

    Volumes are tiled without overlap at the training patch shape, so the
    network sees the same context it was trained on.
    """
    losses = []
    for record in records:
        probs = predict_probabilities(params, record.image, config.patch_shape, config.patch_shape)
        losses.append(tversky_loss(probs, record.truth.labels, config.alpha, config.beta, config.eps))
    return float(np.mean(losses))


def train_fold(config: TrainConfig, train_records: Sequence[StudyRecord],
               val_records: Sequence[StudyRecord], fold: int = 0, init=None) -> Checkpoint:
    dtype = np.dtype(config.dtype)
    params = init.astype(dtype) if init is not None else init_parameters(
        config.architecture, seed=config.seed, dtype=dtype)
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng([config.seed, fold])
    train_records = [_padded_record(r, config.patch_shape) for r in train_records]
    best = None
    rows = []
    for epoch in range(1, config.epochs + 1):
        samples = []
        for idx in rng.permutation(len(train_records)):
            rec = train_records[idx]
            for _ in range(config.patches_per_volume):
                origin = _sample_origin(rec, config.patch_shape, rng, config.foreground_fraction)
                samples.append((_crop(rec.image.values, origin, config.patch_shape),
                                _crop(rec.truth.labels, origin, config.patch_shape)))
        # mix volumes within each batch
        samples = [samples[i] for i in rng.permutation(len(samples))]
        batch_losses = []
        for start in range(0, len(samples), config.batch_size):
            chunk = samples[start:start + config.batch_size]
            x = np.stack([s[0] for s in chunk])
            y = np.stack([s[1] for s in chunk])
            try:
                loss, grads = backward(params, x, y, config.alpha, config.beta, config.eps)
            except NumericalError as exc:
                raise DivergenceError(f"fold {fold} epoch {epoch}: {exc}") from exc
            if not math.isfinite(loss):
                raise DivergenceError(f"fold {fold} epoch {epoch}: non-finite training loss")
            opt.step(params, grads)
            batch_losses.append(loss)
        train_loss = float(np.mean(batch_losses))
        val_loss = validation_loss(params, val_records, config)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"fold {fold} epoch {epoch}: non-finite validation loss")
        rows.append({"epoch": epoch, "fold": fold, "train_loss": train_loss, "val_loss": val_loss})
        log.info("fold %d epoch %d train %.4f val %.4f", fold, epoch, train_loss, val_loss)
        if best is None or val_loss < best.validation_loss:
            best = Checkpoint(params.copy(), epoch, fold, val_loss)
    best.log = rows
    return best


def train(config: TrainConfig, train_set: Sequence[StudyRecord], folds) -> list[Checkpoint]:
    """One checkpoint per fold, each holding the lowest-validation-loss parameters.

    ``folds`` lists study ids.  Augmented variants (records with a
    ``source_id``) train alongside their source study and never validate.
    """
    folds = [list(f) for f in folds]
    flat = [i for f in folds for i in f]
    origins = {r.origin_id for r in train_set}
    if len(flat) != len(set(flat)) or set(flat) != origins:
        raise ValidationError("folds must partition the ids of the training set")
    checkpoints = []
    for k, held_out in enumerate(folds):
        held = set(held_out)
        fit = [r for r in train_set if r.origin_id not in held]
        val = [r for r in train_set if r.study_id in held and r.source_id is None]
        checkpoints.append(train_fold(config, fit, val, fold=k))
    return checkpoints


def best_checkpoint(checkpoints: Sequence[Checkpoint]) -> Checkpoint:
    return min(checkpoints, key=lambda c: (c.validation_loss, c.fold))


# -- serialization -----------------------------------------------------------

def checkpoint_to_json(ckpt: Checkpoint) -> dict:
    params = ckpt.parameters
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": asdict(params.architecture),
        "init": params.init,
        "epoch": ckpt.epoch,
        "fold": ckpt.fold,
        "validation_loss": ckpt.validation_loss,
        "dtype": str(params.dtype),
        "parameters": {
            name: {"shape": list(t.shape), "values": t.reshape(-1).astype(np.float64).tolist()}
            for name, t in params.tensors.items()
        },
    }


def checkpoint_from_json(obj: dict) -> Checkpoint:
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"not a checkpoint file (format {obj.get('format')!r})")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {obj.get('version')!r}")
    arch = NetworkArchitecture(**obj["architecture"])
    dtype = np.dtype(obj.get("dtype", "float32"))
    tensors = {
        name: np.asarray(t["values"], dtype=dtype).reshape(t["shape"])
        for name, t in obj["parameters"].items()
    }
    params = NetworkParameters(arch, tensors, obj.get("init", "he-uniform"))
    return Checkpoint(params, int(obj["epoch"]), int(obj["fold"]), float(obj["validation_loss"]))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, json.dumps(checkpoint_to_json(ckpt)).encode())


def load_checkpoint(path) -> Checkpoint:
    with open(path) as fh:
        return checkpoint_from_json(json.load(fh))


def loss_log_csv(checkpoints: Sequence[Checkpoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOSS_LOG_COLUMNS)
    for ckpt in checkpoints:
        for row in ckpt.log:
            writer.writerow([row["epoch"], row["fold"], repr(row["train_loss"]), repr(row["val_loss"])])
    return buf.getvalue()
