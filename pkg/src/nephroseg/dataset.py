"""On-disk study layout.

A data directory holds ``<id>_image.nii.gz`` and ``<id>_label.nii.gz`` per
study, plus an optional ``<id>_meta.json`` with lesion annotations, the
source id of augmented variants and normalization statistics.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .errors import GeometryError, MissingInputError, NephrosegError
from .nifti import atomic_write_bytes, load_nifti, save_nifti
from .volume import (
    LabelMap,
    LesionAnnotation,
    StudyRecord,
    labels_from_nifti,
    labels_to_nifti,
    volume_from_nifti,
    volume_to_nifti,
)

IMAGE_SUFFIX = "_image.nii.gz"
LABEL_SUFFIX = "_label.nii.gz"
META_SUFFIX = "_meta.json"


def max_workers() -> int:
    raw = os.environ.get("NEPHROSEG_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return min(4, os.cpu_count() or 1)


def parallel_map(fn, items):
    """Ordered map; results come back in input order."""
    items = list(items)
    workers = max_workers()
    if workers == 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _require_dir(path) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise MissingInputError(f"{path} is not a directory")
    return path


def discover_ids(directory, suffix: str = IMAGE_SUFFIX) -> list[str]:
    directory = _require_dir(directory)
    return sorted(p.name[: -len(suffix)] for p in directory.iterdir() if p.name.endswith(suffix))


def read_meta(directory, study_id: str) -> dict:
    path = Path(directory) / f"{study_id}{META_SUFFIX}"
    if not path.exists():
        return {}
    with open(path) as fh:
        return json.load(fh)


def write_meta(directory, study_id: str, meta: dict) -> None:
    path = Path(directory) / f"{study_id}{META_SUFFIX}"
    atomic_write_bytes(path, (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())


def load_labels(directory, study_id: str) -> LabelMap:
    path = Path(directory) / f"{study_id}{LABEL_SUFFIX}"
    if not path.exists():
        raise MissingInputError(f"missing label file {path}")
    try:
        return labels_from_nifti(load_nifti(path))
    except NephrosegError as exc:
        raise type(exc)(f"{path}: {exc}") from exc


def load_study(directory, study_id: str) -> StudyRecord:
    directory = Path(directory)
    image_path = directory / f"{study_id}{IMAGE_SUFFIX}"
    if not image_path.exists():
        raise MissingInputError(f"missing image file {image_path}")
    try:
        image = volume_from_nifti(load_nifti(image_path))
    except NephrosegError as exc:
        raise type(exc)(f"{image_path}: {exc}") from exc
    truth = load_labels(directory, study_id)
    if image.shape != truth.shape:
        raise GeometryError(f"{study_id}: image {image.shape} and label {truth.shape} shapes differ")
    meta = read_meta(directory, study_id)
    annotations = tuple(LesionAnnotation(**a) for a in meta.get("lesions", []))
    try:
        return StudyRecord(study_id, image, truth, annotations, meta.get("source_id"))
    except NephrosegError as exc:
        raise GeometryError(str(exc)) from exc


def load_directory(directory, ids=None) -> list[StudyRecord]:
    ids = discover_ids(directory) if ids is None else list(ids)
    return parallel_map(lambda i: load_study(directory, i), ids)


def save_study(directory, record: StudyRecord, extra_meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_nifti(directory / f"{record.study_id}{IMAGE_SUFFIX}", volume_to_nifti(record.image))
    save_nifti(directory / f"{record.study_id}{LABEL_SUFFIX}", labels_to_nifti(record.truth))
    meta = dict(extra_meta or {})
    meta["lesions"] = [{"side": a.side, "morphology": a.morphology} for a in record.lesion_annotations]
    if record.source_id is not None:
        meta["source_id"] = record.source_id
    write_meta(directory, record.study_id, meta)
