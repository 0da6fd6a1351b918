"""Command-line entry point: ``nephroseg <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset
from .augment import run_augmentation
from .config import PipelineConfig, load_config
from .errors import ConfigError, GeometryError, MissingInputError, NephrosegError, ValidationError
from .nifti import atomic_write_bytes, load_nifti, save_nifti
from .phantom import generate_phantom, lesion_annotations, random_phantom_spec
from .report import bland_altman_csv, build_report, report_csv, report_svgs
from .unet.train import (
    best_checkpoint,
    load_checkpoint,
    loss_log_csv,
    predict_volume,
    save_checkpoint,
    train,
)
from .volume import (
    LesionAnnotation,
    StudyRecord,
    clip_and_normalize,
    labels_to_nifti,
    load_manifest,
    resample,
    save_manifest,
    split_patients,
    volume_from_nifti,
)

log = logging.getLogger("nephroseg")


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(path, (json.dumps(obj, indent=2) + "\n").encode())


def _write_text(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(path, text.encode())


def study_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# -- commands ----------------------------------------------------------------

def cmd_phantom(args, config: PipelineConfig) -> None:
    if args.count < 1:
        raise ValidationError(f"--count must be >= 1, got {args.count}")
    seed = config.seed if args.seed is None else args.seed
    out = Path(args.out)

    def make(i):
        spec = random_phantom_spec(config.phantom, study_seed(seed, i))
        image, labels = generate_phantom(spec)
        record = StudyRecord(f"phantom_{i:03d}", image, labels, lesion_annotations(spec))
        dataset.save_study(out, record, {"phantom": spec.to_json()})

    dataset.parallel_map(make, range(args.count))
    log.info("wrote %d phantoms to %s", args.count, out)


def _read_ids(path) -> list[str]:
    path = Path(path)
    if path.is_dir():
        return dataset.discover_ids(path)
    if not path.exists():
        raise MissingInputError(f"id file {path} does not exist")
    text = path.read_text()
    if path.suffix == ".json":
        try:
            ids = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(ids, list):
            raise ConfigError(f"{path}: expected a JSON list of ids")
        return [str(i) for i in ids]
    return [line.strip() for line in text.splitlines() if line.strip()]


def cmd_split(args, config: PipelineConfig) -> None:
    ids = _read_ids(args.ids)
    fraction = config.test_fraction if args.test_fraction is None else args.test_fraction
    folds = config.folds if args.folds is None else args.folds
    seed = config.seed if args.seed is None else args.seed
    split = split_patients(ids, fraction, seed, k=folds)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_manifest(args.out, split)
    log.info("split %d ids: %d train / %d test", len(ids), len(split.train_ids), len(split.test_ids))


def cmd_preprocess(args, config: PipelineConfig) -> None:
    src, out = Path(args.inp), Path(args.out)
    ids = dataset.discover_ids(src)
    if not ids:
        raise MissingInputError(f"no *{dataset.IMAGE_SUFFIX} files in {src}")

    def run(study_id):
        record = dataset.load_study(src, study_id)
        image = resample(record.image, config.target_spacing, "trilinear")
        labels = resample(record.truth, config.target_spacing, "nearest")
        image, mean, sd = clip_and_normalize(image, *config.clip)
        meta = dataset.read_meta(src, study_id)
        meta["normalization"] = {"mean": mean, "sd": sd, "clip": list(config.clip),
                                 "spacing": list(config.target_spacing)}
        dataset.save_study(out, StudyRecord(study_id, image, labels, record.lesion_annotations,
                                            record.source_id), meta)

    dataset.parallel_map(run, ids)
    log.info("preprocessed %d studies into %s", len(ids), out)


def cmd_augment(args, config: PipelineConfig) -> None:
    src, out = Path(args.inp), Path(args.out)
    records = dataset.load_directory(src)
    if not records:
        raise MissingInputError(f"no studies in {src}")
    seed = config.seed if args.seed is None else args.seed
    augmented = run_augmentation(records, config.augmentation, seed)
    metas = {r.study_id: dataset.read_meta(src, r.study_id) for r in records}

    def save(record):
        meta = dict(metas.get(record.origin_id, {}))
        dataset.save_study(out, record, meta)

    dataset.parallel_map(save, augmented)
    log.info("augmented %d studies into %d records", len(records), len(augmented))


def cmd_train(args, config: PipelineConfig) -> None:
    split = load_manifest(args.manifest)
    if not split.folds:
        raise ValidationError(f"{args.manifest}: manifest has no folds")
    data = Path(args.data)
    available = dataset.discover_ids(data)
    train_ids = set(split.train_ids)
    records = []
    for study_id in available:
        meta = dataset.read_meta(data, study_id)
        if meta.get("source_id", study_id) in train_ids:
            records.append(study_id)
    missing = train_ids - set(available)
    if missing:
        raise MissingInputError(f"training studies missing from {data}: {sorted(missing)[:5]}")
    train_set = dataset.load_directory(data, records)
    training = config.training
    checkpoints = train(training, train_set, split.folds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ckpt in checkpoints:
        save_checkpoint(out / f"fold{ckpt.fold}.json", ckpt)
    best = best_checkpoint(checkpoints)
    save_checkpoint(out / "best.json", best)
    _write_text(out / "loss_log.csv", loss_log_csv(checkpoints))
    _write_json(out / "summary.json", {
        "best_fold": best.fold,
        "folds": [{"fold": c.fold, "epoch": c.epoch, "validation_loss": c.validation_loss}
                  for c in checkpoints],
        "training": training.to_json(),
        "n_records": len(train_set),
    })
    log.info("best fold %d (epoch %d, val loss %.4f)", best.fold, best.epoch, best.validation_loss)


def cmd_predict(args, config: PipelineConfig) -> None:
    if not Path(args.checkpoint).exists():
        raise MissingInputError(f"checkpoint {args.checkpoint} does not exist")
    ckpt = load_checkpoint(args.checkpoint)
    src, out = Path(args.inp), Path(args.out)
    ids = dataset.discover_ids(src)
    if args.manifest:
        test = set(load_manifest(args.manifest).test_ids)
        ids = [i for i in ids if i in test]
    if not ids:
        raise MissingInputError(f"no studies to predict in {src}")
    out.mkdir(parents=True, exist_ok=True)

    def run(study_id):
        image = volume_from_nifti(load_nifti(src / f"{study_id}{dataset.IMAGE_SUFFIX}"))
        labels = predict_volume(ckpt.parameters, image, config.patch_shape, config.stride)
        save_nifti(out / f"{study_id}{dataset.LABEL_SUFFIX}", labels_to_nifti(labels))

    # the network kernels already saturate BLAS; keep prediction sequential
    for study_id in ids:
        run(study_id)
    log.info("predicted %d studies into %s", len(ids), out)


def cmd_evaluate(args, config: PipelineConfig) -> None:
    truth_dir, pred_dir = Path(args.truth), Path(args.pred)
    ids = dataset.discover_ids(pred_dir, dataset.LABEL_SUFFIX)
    if not ids:
        raise MissingInputError(f"no *{dataset.LABEL_SUFFIX} files in {pred_dir}")

    def load(study_id):
        truth = dataset.load_labels(truth_dir, study_id)
        pred = dataset.load_labels(pred_dir, study_id)
        if truth.shape != pred.shape:
            raise GeometryError(f"{study_id}: truth {truth.shape} vs prediction {pred.shape}")
        return study_id, truth, pred

    pairs = dataset.parallel_map(load, ids)
    annotations = {}
    for study_id in ids:
        meta = dataset.read_meta(truth_dir, study_id)
        if "lesions" in meta:
            annotations[study_id] = [LesionAnnotation(**a) for a in meta["lesions"]]
    report = build_report(pairs, config.connectivity, config.min_component_voxels, annotations)
    _write_json(args.out, report)
    if args.csv:
        _write_text(args.csv, report_csv(report))
    if args.svg:
        svg_dir = Path(args.svg)
        svg_dir.mkdir(parents=True, exist_ok=True)
        for name, text in report_svgs(report).items():
            _write_text(svg_dir / name, text)
        for key, entry in report["agreement"].items():
            if entry["bland_altman"] is not None:
                _write_text(svg_dir / f"bland_altman_{key}.csv", bland_altman_csv(entry["bland_altman"]))
    log.info("evaluated %d studies", len(pairs))


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nephroseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="pipeline config JSON")
        p.set_defaults(func=fn)
        return p

    p = add("phantom", cmd_phantom, "generate synthetic phantom studies")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = add("split", cmd_split, "patient-level train/test split with CV folds")
    p.add_argument("--ids", required=True, help="id list (text or JSON) or a data directory")
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--folds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = add("preprocess", cmd_preprocess, "resample and clip/normalize studies")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = add("augment", cmd_augment, "write originals plus augmented variants")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = add("train", cmd_train, "cross-validated training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = add("predict", cmd_predict, "patch-tiled prediction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="restrict prediction to the manifest's test ids")

    p = add("evaluate", cmd_evaluate, "metrics, detection and agreement report")
    p.add_argument("--truth", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--svg", help="directory for SVG plots")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        args.func(args, config)
    except NephrosegError as exc:
        print(f"nephroseg {args.command}: error [{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"nephroseg {args.command}: error [io]: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
