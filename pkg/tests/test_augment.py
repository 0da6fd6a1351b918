import numpy as np
import pytest

from nephroseg.augment import (
    AugmentationSpec,
    Brightness,
    Contrast,
    Elastic,
    Gamma,
    GaussianNoise,
    Mirror,
    Rotate,
    Scale,
    apply_intensity,
    apply_spatial,
    augment_record,
    elastic_field,
    run_augmentation,
)
from nephroseg.errors import DegenerateError, DomainError, ValidationError
from nephroseg.volume import PAPER_SPACING, LabelMap, StudyRecord, VolumeGrid


def _pair(shape=(9, 9, 5), seed=0, spacing=PAPER_SPACING):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=shape).astype(np.uint8)
    return VolumeGrid(rng.normal(size=shape), spacing), LabelMap(labels, spacing)


def _record(study_id="s0", shape=(12, 12, 6), seed=0):
    image, labels = _pair(shape, seed)
    return StudyRecord(study_id, image, labels)


# -- spatial -----------------------------------------------------------------

@pytest.mark.parametrize("transform", [Scale(1.0), Rotate(0.0)])
def test_neutral_spatial_is_identity(transform):
    image, labels = _pair()
    out_i, out_l = apply_spatial(image, labels, transform)
    np.testing.assert_allclose(out_i.values, image.values, atol=1e-6)
    np.testing.assert_array_equal(out_l.labels, labels.labels)


def test_zero_elastic_is_identity():
    image, labels = _pair()
    field = elastic_field(image.shape, 0.0, 3.0, seed=1)
    assert not field.any()
    out_i, out_l = apply_spatial(image, labels, Elastic(field))
    np.testing.assert_allclose(out_i.values, image.values, atol=1e-6)
    np.testing.assert_array_equal(out_l.labels, labels.labels)


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_mirror_is_involution(axis):
    image, labels = _pair()
    once = apply_spatial(image, labels, Mirror(axis))
    assert not np.array_equal(once[0].values, image.values)
    twice = apply_spatial(*once, Mirror(axis))
    np.testing.assert_array_equal(twice[0].values, image.values)
    np.testing.assert_array_equal(twice[1].labels, labels.labels)


def test_mirror_flips_index():
    values = np.zeros((5, 4, 3))
    values[1, 2, 0] = 1.0
    out, _ = apply_spatial(VolumeGrid(values), LabelMap(np.zeros((5, 4, 3), np.uint8)), Mirror(0))
    assert out.values[3, 2, 0] == 1.0


@pytest.mark.parametrize("offset", [(2, 1), (-3, 2), (0, 3)])
def test_quarter_turn_moves_marker(offset):
    shape = (9, 9, 3)
    c = 4
    a, b = offset
    values = np.zeros(shape)
    labels = np.zeros(shape, np.uint8)
    values[c + a, c + b, 1] = 1.0
    labels[c + a, c + b, 1] = 1
    out_i, out_l = apply_spatial(VolumeGrid(values, PAPER_SPACING), LabelMap(labels, PAPER_SPACING),
                                 Rotate(90.0))
    # a +90 degree turn about z takes in-plane offset (a, b) to (-b, a)
    target = (c - b, c + a, 1)
    assert out_i.values[target] == pytest.approx(1.0, abs=1e-9)
    assert out_l.labels[target] == 1
    assert out_l.labels.sum() == 1
    assert out_i.values.sum() == pytest.approx(1.0, abs=1e-9)


def test_spatial_map_shared_by_image_and_labels():
    image, labels = _pair(seed=3)
    # make the image a copy of the labels so nearest and linear agree at lattice points
    image = VolumeGrid(labels.labels.astype(float), labels.spacing)
    for t in [Mirror(1), Rotate(90.0), [Mirror(0), Mirror(2)]]:
        out_i, out_l = apply_spatial(image, labels, t)
        np.testing.assert_allclose(out_i.values, out_l.labels, atol=1e-9)


def test_scale_keeps_shape_and_labels():
    image, labels = _pair()
    for s in (0.85, 1.25):
        out_i, out_l = apply_spatial(image, labels, Scale(s))
        assert out_i.shape == image.shape
        assert set(np.unique(out_l.labels)) <= {0, 1, 2}


def test_scale_up_enlarges_central_block():
    labels = np.zeros((21, 21, 21), np.uint8)
    labels[8:13, 8:13, 8:13] = 1
    image = VolumeGrid(labels.astype(float))
    _, out = apply_spatial(image, LabelMap(labels), Scale(1.6))
    assert out.labels.sum() > labels.sum()


def test_nonpositive_scale():
    image, labels = _pair()
    with pytest.raises(DomainError):
        apply_spatial(image, labels, Scale(0.0))


def test_shape_mismatch():
    image, _ = _pair()
    with pytest.raises(ValidationError):
        apply_spatial(image, LabelMap(np.zeros((2, 2, 2), np.uint8)), Mirror(0))


# -- elastic field -----------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_elastic_field_bounded(seed):
    field = elastic_field((10, 11, 12), 2.0, 3.0, seed)
    assert field.shape == (3, 10, 11, 12)
    assert np.abs(field).max() <= 2.0 + 1e-12
    assert np.abs(field).max() == pytest.approx(2.0)


def test_elastic_field_deterministic():
    assert np.array_equal(elastic_field((8, 8, 8), 2, 3, 4), elastic_field((8, 8, 8), 2, 3, 4))


def _laplacian_norm(f):
    lap = -6 * f[1:-1, 1:-1, 1:-1]
    for axis in range(3):
        for step in (-1, 1):
            lap = lap + np.roll(f, step, axis)[1:-1, 1:-1, 1:-1]
    return float(np.linalg.norm(lap))


def test_elastic_field_is_smoother_than_raw_noise():
    alpha, seed = 2.0, 7
    field = elastic_field((16, 16, 16), alpha, 3.0, seed)
    raw = np.random.default_rng(seed).uniform(-1, 1, size=(3, 16, 16, 16)) * alpha
    for a in range(3):
        assert _laplacian_norm(field[a]) < 0.1 * _laplacian_norm(raw[a])


def test_elastic_preserves_label_set():
    image, labels = _pair(shape=(12, 12, 8))
    out_i, out_l = apply_spatial(image, labels, Elastic(elastic_field(image.shape, 2.0, 3.0, 0)))
    assert set(np.unique(out_l.labels)) <= {0, 1, 2}
    assert np.isfinite(out_i.values).all()


# -- intensity ---------------------------------------------------------------

@pytest.mark.parametrize("transform", [Brightness(1.0), Contrast(1.0), Gamma(1.0), GaussianNoise(0.0, 3)])
def test_neutral_intensity_is_identity(transform):
    image, _ = _pair()
    np.testing.assert_allclose(apply_intensity(image, transform).values, image.values, atol=1e-6)


def test_contrast_example():
    image = VolumeGrid(np.array([-1.0, 0.0, 1.0]).reshape(3, 1, 1))
    np.testing.assert_allclose(apply_intensity(image, Contrast(2.0)).values.ravel(), [-2, 0, 2])


def test_brightness_example():
    image = VolumeGrid(np.array([-1.0, 0.5, 2.0]).reshape(3, 1, 1))
    np.testing.assert_allclose(apply_intensity(image, Brightness(1.5)).values.ravel(), [-1.5, 0.75, 3.0])


def test_gamma_example():
    image = VolumeGrid(np.array([0.0, 1.0, 4.0]).reshape(3, 1, 1))
    # min 0, range 4: 4 * (v / 4) ** 2
    np.testing.assert_allclose(apply_intensity(image, Gamma(2.0)).values.ravel(), [0.0, 0.25, 4.0])


def test_gamma_degenerate_range():
    with pytest.raises(DegenerateError):
        apply_intensity(VolumeGrid(np.ones((2, 2, 2))), Gamma(1.2))


def test_noise_is_seeded():
    image, _ = _pair()
    a = apply_intensity(image, GaussianNoise(0.05, 11)).values
    b = apply_intensity(image, GaussianNoise(0.05, 11)).values
    c = apply_intensity(image, GaussianNoise(0.05, 12)).values
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("transform", [Contrast(0.0), Gamma(-1.0), GaussianNoise(-0.1, 0)])
def test_intensity_domain_errors(transform):
    image, _ = _pair()
    with pytest.raises(DomainError):
        apply_intensity(image, transform)


# -- spec / pipeline ---------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ValidationError):
        AugmentationSpec(scale_range=(1.3, 0.9))
    with pytest.raises(ValidationError):
        AugmentationSpec(cycles=-1)
    with pytest.raises(ValidationError):
        AugmentationSpec(probability={"scale": 1.5})


def test_spec_json_round_trip():
    spec = AugmentationSpec(cycles=3, elastic_alpha=1.5)
    assert AugmentationSpec.from_json(spec.to_json()) == spec


def test_cycles_two_triples_the_dataset():
    records = [_record(f"s{i}", (4, 4, 2), i) for i in range(120)]
    spec = AugmentationSpec(enabled={name: False for name in AugmentationSpec().enabled})
    out = run_augmentation(records, spec, seed=0)
    assert len(out) == 360
    assert [r.study_id for r in out[:3]] == ["s0", "s0_aug1", "s0_aug2"]
    assert all(r.source_id == "s0" for r in out[1:3])


def test_cycles_zero_is_noop():
    records = [_record(f"s{i}", (6, 6, 4), i) for i in range(3)]
    assert run_augmentation(records, AugmentationSpec(cycles=0), 1) == records


def test_pipeline_is_deterministic():
    records = [_record(f"s{i}", (12, 12, 6), i) for i in range(3)]
    spec = AugmentationSpec(probability={name: 1.0 for name in AugmentationSpec().probability})
    a = run_augmentation(records, spec, seed=5)
    b = run_augmentation(records, spec, seed=5)
    for x, y in zip(a, b):
        assert x.study_id == y.study_id
        assert x.image.values.tobytes() == y.image.values.tobytes()
        assert x.truth.labels.tobytes() == y.truth.labels.tobytes()


def test_variant_depends_on_seed_and_cycle():
    rec = _record()
    spec = AugmentationSpec(probability={name: 1.0 for name in AugmentationSpec().probability})
    v1 = augment_record(rec, spec, 0, 1).image.values
    v2 = augment_record(rec, spec, 0, 2).image.values
    v3 = augment_record(rec, spec, 1, 1).image.values
    assert not np.array_equal(v1, v2)
    assert not np.array_equal(v1, v3)


def test_augmented_labels_stay_in_label_set():
    records = [_record(f"s{i}", (12, 12, 6), i) for i in range(4)]
    spec = AugmentationSpec(probability={name: 1.0 for name in AugmentationSpec().probability})
    for r in run_augmentation(records, spec, seed=2):
        assert set(np.unique(r.truth.labels)) <= {0, 1, 2}
        assert r.image.shape == r.truth.shape == (12, 12, 6)
