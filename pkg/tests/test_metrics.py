import numpy as np
import pytest

from coverhead.core import Annotation, CoverheadError
from coverhead.metrics import MEAN_FLOOR, average_reports, evaluate, species_means


def test_hand_computed_report():
    preds = np.array([[10.0, 0.0], [20.0, 4.0]])
    targets = np.array([[12.0, 1.0], [15.0, 1.0]])
    r = evaluate(preds, targets, np.array([10.0, 2.0]))
    np.testing.assert_allclose(r.per_species_mae, [3.5, 2.0])
    np.testing.assert_allclose(r.per_species_msae, [0.35, 1.0])
    assert r.mae == 2.75 and r.msae == pytest.approx(0.675)
    assert r.mae_image_first == pytest.approx(2.75)
    assert r.n_images == 2


def test_identities_on_random_data(rng):
    preds = rng.uniform(0, 60, size=(40, 9))
    targets = rng.uniform(0, 60, size=(40, 9))
    means = species_means(targets)
    r = evaluate(preds, targets, means)
    np.testing.assert_allclose(r.per_species_msae, r.per_species_mae / means.values, rtol=0, atol=1e-12)
    assert abs(r.mae - r.per_species_mae.mean()) <= 1e-12
    assert abs(r.msae - r.per_species_msae.mean()) <= 1e-12


def test_species_means_floor():
    rows = [Annotation(0, 0, 1, (0.0, 3.0)), Annotation(0, 0, 2, (0.0, 5.0))]
    m = species_means(rows)
    assert m.values.tolist() == [MEAN_FLOOR, 4.0]
    assert m.floored.tolist() == [True, False]
    r = evaluate([[1.0, 4.0]], [[0.0, 4.0]], m)
    assert r.floored.tolist() == [True, False]
    with pytest.raises(CoverheadError):
        species_means([])


def test_shape_errors():
    with pytest.raises(CoverheadError):
        evaluate(np.zeros((2, 3)), np.zeros((2, 4)), np.ones(3))
    with pytest.raises(CoverheadError):
        evaluate(np.zeros((2, 3)), np.zeros((2, 3)), np.ones(4))
    with pytest.raises(CoverheadError):
        evaluate(np.zeros((0, 3)), np.zeros((0, 3)), np.ones(3))


def test_average_reports_is_fieldwise_mean(rng):
    reps = [evaluate(rng.uniform(0, 9, (5, 3)), rng.uniform(0, 9, (5, 3)), rng.uniform(1, 4, 3)) for _ in range(4)]
    avg = average_reports(reps)
    assert avg.mae == pytest.approx(np.mean([r.mae for r in reps]))
    np.testing.assert_allclose(avg.per_species_msae, np.mean([r.per_species_msae for r in reps], axis=0))
    assert avg.n_images == 20
    with pytest.raises(CoverheadError):
        average_reports([])


def test_report_serialisation():
    r = evaluate([[1.0, 2.0]], [[0.0, 0.0]], [1.0, 4.0])
    d = r.to_dict()
    assert d["per_species_mae"] == [1.0, 2.0] and d["msae"] == 0.75
    csv_text = r.to_csv(["a", "b"])
    assert csv_text.splitlines()[0] == "mae,msae,n_images,mae_a,msae_a,mae_b,msae_b"
