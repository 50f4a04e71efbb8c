import json

import numpy as np
import pytest
from sklearn.svm import SVC

from beachbot.classifier import (
    LabeledSpectrum,
    TrainedClassifier,
    evaluate,
    load_dataset,
    make_dataset,
    predict,
    predict_many,
    save_dataset,
    smo,
    spectrum_features,
    train,
)
from beachbot.errors import GridMismatchError, TrainingError
from beachbot.spectra import BACKGROUND, CLASSES, Spectrum, WavelengthGrid, absorbance

TRIO = ("PP", "PET", "wood")


def noiseless(lib, material):
    sand = lib.reflectance(BACKGROUND)
    dark = Spectrum(lib.grid, np.zeros(len(lib.grid)), "dark")
    return absorbance(lib.reflectance(material), dark, Spectrum(lib.grid, sand.intensities, "reference"))


@pytest.fixture(scope="module")
def trio(lib):
    data = [d for d in make_dataset(lib, 0) if d.label in TRIO]
    return data, train(data, "SVM3+I", tol=1e-8)


def test_decision_values_match_libsvm(lib, trio):
    data, model = trio
    X = np.array([d.features() for d in data])
    Z = model.standardize(X)
    labels = np.array([d.label for d in data])
    test = [d for d in make_dataset(lib, 5) if d.label in TRIO]
    Xt = np.array([d.features() for d in test])
    ours = model.decision_values(Xt)
    Zt = model.standardize(Xt)
    for k, m in enumerate(model.machines):
        idx = (labels == m.positive) | (labels == m.negative)
        svc = SVC(kernel="poly", degree=3, gamma=1 / Z.shape[1], coef0=1, C=10, tol=1e-8).fit(Z[idx], labels[idx])
        # libsvm's positive side is the second sorted class; ours is the first
        assert svc.classes_[0] == m.positive
        np.testing.assert_allclose(ours[:, k], -svc.decision_function(Zt), atol=1e-5)
        assert len(m.alpha) == svc.n_support_.sum()


def test_dual_box_constraints(model):
    for m in model.machines:
        assert np.all(m.alpha > 0) and np.all(m.alpha <= model.C + 1e-12)


def test_separable_flat_vs_peaked():
    grid = WavelengthGrid.linear(900, 1700, 64)
    rng = np.random.default_rng(0)
    peak = np.exp(-0.5 * ((grid.points - 1300) / 40) ** 2)
    data = []
    for i in range(10):
        data.append(LabeledSpectrum(Spectrum(grid, rng.normal(0, 0.01, 64), "absorbance"), "PP", 1e4))
        data.append(LabeledSpectrum(Spectrum(grid, peak + rng.normal(0, 0.01, 64), "absorbance"), "wood", 1e4))
    m = train(data, "SVM3")
    assert evaluate(m, data).accuracy == 1.0


def test_noiseless_library_is_learned(lib, model, model_plain):
    for c in CLASSES:
        a = noiseless(lib, c)
        assert predict(model, a)[0] == c
        assert predict(model_plain, a)[0] == c


def test_training_accuracy(bench_data, model):
    assert evaluate(model, bench_data).accuracy == 1.0


def test_support_vector_predicts_its_class(bench_data, model):
    pp = [d for d in bench_data if d.label == "PP"]
    Z = model.standardize(np.array([d.features() for d in pp]))
    hits = [i for i, z in enumerate(Z) if np.any(np.all(np.isclose(model.support_vectors, z, rtol=0, atol=1e-12), axis=1))]
    assert hits
    for i in hits:
        assert predict(model, pp[i].absorbance)[0] == "PP"


def test_duplicate_rows_same_decisions(lib, trio):
    data, model = trio
    doubled = train(data + data, "SVM3+I", tol=1e-8)
    test = np.array([d.features() for d in make_dataset(lib, 9) if d.label in TRIO])
    a, b = model.decision_values(test), doubled.decision_values(test)
    # Duplicating every row is the same problem with each alpha split over two copies.
    np.testing.assert_allclose(a, b, atol=2e-3)
    assert [predict(model, Spectrum(lib.grid, t, "absorbance"))[0] for t in test] == \
        [predict(doubled, Spectrum(lib.grid, t, "absorbance"))[0] for t in test]


def test_row_order_invariance(lib, bench_data):
    subset = [d for d in bench_data if d.label in TRIO]
    shuffled = [subset[i] for i in np.random.default_rng(3).permutation(len(subset))]
    a = train(subset, "SVM3+I", seed=4)
    b = train(shuffled, "SVM3+I", seed=4)
    X = np.array([d.features() for d in subset])
    assert np.array_equal(a.decision_values(X), b.decision_values(X))


def test_training_is_deterministic(bench_data):
    subset = [d for d in bench_data if d.label in TRIO]
    a, b = train(subset, seed=1), train(subset, seed=1)
    X = np.array([d.features() for d in subset])
    assert np.array_equal(a.decision_values(X), b.decision_values(X))


def test_json_round_trip(model, bench_data, tmp_path):
    model.save(tmp_path / "m.json")
    back = TrainedClassifier.load(tmp_path / "m.json")
    X = np.array([d.features() for d in bench_data[:60]])
    np.testing.assert_allclose(back.decision_values(X), model.decision_values(X), rtol=0, atol=1e-12)
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["version"] == 1 and doc["kernel"]["degree"] == 3
    doc["version"] = 99
    with pytest.raises(ValueError):
        TrainedClassifier.from_json(doc)


def test_margin_range_and_ties(model, bench_data):
    preds = predict_many(model, [d.absorbance for d in bench_data[::7]])
    for label, margin in preds:
        assert label in model.classes
        assert 0.0 <= margin <= 1.0


def test_training_error_names_subproblem(bench_data):
    subset = [d for d in bench_data if d.label in ("PP", "PET")]
    with pytest.raises(TrainingError) as info:
        train(subset, "SVM3", max_iter=1)
    assert "PET-vs-PP" in str(info.value)


def test_smo_iteration_cap():
    K = np.eye(4) + 1.0
    with pytest.raises(TrainingError):
        smo(K, np.array([1, 1, -1, -1]), 10.0, max_iter=0, name="x")


def test_preconditions(bench_data):
    few = [d for d in bench_data if d.label == "PP"][:4] + [d for d in bench_data if d.label == "PET"][:8]
    with pytest.raises(ValueError):
        train(few)
    with pytest.raises(ValueError):
        train([d for d in bench_data if d.label == "PP"])
    with pytest.raises(ValueError):
        train(bench_data, "SVM5")


def test_grid_mismatch(model):
    other = Spectrum(WavelengthGrid.linear(900, 1700, 100), np.zeros(100), "absorbance")
    with pytest.raises(GridMismatchError):
        predict(model, other)


def test_variants_select_rows(bench_data, model, model_plain):
    assert model.variant == "SVM3+I" and model_plain.variant == "SVM3"
    assert any(d.interferant for d in bench_data)
    # SVM3 never sees interferant rows: dropping them changes nothing.
    clean = [d for d in bench_data if not d.interferant]
    X = np.array([d.features() for d in bench_data[::11]])
    assert np.array_equal(train(clean, "SVM3").decision_values(X), model_plain.decision_values(X))
    assert not np.array_equal(train(clean, "SVM3+I").decision_values(X), model.decision_values(X))


def test_features_ignore_masks_and_offset(lib):
    a = noiseless(lib, "PP")
    shifted = Spectrum(a.grid, a.intensities + 0.05, "absorbance")
    np.testing.assert_allclose(spectrum_features(shifted), spectrum_features(a), atol=1e-12)
    vals = a.intensities.copy()
    mask = np.ones(vals.size, dtype=bool)
    mask[:10] = False
    vals[:10] = np.nan
    f = spectrum_features(Spectrum(a.grid, vals, "absorbance", mask))
    assert np.all(np.isfinite(f)) and np.all(f[:10] == 0)


def test_confusion_matrix(model, lib):
    test = [d for d in make_dataset(lib, 77, snrs=(2000,), n_clean=2, n_per_interferant=0) if d.label in TRIO]
    ev = evaluate(model, test)
    cm = ev.confusion
    assert cm.rows == tuple(sorted(TRIO))
    np.testing.assert_allclose(cm.normalized.sum(axis=1), 1.0)
    assert ev.accuracy == pytest.approx(np.trace(cm.counts[:, [cm.columns.index(r) for r in cm.rows]]) / cm.total)
    assert sum(ev.false_negatives.values()) == cm.total - cm.correct
    assert sum(ev.false_positives.values()) == cm.total - cm.correct
    with pytest.raises(ValueError):
        evaluate(model, [])


def test_confusion_csv(model, bench_data, tmp_path):
    ev = evaluate(model, bench_data[:40])
    ev.confusion.to_csv(tmp_path / "c.csv")
    head = (tmp_path / "c.csv").read_text().splitlines()[0].split(",")
    assert head[0] == "true\\predicted" and tuple(head[1:]) == model.classes


def test_accuracy_degrades_with_noise(lib, model_plain):
    accs = []
    for snr in (15000, 200, 50, 20):
        test = make_dataset(lib, 123, snrs=(snr,), n_clean=4, n_per_interferant=0)
        accs.append(evaluate(model_plain, test).accuracy)
    inversions = sum(b > a + 1e-12 for a, b in zip(accs, accs[1:]))
    assert inversions <= 1
    assert accs[0] > accs[-1]


def test_dataset_directory_round_trip(bench_data, tmp_path):
    rows = bench_data[:25]
    save_dataset(rows, tmp_path / "ds")
    assert (tmp_path / "ds" / "manifest.json").exists()
    back = load_dataset(tmp_path / "ds")
    assert [(d.label, d.snr, d.interferant) for d in back] == [(d.label, d.snr, d.interferant) for d in rows]
    for a, b in zip(rows, back):
        np.testing.assert_array_equal(a.features(), b.features())
