import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rfforensics.detector import (DetectionReport, DetectorConfig, conditional_affinities, detect_backdoor,
                                  detect_features, export_csv, joint_affinities, mahalanobis_detect,
                                  mahalanobis_distances, mahalanobis_fit, pca_fit, pca_inverse, pca_transform,
                                  stratified_split, svm_objective, svm_predict, svm_train, trigger_response,
                                  tsne_embed)
from rfforensics.detector.mahalanobis import calibration_distances, shrunk_covariance
from rfforensics.detector.tsne import pairwise_sq_dists
from rfforensics.errors import ConfigError, DataError
from rfforensics.nncore import TrainConfig, preset, train


def _blobs(seed=0, n=20, f=5, sep=100.0, spread=1.0):
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, spread, (n, f))
    b = rng.normal(0.0, spread, (n, f)) + sep / np.sqrt(f)
    return np.vstack([a, b]), np.repeat([0, 1], n)


# -- PCA --------------------------------------------------------------------------

def test_pca_collinear_points_full_ratio():
    t = np.linspace(-3, 3, 25)
    x = np.stack([t, 2 * t + 1], axis=1)
    proj = pca_fit(x, 1)
    assert proj.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-12)


def test_pca_transform_of_mean_is_zero(rng):
    x = rng.normal(size=(30, 6))
    proj = pca_fit(x, 3)
    assert np.allclose(pca_transform(proj, x.mean(axis=0, keepdims=True)), 0.0, atol=1e-12)


@given(seed=st.integers(0, 2**31), k=st.integers(1, 6))
def test_pca_reconstruction_error_equals_discarded_eigenvalues(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(40, 6)) @ rng.normal(size=(6, 6))
    proj = pca_fit(x, k)
    recon = pca_inverse(proj, pca_transform(proj, x))
    err = np.sum((x - recon) ** 2) / (x.shape[0] - 1)
    eig = np.sort(np.linalg.eigvalsh(np.cov(x, rowvar=False)))[::-1]
    assert err == pytest.approx(eig[k:].sum(), abs=1e-6 * max(1.0, eig.sum()))


@given(seed=st.integers(0, 2**31))
def test_pca_components_orthonormal_with_sign_convention(seed):
    x = np.random.default_rng(seed).normal(size=(20, 8))
    comp = pca_fit(x, 5).components
    assert np.allclose(comp @ comp.T, np.eye(5), atol=1e-8)
    for row in comp:
        assert row[np.argmax(np.abs(row))] > 0


def test_pca_bad_k_and_tiny_input():
    with pytest.raises(ConfigError):
        pca_fit(np.zeros((5, 3)), 4)
    with pytest.raises(ConfigError):
        pca_fit(np.zeros((5, 3)), 0)
    with pytest.raises(DataError):
        pca_fit(np.zeros((1, 3)), 1)


# -- t-SNE ------------------------------------------------------------------------

def test_affinity_entropy_n8_perplexity2_is_one_bit(rng):
    x = rng.normal(size=(8, 3))
    _, ent = conditional_affinities(pairwise_sq_dists(x), 2.0)
    assert np.all(np.abs(ent - 1.0) < 1e-4)


@given(seed=st.integers(0, 2**31), perp=st.floats(2.0, 10.0))
def test_affinity_contract(seed, perp):
    x = np.random.default_rng(seed).normal(size=(40, 4))
    P, ent = joint_affinities(x, perp)
    assert np.all(np.abs(ent - np.log2(perp)) < 1e-4)
    assert np.allclose(P, P.T, atol=1e-12)
    assert abs(P.sum() - 1.0) < 1e-9
    assert np.all(np.diag(P) == 0)


def test_tsne_separates_blobs_and_kl_settles():
    x, lab = _blobs()
    emb = tsne_embed(x, perplexity=5, iterations=500, seed=1)
    y = emb.coords
    d = np.sqrt(pairwise_sq_dists(y))
    same = lab[:, None] == lab[None, :]
    off = ~np.eye(len(lab), dtype=bool)
    assert d[same & off].mean() < d[~same].mean()
    assert all(v >= 0 for v in emb.kl_history)
    tail = np.array(emb.kl_history[-50:])
    assert np.all(np.diff(tail) <= 1e-3)
    assert np.all(np.diff(emb.kl_history[emb.params["exaggeration_iters"] + 1:]) <= 0)
    assert np.all(np.isfinite(y))


@pytest.mark.parametrize("init", ["random", "pca"])
def test_tsne_deterministic_and_translation_invariant(init):
    # dyadic data and shift keep every floating-point difference exact
    x = np.round(_blobs(seed=2, n=12)[0] * 1024) / 1024
    a = tsne_embed(x, perplexity=4, iterations=120, seed=5, init=init)
    b = tsne_embed(x, perplexity=4, iterations=120, seed=5, init=init)
    c = tsne_embed(x + 17.5, perplexity=4, iterations=120, seed=5, init=init)
    assert a.coords.tobytes() == b.coords.tobytes()
    assert a.coords.tobytes() == c.coords.tobytes()
    assert a.params["init"] == init and a.params["seed"] == 5


def test_tsne_rejects_infeasible_inputs(rng):
    with pytest.raises(ConfigError):
        tsne_embed(rng.normal(size=(20, 2)), perplexity=30)
    with pytest.raises(ConfigError):
        tsne_embed(rng.normal(size=(7, 2)), perplexity=1.5)
    with pytest.raises(ConfigError):
        tsne_embed(rng.normal(size=(20, 2)), perplexity=3, init="spectral")
    with pytest.raises(DataError):
        tsne_embed(np.full((10, 2), np.nan), perplexity=2)


# -- SVM --------------------------------------------------------------------------

@pytest.mark.parametrize("kernel", ["linear", "rbf"])
def test_svm_separable_blobs_perfect(kernel):
    x, lab = _blobs(n=30, f=2, sep=10.0)
    y = np.where(lab == 1, 1, -1)
    model = svm_train(x, y, lam=1e-3, epochs=40, kernel=kernel)
    assert np.array_equal(svm_predict(model, x), y)


def test_svm_label_flip_inverts_predictions():
    x, lab = _blobs(n=30, f=2, sep=10.0)
    y = np.where(lab == 1, 1, -1)
    m1 = svm_train(x, y, lam=1e-2, epochs=30, seed=3)
    m2 = svm_train(x, -y, lam=1e-2, epochs=30, seed=3)
    assert np.dot(m1.weights, m2.weights) < 0
    assert np.array_equal(svm_predict(m1, x), -svm_predict(m2, x))


@given(seed=st.integers(0, 2**31), lam=st.floats(1e-3, 1.0))
def test_svm_objective_not_worse_than_zero_model(seed, lam):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(40, 3))
    y = np.where(rng.random(40) < 0.5, -1, 1)
    y[:2] = [-1, 1]
    m = svm_train(x, y, lam=lam, epochs=10, seed=seed)
    assert svm_objective(m.weights, m.bias, x, y, lam) <= svm_objective(np.zeros(3), 0.0, x, y, lam) + 1e-12
    assert np.all(np.isfinite(m.weights)) and np.isfinite(m.bias)


def test_svm_deterministic_and_zero_maps_positive():
    x, lab = _blobs(n=10, f=2, sep=10.0)
    y = np.where(lab == 1, 1, -1)
    a = svm_train(x, y, seed=4)
    b = svm_train(x, y, seed=4)
    assert np.array_equal(a.weights, b.weights) and a.bias == b.bias
    zero = type(a)(np.zeros(2), 0.0, 1e-2, {})
    assert np.all(svm_predict(zero, x) == 1)


def test_svm_input_errors():
    x = np.zeros((4, 2))
    with pytest.raises(DataError):
        svm_train(x, np.ones(4))
    with pytest.raises(DataError):
        svm_train(x, np.array([0, 1, 0, 1]))
    with pytest.raises(ConfigError):
        svm_train(x, np.array([-1, 1, -1, 1]), lam=0.0)
    with pytest.raises(ConfigError):
        svm_train(x, np.array([-1, 1, -1, 1]), kernel="poly")


# -- Mahalanobis -----------------------------------------------------------------

def test_identity_covariance_gives_euclidean(rng):
    mu = rng.normal(size=4)
    x = rng.normal(size=(10, 4))
    assert np.allclose(mahalanobis_distances(mu, np.eye(4), x), np.linalg.norm(x - mu, axis=1))


@given(seed=st.integers(0, 2**31), c=st.floats(0.01, 100.0))
def test_scaling_inverse_covariance_scales_distance(seed, c):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(30, 3))
    base = mahalanobis_fit(x)
    d = mahalanobis_distances(base.mean, base.inv_cov, x)
    dc = mahalanobis_distances(base.mean, c * base.inv_cov, x)
    assert np.all(d >= 0)
    assert np.allclose(dc, np.sqrt(c) * d, rtol=1e-9, atol=1e-12)


def test_baseline_inverse_is_spd_and_shrunk(rng):
    x = rng.normal(size=(6, 10))   # fewer rows than features
    base = mahalanobis_fit(x)
    assert np.allclose(base.inv_cov, base.inv_cov.T)
    np.linalg.cholesky(np.linalg.inv(base.inv_cov))
    cov = shrunk_covariance(x, 0.05)
    assert np.allclose(np.linalg.inv(base.inv_cov), cov, atol=1e-8)


def test_thresholds_follow_definitions(rng):
    x = rng.normal(size=(200, 3))
    base = mahalanobis_fit(x, percentile=90, mean_factor=2.0, folds=0)
    d = mahalanobis_distances(base.mean, base.inv_cov, x)
    assert base.mean_threshold == pytest.approx(2.0 * d.mean())
    assert base.max_threshold == pytest.approx(np.percentile(d, 90))
    flags, dist = mahalanobis_detect(base, x, "max")
    assert np.array_equal(flags, dist > base.max_threshold)


def test_cross_fitted_thresholds_use_out_of_fold_distances(rng):
    x = rng.normal(size=(50, 3))
    base = mahalanobis_fit(x, percentile=90, mean_factor=2.0, folds=5)
    d = np.empty(50)
    for k in range(5):
        out = np.arange(50) % 5 == k
        inner = mahalanobis_fit(x[~out], folds=0)
        d[out] = mahalanobis_distances(inner.mean, inner.inv_cov, x[out])
    assert np.allclose(calibration_distances(x, folds=5), d)
    assert base.mean_threshold == pytest.approx(2.0 * d.mean())
    assert base.max_threshold == pytest.approx(np.percentile(d, 90))
    # mean and covariance still come from every clean row
    assert np.allclose(base.mean, x.mean(axis=0))
    # out-of-fold distances run larger than in-sample ones
    assert d.mean() > mahalanobis_distances(base.mean, base.inv_cov, x).mean()


def test_max_mode_held_out_calibration():
    rng = np.random.default_rng(0)
    cov = np.diag([1.0, 4.0, 0.25, 2.0])
    base = mahalanobis_fit(rng.multivariate_normal(np.zeros(4), cov, 4000), percentile=98)
    flags, _ = mahalanobis_detect(base, rng.multivariate_normal(np.zeros(4), cov, 4000), "max")
    assert abs(flags.mean() - 0.02) < 0.01


def test_mahalanobis_errors(rng):
    with pytest.raises(DataError):
        mahalanobis_fit(np.zeros((1, 3)))
    base = mahalanobis_fit(rng.normal(size=(10, 2)))
    with pytest.raises(ConfigError):
        mahalanobis_detect(base, rng.normal(size=(3, 2)), "median")


# -- end-to-end detection on features ---------------------------------------------

def _feature_sets(seed=0, n=40, f=6, shift=6.0):
    rng = np.random.default_rng(seed)
    clean = rng.normal(size=(n, f))
    sus_clean = rng.normal(size=(n // 2, f))
    sus_trig = rng.normal(size=(n // 2, f)) + shift
    return clean, np.vstack([sus_clean, sus_trig]), np.repeat([False, True], n // 2)


FAST = DetectorConfig(perplexity=5, tsne_iterations=250, svm_epochs=30)


@pytest.mark.parametrize("mode", ["tsne-svm", "pca-svm", "mahalanobis"])
def test_detect_features_separated_sets(mode):
    clean, sus, truth = _feature_sets()
    rep = detect_features(clean, sus, truth, mode, FAST)
    assert rep.accuracy >= 0.95 and rep.recall >= 0.95
    assert rep.clean_count == 40 and rep.suspect_count == 40
    if mode == "mahalanobis":
        assert rep.evaluated_count == 40
        assert set(rep.flagged_suspects) >= set(range(20, 40))
    else:
        assert rep.evaluated_count == 80 - rep.params["train_rows"]
    assert (rep.embedding is not None) == (mode == "tsne-svm")


def test_identical_suspects_match_all_clean_labeling(rng):
    clean = rng.normal(size=(300, 4))
    cfg = DetectorConfig(mahalanobis_mode="max")
    rep = detect_features(clean, clean.copy(), np.zeros(300, bool), "mahalanobis", cfg)
    assert rep.accuracy == pytest.approx(1.0 - rep.suspect_flag_fraction)
    assert rep.suspect_flag_fraction <= 0.05


def test_detect_features_without_truth_reports_flags_only():
    clean, sus, _ = _feature_sets()
    rep = detect_features(clean, sus, None, "mahalanobis", FAST)
    assert rep.accuracy is None and rep.recall is None
    assert rep.detection_score == rep.suspect_flag_fraction


def test_detect_features_input_errors():
    clean, sus, truth = _feature_sets()
    with pytest.raises(ConfigError):
        detect_features(clean, sus, truth, "kmeans")
    with pytest.raises(DataError):
        detect_features(clean[:0], sus, truth, "mahalanobis")
    with pytest.raises(DataError):
        detect_features(clean, sus[:, :3], truth, "mahalanobis")
    with pytest.raises(DataError):
        detect_features(clean, sus, truth[:5], "mahalanobis")
    with pytest.raises(DataError):
        detect_features(clean, sus, np.zeros(40, bool), "pca-svm")


def test_detector_config_validation():
    with pytest.raises(ConfigError):
        DetectorConfig(perplexity=0.5)
    with pytest.raises(ConfigError):
        DetectorConfig(svm_kernel="poly")


def test_stratified_split_keeps_class_ratio():
    labels = np.repeat([False, True], [70, 30])
    tr, te = stratified_split(labels, 0.7, 0)
    assert np.intersect1d(tr, te).size == 0 and tr.size + te.size == 100
    assert labels[tr].sum() == 21 and (~labels[tr]).sum() == 49
    assert np.array_equal(tr, stratified_split(labels, 0.7, 0)[0])


def test_trigger_response_shift():
    r = trigger_response(np.array([0, 1, 2, 3]), np.array([2, 2, 2, 1]), 4)
    assert r["dominant_class"] == 2
    assert r["shift"] == pytest.approx(0.75 - 0.25)


def test_report_round_trip_and_csv(tmp_path):
    clean, sus, truth = _feature_sets(n=20)
    rep = detect_features(clean, sus, truth, "tsne-svm", DetectorConfig(perplexity=4, tsne_iterations=100))
    assert DetectionReport.from_dict(rep.to_dict()).to_dict() == rep.to_dict()
    export_csv(rep, tmp_path / "e.csv", "embedding")
    export_csv(rep, tmp_path / "f.csv", "features")
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["row", "source", "tsne_x", "tsne_y", "ground_truth", "predicted"]
    assert len(rows) == 41 and rows[1][1] == "clean" and rows[-1][1] == "suspect"
    assert len(next(csv.reader(open(tmp_path / "f.csv")))) == 2 + 6 + 2
    maha = detect_features(clean, sus, truth, "mahalanobis")
    with pytest.raises(ConfigError):
        export_csv(maha, tmp_path / "x.csv", "embedding")


def test_detect_backdoor_on_model(small_ds):
    ckpt, _ = train(small_ds, preset("tiny", small_ds.frame_len, 4), TrainConfig(epochs=2, batch_size=16))
    test = small_ds.indices("test")
    clean = small_ds.iq[test]
    rep = detect_backdoor(ckpt, clean, clean.copy(), np.zeros(test.size, bool), "mahalanobis",
                          DetectorConfig(mahalanobis_mode="max"))
    assert rep.params["subject_hash"] == ckpt.content_hash
    assert rep.trigger_response["shift"] == 0.0
    assert rep.malware_detected is False
