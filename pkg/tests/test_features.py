import numpy as np
import pytest

from raywatch import features, matrixio
from raywatch.errors import DimensionMismatch, FormatError, NonFiniteInput
from raywatch.features import (
    RankDeficientWarning,
    apply_scaler,
    fit_pca,
    fit_scaler,
    load_external_features,
    project,
    save_features,
)


def cov_eig_oracle(X, k):
    """Independent route: eigendecompose the covariance directly."""
    Xc = X - X.mean(axis=0)
    cov = (Xc.T @ Xc) / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    return evals[order][:k], evecs[:, order][:, :k]


class TestScaler:
    def test_hand_computed_column(self):
        s = fit_scaler(np.array([[1.0], [2.0], [3.0]]))
        assert s.means[0] == pytest.approx(2.0)
        assert s.scales[0] == pytest.approx(1.0)  # sample std of {1,2,3}

    def test_constant_column_gets_unit_scale(self):
        s = fit_scaler(np.full((3, 1), 5.0))
        assert s.means[0] == 5.0
        assert s.scales[0] == 1.0

    def test_single_row_scales_are_one(self):
        s = fit_scaler(np.array([[3.0, -1.0]]))
        assert s.scales.tolist() == [1.0, 1.0]

    def test_apply_identity_params(self):
        s = features.Scaler(means=np.zeros(2), scales=np.ones(2))
        X = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(apply_scaler(s, X), X)

    def test_apply_centers_and_scales(self):
        s = features.Scaler(means=np.array([2.0]), scales=np.array([4.0]))
        assert apply_scaler(s, np.array([[2.0]]))[0, 0] == 0.0

    def test_refit_on_scaled_data_is_standard(self):
        X = np.random.default_rng(0).normal(3.0, 2.5, size=(10, 4))
        Z = apply_scaler(fit_scaler(X), X)
        s2 = fit_scaler(Z)
        np.testing.assert_allclose(s2.means, 0.0, atol=1e-9)
        np.testing.assert_allclose(s2.scales, 1.0, atol=1e-9)

    def test_width_mismatch(self):
        s = fit_scaler(np.ones((2, 3)))
        with pytest.raises(DimensionMismatch):
            apply_scaler(s, np.ones((2, 4)))

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteInput):
            fit_scaler(np.array([[1.0], [np.nan]]))


class TestPca:
    def test_rank_one_line(self):
        X = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        t = fit_pca(X, k=1)
        np.testing.assert_allclose(t.components[:, 0], [1 / np.sqrt(2), 1 / np.sqrt(2)], atol=1e-12)
        # all variance on the single component: trace of cov = 1 + 1
        assert t.explained_variance[0] == pytest.approx(2.0)

    @pytest.mark.parametrize("trial", range(5))
    def test_gram_route_matches_covariance_route(self, trial):
        rng = np.random.default_rng(100 + trial)
        n, p = int(rng.integers(5, 61)), int(rng.integers(4, 201))
        X = rng.standard_normal((n, p)) @ np.diag(rng.uniform(0.5, 3.0, size=p))
        k = min(4, n - 1, p)
        t = fit_pca(X, k=k, method="gram")
        evals, evecs = cov_eig_oracle(X, k)
        np.testing.assert_allclose(t.explained_variance, evals[:k], rtol=1e-8, atol=1e-10)
        for j in range(k):
            v, w = t.components[:, j], evecs[:, j]
            assert min(np.abs(v - w).max(), np.abs(v + w).max()) < 1e-6

    def test_components_orthonormal(self):
        X = np.random.default_rng(3).standard_normal((20, 150))
        t = fit_pca(X, k=10, method="gram")
        gram = t.components.T @ t.components
        np.testing.assert_allclose(gram, np.eye(10), atol=1e-8)

    def test_projection_decorrelates(self):
        X = np.random.default_rng(4).standard_normal((40, 12))
        t = fit_pca(X, k=5)
        P = project(t, X)
        cov = np.cov(P, rowvar=False)
        np.testing.assert_allclose(cov - np.diag(np.diag(cov)), 0.0, atol=1e-6)

    def test_explained_variance_equals_projected_variance(self):
        X = np.random.default_rng(5).standard_normal((30, 9))
        t = fit_pca(X, k=4)
        P = project(t, X)
        np.testing.assert_allclose(P.var(axis=0, ddof=1), t.explained_variance, atol=1e-8)

    def test_mean_row_projects_to_zero(self):
        X = np.random.default_rng(6).standard_normal((15, 8))
        t = fit_pca(X, k=3)
        np.testing.assert_allclose(project(t, X.mean(axis=0).reshape(1, -1)), 0.0, atol=1e-10)

    def test_rank_one_projection_is_signed_distance(self):
        X = np.array([[1.0, 1.0], [2.0, 2.0], [4.0, 4.0]])
        t = fit_pca(X, k=1)
        P = project(t, X)[:, 0]
        centered = X - X.mean(axis=0)
        np.testing.assert_allclose(np.abs(P), np.linalg.norm(centered, axis=1), atol=1e-12)

    def test_full_rank_reconstruction(self):
        X = np.random.default_rng(7).standard_normal((9, 6))
        t = fit_pca(X, k=6)
        Xc = X - t.center
        np.testing.assert_allclose(Xc @ t.components @ t.components.T, Xc, atol=1e-6)

    def test_sign_canonicalization_is_deterministic(self):
        X = np.random.default_rng(8).standard_normal((12, 7))
        t = fit_pca(X, k=3)
        anchors = np.argmax(np.abs(t.components), axis=0)
        assert all(t.components[anchors[j], j] >= 0 for j in range(3))

    def test_rank_deficiency_flagged(self):
        base = np.random.default_rng(9).standard_normal((10, 2))
        X = np.hstack([base, base @ np.array([[1.0, 2.0], [3.0, 4.0]])])  # rank 2
        with pytest.warns(RankDeficientWarning):
            t = fit_pca(X, k=4)
        assert t.rank_deficient
        assert t.k == 2

    def test_k_out_of_range(self):
        X = np.random.default_rng(10).standard_normal((5, 3))
        with pytest.raises(DimensionMismatch):
            fit_pca(X, k=5)

    def test_project_width_mismatch(self):
        t = fit_pca(np.random.default_rng(11).standard_normal((6, 4)), k=2)
        with pytest.raises(DimensionMismatch):
            project(t, np.ones((2, 5)))


class TestExternalFeatures:
    def test_header_and_payload(self, tmp_path):
        path = tmp_path / "f.fmx"
        path.write_bytes(matrixio.matrix_to_bytes(np.arange(6.0).reshape(2, 3)))
        X = load_external_features(path)
        assert X.shape == (2, 3)
        assert X[1, 2] == 5.0

    def test_round_trip_bit_exact(self, tmp_path):
        X = np.random.default_rng(12).standard_normal((5, 7))
        path = tmp_path / "f.fmx"
        save_features(path, X)
        assert load_external_features(path).tobytes() == X.tobytes()

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "f.fmx"
        path.write_bytes(matrixio.matrix_to_bytes(np.ones((2, 2)))[:-4])
        with pytest.raises(FormatError):
            load_external_features(path)
