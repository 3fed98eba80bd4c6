import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from netope.errors import FormatError, ParameterError
from netope.ingest import (
    ingest,
    load_dataset,
    pca,
    pca_rank_order,
    pca_reduce,
    read_features,
    read_prepared,
    top_eigenpairs,
    write_prepared,
)
from netope.graph import generate_erdos_renyi


def _eigh_top(C, k):
    vals, vecs = np.linalg.eigh(C)
    return vals[::-1][:k], vecs[:, ::-1][:, :k]


def _write_features(path, X):
    np.savetxt(path, X, delimiter=",", fmt="%.17g")


class TestTopEigenpairs:
    @pytest.mark.parametrize("d, k", [(5, 2), (30, 10), (80, 10), (12, 12)])
    def test_matches_dense_solver(self, rng, d, k):
        B = rng.standard_normal((3 * d, d)) * np.linspace(3, 0.1, d)
        C = B.T @ B / (3 * d)
        vals, vecs = top_eigenpairs(C, k)
        ref_vals, ref_vecs = _eigh_top(C, k)
        assert np.allclose(vals, ref_vals, atol=1e-8 * ref_vals[0], rtol=0)
        # eigenvectors agree up to sign
        overlap = np.abs(np.sum(vecs * ref_vecs, axis=0))
        assert np.allclose(overlap, 1.0, atol=1e-8)

    def test_invalid_k(self):
        with pytest.raises(ParameterError):
            top_eigenpairs(np.eye(3), 4)


class TestPCA:
    def test_one_dimensional_subspace_reconstructed(self, rng):
        direction = np.array([1.0, 2.0, -2.0]) / 3.0
        t = rng.standard_normal(100)
        X = np.outer(t, direction) + 5.0
        res = pca(X, 1)
        recon = res.scores @ res.components.T + res.mean
        assert np.max(np.abs(recon - X)) < 1e-10
        assert res.variance_captured == pytest.approx(1.0, abs=1e-12)

    def test_full_rank_preserves_variance(self, rng):
        X = rng.standard_normal((50, 6))
        res = pca(X, 6)
        Xc = X - X.mean(axis=0)
        assert res.scores.var(axis=0, ddof=1).sum() == pytest.approx(Xc.var(axis=0, ddof=1).sum(), rel=1e-10)
        assert np.allclose(res.scores @ res.components.T, Xc, atol=1e-10)

    def test_matches_dense_projection(self, rng):
        X = rng.standard_normal((200, 25)) @ rng.standard_normal((25, 25))
        res = pca(X, 10)
        Xc = X - X.mean(axis=0)
        _, ref = _eigh_top(np.cov(Xc, rowvar=False), 10)
        ref_scores = Xc @ ref
        assert np.allclose(np.abs(res.scores), np.abs(ref_scores), atol=1e-8)

    def test_sign_convention(self, rng):
        res = pca(rng.standard_normal((40, 5)), 3)
        V = res.components
        idx = np.argmax(np.abs(V), axis=0)
        assert np.all(V[idx, np.arange(3)] > 0)

    def test_scaling_standardizes(self, rng):
        X = rng.standard_normal((60, 4)) * [1.0, 10.0, 100.0, 1000.0]
        res = pca(X, 4, scale=True)
        # unit population variance per column, covariance taken with n - 1
        assert res.total_variance == pytest.approx(4 * 60 / 59, rel=1e-12)

    @given(st.integers(0, 2**31))
    def test_row_order_invariance(self, seed):
        r = np.random.default_rng(seed)
        X = r.standard_normal((30, 5)) * np.arange(1, 6)
        perm = r.permutation(30)
        a, b = pca_reduce(X, 3), pca_reduce(X[perm], 3)
        assert np.allclose(b, a[perm], atol=1e-9)

    @pytest.mark.parametrize("k", [0, 6])
    def test_invalid_k(self, rng, k):
        with pytest.raises(ParameterError):
            pca(rng.standard_normal((10, 5)), k)

    def test_blogcatalog_shape(self):
        """5196 units with 2246 sparse binary attributes reduce to 10 dimensions."""
        r = np.random.default_rng(7)
        n, d = 5196, 2246
        X = (r.random((n, d)) < 0.01).astype(float)
        X[:, :20] += r.standard_normal((n, 1)) * np.linspace(2, 0.5, 20)
        res = pca(X, 10)
        assert res.scores.shape == (n, 10)
        assert np.all(np.isfinite(res.scores))
        assert np.all(np.diff(res.eigenvalues) <= 0)
        assert np.allclose(res.scores.mean(axis=0), 0.0, atol=1e-10)


class TestRankOrder:
    def test_small_example(self):
        order = pca_rank_order(np.array([[3.0], [1.0], [2.0]]))
        assert order.tolist() in ([1, 2, 0], [0, 2, 1])

    def test_identical_features(self):
        assert pca_rank_order(np.ones((5, 3))).tolist() == [0, 1, 2, 3, 4]

    def test_is_permutation(self, rng):
        order = pca_rank_order(rng.standard_normal((100, 4)))
        assert sorted(order.tolist()) == list(range(100))

    def test_ties_broken_by_index(self):
        order = pca_rank_order(np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 0.0]]))
        assert order.tolist() in ([1, 3, 0, 2], [0, 2, 1, 3])

    def test_other_components_unsupported(self, rng):
        with pytest.raises(ParameterError):
            pca_rank_order(rng.standard_normal((5, 2)), component=2)


class TestLoading:
    def test_features_round_trip(self, tmp_path, rng):
        X = rng.standard_normal((7, 3))
        _write_features(tmp_path / "f.csv", X)
        assert np.array_equal(read_features(tmp_path / "f.csv"), X)

    @pytest.mark.parametrize("body, line", [("1,2\n3\n", 2), ("1,2\n3,x\n", 2), ("a,b\n", 1)])
    def test_feature_format_errors(self, tmp_path, body, line):
        p = tmp_path / "f.csv"
        p.write_text(body)
        with pytest.raises(FormatError, match=f":{line}:"):
            read_features(p)

    def test_empty_features(self, tmp_path):
        p = tmp_path / "f.csv"
        p.write_text("\n")
        with pytest.raises(FormatError):
            read_features(p)

    def test_cleaning_stats(self, tmp_path, rng):
        _write_features(tmp_path / "f.csv", rng.standard_normal((4, 2)))
        (tmp_path / "e.txt").write_text("0 1\n1 0\n2 2\n2 3\n0 1\n")
        ds = load_dataset(tmp_path / "f.csv", tmp_path / "e.txt")
        assert ds.n_edges == 2
        assert ds.stats["self_loops"] == 1 and ds.stats["duplicates"] == 2
        assert (ds.n, ds.d_raw) == (4, 2)

    def test_edge_endpoint_beyond_features(self, tmp_path, rng):
        _write_features(tmp_path / "f.csv", rng.standard_normal((3, 2)))
        (tmp_path / "e.txt").write_text("0 1\n1 3\n")
        with pytest.raises(FormatError, match=":2:"):
            load_dataset(tmp_path / "f.csv", tmp_path / "e.txt")


class TestPrepared:
    def test_write_read_idempotent(self, tmp_path, rng):
        X = rng.standard_normal((20, 3))
        g = generate_erdos_renyi(20, 0.2, rng)
        write_prepared(tmp_path / "a", X, g, {"k": 3})
        X1, g1, m1 = read_prepared(tmp_path / "a")
        write_prepared(tmp_path / "b", X1, g1, m1)
        for name in ("contexts.csv", "edges.txt", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert np.array_equal(X1, X) and np.array_equal(g1.edges, g.edges)

    def test_ingest_manifest(self, tmp_path, rng):
        X = rng.standard_normal((30, 6))
        _write_features(tmp_path / "f.csv", X)
        (tmp_path / "e.txt").write_text("0 1\n1 2\n2 2\n1 0\n")
        manifest = ingest(tmp_path / "f.csv", tmp_path / "e.txt", 2, tmp_path / "out")
        assert manifest["n"] == 30 and manifest["edges"] == 2 and manifest["d_raw"] == 6 and manifest["k"] == 2
        assert manifest["self_loops_dropped"] == 1 and manifest["duplicates_dropped"] == 1
        assert 0 < manifest["variance_captured"] <= 1
        assert json.loads((tmp_path / "out" / "manifest.json").read_text()) == manifest
        ctx, g, _ = read_prepared(tmp_path / "out")
        assert np.allclose(ctx, pca_reduce(X, 2), atol=1e-12)
        assert g.n == 30
