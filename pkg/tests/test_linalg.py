import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fairembed.errors import ConfigError, InsufficientDataError
from fairembed.linalg import (PcaEmbedder, SymEigen, canonicalize_signs, covariance_contribution, fit_pca,
                              pca_embed, pca_from_covariance, pca_jacobian_transpose_apply,
                              relative_projection_distance, sample_covariance, sym_eig)
from fairembed.synthetic import Group, HierarchicalGaussianParams, sample_dataset

from conftest import default_params, make_params


def test_sample_covariance_hand():
    cov, mean = sample_covariance([[1, 0], [-1, 0]])
    assert np.array_equal(mean, [0, 0])
    assert np.array_equal(cov, [[2, 0], [0, 0]])
    cov, _ = sample_covariance(np.ones((5, 3)))
    assert np.array_equal(cov, np.zeros((3, 3)))
    with pytest.raises(InsufficientDataError):
        sample_covariance([[1, 2]])


@given(arrays(float, st.tuples(st.integers(2, 12), st.integers(1, 6)), elements=st.floats(-100, 100)))
def test_sample_covariance_symmetric_and_matches_numpy(x):
    cov, mean = sample_covariance(x)
    assert np.array_equal(cov, cov.T)
    assert np.allclose(cov, np.atleast_2d(np.cov(x, rowvar=False)), atol=1e-9)


def test_sym_eig_examples():
    e = sym_eig(np.eye(3))
    assert np.allclose(e.eigenvalues, 1)
    e = sym_eig([[2.0, 1.0], [1.0, 2.0]])
    assert np.allclose(e.eigenvalues, [3, 1], atol=1e-14)
    assert np.allclose(np.abs(e.eigenvectors[:, 0]), [1 / np.sqrt(2)] * 2)
    assert np.allclose(np.abs(e.eigenvectors[:, 1]), [1 / np.sqrt(2)] * 2)
    assert e.eigenvectors[0, 1] * e.eigenvectors[1, 1] < 0
    e = sym_eig(np.diag([5.0, 2.0]))
    assert np.allclose(e.eigenvalues, [5, 2]) and np.allclose(e.eigenvectors, np.eye(2))


def test_sym_eig_rejects_nonsymmetric():
    with pytest.raises(ValueError):
        sym_eig([[1.0, 2.0], [0.0, 1.0]])


@given(st.integers(1, 64), st.integers(0, 2 ** 32 - 1))
def test_sym_eig_invariants_vs_numpy(d, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(d, d))
    a = (a + a.T) / 2
    e = sym_eig(a)
    q, lam = e.eigenvectors, e.eigenvalues
    assert np.all(np.diff(lam) <= 0)
    assert np.allclose(q.T @ q, np.eye(d), atol=1e-9)
    assert np.linalg.norm(e.reconstruct() - a) <= 1e-8 * max(np.linalg.norm(a), 1e-300)
    ref = np.linalg.eigvalsh(a)[::-1]
    assert np.allclose(lam, ref, atol=1e-10 * max(1, np.abs(ref).max()))


def test_sym_eig_ties_span_same_subspace():
    # repeated eigenvalue: compare projectors, not vectors
    rng = np.random.default_rng(1)
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    a = q @ np.diag([4, 2, 2, 1, 0.5]) @ q.T
    e = sym_eig((a + a.T) / 2)
    p1 = e.eigenvectors[:, 1:3] @ e.eigenvectors[:, 1:3].T
    p2 = q[:, 1:3] @ q[:, 1:3].T
    assert np.allclose(p1, p2, atol=1e-9)


def test_canonical_signs():
    v = canonicalize_signs(np.array([[0.1, 0.6], [-0.9, -0.8]]))
    assert v[1, 0] > 0 and v[0, 1] < 0 and v[1, 1] > 0


def test_fit_pca_examples():
    x = np.array([[-2.0, 0], [-1, 0], [1, 0], [2, 0]])
    emb = fit_pca(x, 1)
    assert np.allclose(emb.components[:, 0], [1, 0])
    emb = pca_from_covariance(np.diag([5.0, 2.0, 1.0]), 2)
    assert np.allclose(emb.components, np.eye(3)[:, :2])
    with pytest.raises(ConfigError):
        fit_pca(x, 3)


def test_full_rank_pca_is_isometry():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 5))
    emb = fit_pca(x, 5)
    e = emb.embed(x)
    for i, j in [(0, 1), (3, 7), (10, 49)]:
        assert np.linalg.norm(e[i] - e[j]) == pytest.approx(np.linalg.norm(x[i] - x[j]), rel=1e-12)
    back = pca_jacobian_transpose_apply(emb, e[4])
    assert np.allclose(back, x[4] - emb.mean, atol=1e-12)


def test_embed_and_adjoint_examples():
    emb = PcaEmbedder(np.zeros(2), np.array([[1.0], [0.0]]), np.array([1.0]))
    assert pca_embed(emb, [3.0, 4.0]) == pytest.approx([3.0])
    assert np.array_equal(pca_jacobian_transpose_apply(emb, [0.0]), [0.0, 0.0])
    with pytest.raises(ValueError):
        pca_embed(emb, [1.0, 2.0, 3.0])


@given(st.integers(0, 2 ** 32 - 1))
def test_adjointness(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(30, 6))
    emb = fit_pca(x, 3)
    v, u = rng.normal(size=6), rng.normal(size=3)
    lhs = emb.embed(v) @ u
    rhs = (v - emb.mean) @ pca_jacobian_transpose_apply(emb, u)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))
    assert np.allclose(emb.components.T @ emb.components, np.eye(3), atol=1e-9)


def test_embedder_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    emb = fit_pca(rng.normal(size=(20, 4)), 2)
    back = PcaEmbedder.from_csv(emb.to_csv(tmp_path / "e.csv"))
    assert np.array_equal(back.mean, emb.mean) and np.array_equal(back.components, emb.components)


def _params_2d(sigma=(1.0, 1.0)):
    return HierarchicalGaussianParams(d=2, gamma=1.0, beta=0.1, alpha=0.5, mu_a=[1, 0], sigma_b_diag=sigma,
                                      n_identities_a=1, n_identities_b=1, m=1)


def test_relative_projection_distance_examples():
    eig = SymEigen(np.array([1.0, 1.0]), np.eye(2))
    p = _params_2d()
    assert relative_projection_distance([2.0, 0.0], eig, p, Group.A, 2, "as_written") == pytest.approx(0.5)
    assert relative_projection_distance([0.6, 0.8], eig, p, Group.A, 2, "as_written") == pytest.approx(0, abs=1e-15)
    rng = np.random.default_rng(0)
    for x in rng.normal(size=(5, 2)):
        assert relative_projection_distance(x, eig, p, Group.B, 2, "orthogonal") == pytest.approx(0, abs=1e-15)
    with pytest.raises(ValueError):
        relative_projection_distance([0.0, 0.0], eig, p, Group.A, 1, "as_written")


def test_relative_projection_distance_batch_matches_single():
    p = make_params()
    ds = sample_dataset(p)
    cov, _ = sample_covariance(ds.x)
    eig = sym_eig(cov)
    batch = relative_projection_distance(ds.x[:7], eig, p, Group.A, 2)
    single = [relative_projection_distance(x, eig, p, Group.A, 2) for x in ds.x[:7]]
    assert np.allclose(batch, single, rtol=1e-14)


def test_covariance_contribution():
    p = HierarchicalGaussianParams(d=3, gamma=1.0, beta=0.1, alpha=0.5, mu_a=[1, 0, 0],
                                   sigma_b_diag=[1, 2, 3], n_identities_a=1, n_identities_b=1, m=1)
    assert covariance_contribution(p, Group.A, 2) == pytest.approx(3.1)
    assert covariance_contribution(p, Group.B, 0) == pytest.approx(0.1)
    for k in range(4):
        assert covariance_contribution(p, Group.A, k) == covariance_contribution(p, Group.B, k)


def test_covariance_contribution_anticorrelates_with_distance():
    """Across a gamma sweep, larger contribution goes with smaller mean relative distance (per group)."""
    gammas = [0.01, 0.1, 0.5, 1.0]
    for g in Group:
        contrib, dist = [], []
        for gamma in gammas:
            p = default_params(gamma=gamma, seed=4, n=150, m=4)
            ds = sample_dataset(p)
            cov, _ = sample_covariance(ds.x)
            eig = sym_eig(cov)
            contrib.append(covariance_contribution(p, g, 3))
            dist.append(relative_projection_distance(ds.images_of(g), eig, p, g, 3).mean())
        rank_c, rank_d = np.argsort(np.argsort(contrib)), np.argsort(np.argsort(dist))
        if len(set(contrib)) == len(contrib):
            assert np.corrcoef(rank_c, rank_d)[0, 1] == pytest.approx(-1.0)


@pytest.mark.parametrize("gamma", [0.01, 0.1, 0.5])
def test_group_with_larger_contribution_has_smaller_distance(gamma):
    p = default_params(gamma=gamma, seed=4, n=150, m=4)
    ds = sample_dataset(p)
    cov, _ = sample_covariance(ds.x)
    eig = sym_eig(cov)
    dist = {g: relative_projection_distance(ds.images_of(g), eig, p, g, 3).mean() for g in Group}
    assert covariance_contribution(p, Group.B, 3) > covariance_contribution(p, Group.A, 3)
    assert dist[Group.B] < dist[Group.A]
