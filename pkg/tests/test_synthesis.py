import numpy as np
import pytest
from scipy.stats import ks_2samp

from tadlab.core import ContractError, make_rng, one_class_split
from tadlab.detectors import knn, ocsvm
from tadlab.eval import auroc
from tadlab.synthesis import (
    TOY_NAMES,
    ImportanceRanking,
    ToySpec,
    corrupt,
    fit_gmm,
    forest_importance,
    make_toy,
    synthesize_anomalies,
)


def test_gmm_single_component_closed_form():
    X = make_rng(0).normal(size=(400, 3)) @ np.array([[1, 0.5, 0], [0, 1, 0.2], [0, 0, 2.0]])
    g = fit_gmm(X, [1], seed=0)
    np.testing.assert_allclose(g.means[0], X.mean(axis=0), atol=1e-9)
    np.testing.assert_allclose(g.covariances[0], np.cov(X.T, bias=True), atol=1e-9)
    assert g.weights[0] == 1.0


def test_gmm_selects_two_blobs():
    rng = make_rng(1)
    centers = np.array([[6.0, 0.0], [-6.0, 2.0]])
    X = np.r_[rng.normal(size=(300, 2)) + centers[0], rng.normal(size=(300, 2)) + centers[1]]
    g = fit_gmm(X, [1, 2], seed=0)
    assert g.K == 2
    got = g.means[np.argsort(-g.means[:, 0])]
    assert np.all(np.abs(got - centers) < 0.2)
    assert np.all(np.diff(g.history) >= -1e-9)
    assert abs(g.weights.sum() - 1.0) < 1e-12


def test_gmm_covariances_are_pd_and_floored():
    X = np.c_[make_rng(2).normal(size=100), np.zeros(100)]
    with pytest.warns(RuntimeWarning, match="floored"):
        g = fit_gmm(X, [1, 2], seed=0)
    for S in g.covariances:
        np.testing.assert_array_equal(S, S.T)
        assert np.linalg.eigvalsh(S).min() >= 1e-6 * (1 - 1e-9)


def test_gmm_contracts():
    with pytest.raises(ContractError):
        fit_gmm(np.zeros((5, 2)), [3])


def test_local_covariance_scaling():
    g = fit_gmm(make_rng(3).normal(size=(3000, 2)), [1], seed=0)
    A = synthesize_anomalies("local", np.zeros((2, 2)), 100_000, seed=1, gmm=g)
    target = 2 * g.covariances[0]
    assert np.all(np.abs(np.cov(A.T) - target) <= 0.1 * np.abs(target).max())
    np.testing.assert_allclose(np.diag(np.cov(A.T)), np.diag(target), rtol=0.1)


def test_cluster_mean_scaling():
    g = fit_gmm(make_rng(4).normal(size=(3000, 2)) + [3.0, 0.0], [1], seed=0)
    A = synthesize_anomalies("cluster", np.zeros((2, 2)), 100_000, seed=1, gmm=g)
    assert np.all(np.abs(A.mean(axis=0) - 2 * g.means[0]) <= 0.1)
    assert np.all(np.abs(A.mean(axis=0) - [6.0, 0.0]) <= 0.15)


def test_global_range():
    T = np.c_[np.linspace(0, 10, 30), np.linspace(-4, 6, 30)]
    A = synthesize_anomalies("global", T, 5000, seed=0)
    assert np.all(A[:, 0] >= 0) and np.all(A[:, 0] <= 0.1)
    assert np.all(A[:, 1] >= -0.04) and np.all(A[:, 1] <= 0.06)


def test_dependency_breaks_correlation_keeps_marginals():
    x = make_rng(5).normal(size=10_000)
    T = np.c_[x, x]
    A = synthesize_anomalies("dependency", T, 10_000, seed=0)
    assert abs(np.corrcoef(A.T)[0, 1]) < 0.1
    for j in range(2):
        assert ks_2samp(A[:, j], T[:, j]).statistic < 0.05


def test_synthesis_contracts():
    with pytest.raises(ContractError):
        synthesize_anomalies("local", np.zeros((3, 2)), 5)
    with pytest.raises(ContractError):
        synthesize_anomalies("global", np.zeros((3, 2)), 0)
    with pytest.raises(ContractError):
        synthesize_anomalies("weird", np.zeros((3, 2)), 1)


@pytest.mark.parametrize("seed", range(20))
def test_forest_planted_signal(seed):
    X = make_rng(seed).normal(size=(300, 6))
    y = (X[:, 3] > np.median(X[:, 3])).astype(int)
    r = forest_importance(X, y, n_trees=30, seed=seed)
    assert r.order[0] == 3
    assert abs(r.importance.sum() - 1) < 1e-12 and np.all(r.importance >= 0)


def test_forest_pure_noise_has_no_winner():
    for seed in range(10):
        X = make_rng(100 + seed).normal(size=(400, 5))
        y = make_rng(200 + seed).integers(0, 2, 400)
        imp = forest_importance(X, y, n_trees=50, seed=seed).importance
        assert imp.max() < 3 * imp.min()


def test_forest_single_feature_and_contracts():
    r = forest_importance(np.arange(6.0)[:, None], [0, 0, 0, 1, 1, 1])
    np.testing.assert_array_equal(r.importance, [1.0])
    with pytest.raises(ContractError):
        forest_importance(np.ones((4, 2)), [1, 1, 1, 1])


def test_forest_is_deterministic():
    X = make_rng(6).normal(size=(100, 4))
    y = (X[:, 0] > 0).astype(int)
    a, b = forest_importance(X, y, n_trees=10, seed=3), forest_importance(X, y, n_trees=10, seed=3)
    assert a.importance.tobytes() == b.importance.tobytes()


def splits(d=5, seed=0):
    rng = make_rng(seed)
    return {"train": rng.normal(size=(40, d)), "val": rng.normal(size=(10, d)), "test": rng.normal(size=(30, d))}


def test_add_uninformative():
    s = splits()
    out = corrupt("add_uninformative", s, 1.0, seed=0)
    assert all(v.shape[1] == 10 for v in out.values())
    for k in s:
        np.testing.assert_array_equal(out[k][:, :5], s[k])
    assert corrupt("add_uninformative", s, 0.5, seed=0)["train"].shape[1] == 7


def test_add_uninformative_statistics():
    base = make_rng(1).normal(3.0, 2.0, size=(20000, 1))
    out = corrupt("add_uninformative", {"train": base}, 1.0, seed=2)["train"][:, 1]
    q75, q25 = np.percentile(base, [75, 25])
    assert abs(out.mean() - base.mean()) < 0.05
    assert abs(out.std() - (q75 - q25) / 1.349) < 0.05


def test_missing_values_example():
    tr = np.array([[1.0], [2.0], [3.0], [4.0]])
    out = corrupt("missing_values", {"train": tr}, 0.5, seed=0)["train"][:, 0]
    kept = np.isin(out, tr[:, 0])
    assert kept.sum() == 2
    np.testing.assert_allclose(out[~kept], tr[kept, 0].mean())
    # seed 4 removes the entries 2 and 3
    out = corrupt("missing_values", {"train": tr}, 0.5, seed=4)["train"][:, 0]
    np.testing.assert_array_equal(out, [1.0, 2.5, 2.5, 4.0])


def test_missing_values_counts_and_train_means():
    s = splits(4, 3)
    out = corrupt("missing_values", s, 0.25, seed=1)
    for k, v in s.items():
        assert (out[k] != v).sum() == round(0.25 * v.size)
    changed = out["train"] != s["train"]
    for j in range(4):
        obs = s["train"][~changed[:, j], j]
        np.testing.assert_allclose(out["test"][out["test"][:, j] != s["test"][:, j], j], obs.mean(), rtol=1e-12)


def test_remove_and_select():
    s = splits(6)
    rank = ImportanceRanking(np.array([0.05, 0.3, 0.1, 0.4, 0.05, 0.1]), np.array([3, 1, 2, 5, 0, 4]))
    rem = corrupt("remove_important", s, 0.5, rank)
    np.testing.assert_array_equal(rem["train"], s["train"][:, [1, 2, 3]])
    sel = corrupt("select_important", s, 1 / 3, rank)
    np.testing.assert_array_equal(sel["test"], s["test"][:, [3, 1]])
    full = corrupt("select_important", s, 1.0, rank)
    np.testing.assert_array_equal(full["val"], s["val"][:, rank.order])
    with pytest.raises(ContractError):
        corrupt("remove_important", s, 1.0, rank)
    with pytest.raises(ContractError):
        corrupt("select_important", s, 0.5)
    with pytest.raises(ContractError):
        corrupt("missing_values", s, 0.0)


@pytest.mark.parametrize("name", TOY_NAMES)
def test_toys_are_deterministic(name):
    a, b = make_toy(ToySpec(name, seed=4)), make_toy(ToySpec(name, seed=4))
    assert a.X.tobytes() == b.X.tobytes() and a.d == 2
    assert a.n_anomalies == 25 and a.n == 525
    assert np.all(a.y[:500] == 0) and np.all(a.y[500:] == 1)


def test_toy_contracts():
    with pytest.raises(ContractError):
        make_toy(ToySpec("square"))
    with pytest.raises(ContractError):
        make_toy(ToySpec("ring", n_normal=10))


def test_ring_geometry():
    ds = make_toy(ToySpec("ring", n_normal=1000, seed=1))
    r = np.linalg.norm(ds.X, axis=1)
    assert np.all((r[ds.y == 0] >= 0.8) & (r[ds.y == 0] <= 1.2))
    assert np.all(r[ds.y == 1] < 0.3)


def ring_scores(seed):
    ds = make_toy(ToySpec("ring", n_normal=1000, seed=seed))
    sp = one_class_split(ds, seed)
    tr, te, y = ds.X[sp.train], ds.X[sp.test], ds.y[sp.test]
    return auroc(knn(tr, te, 5), y), auroc(ocsvm(tr, te), y)


def test_ring_knn_is_perfect():
    assert abs(ring_scores(0)[0] - 100.0) <= 1.0


@pytest.mark.xfail(
    strict=True,
    reason="RBF width from gamma='scale' is comparable to the ring radius, so the centre is the "
    "densest point of the kernel sum and OCSVM ranks centre anomalies as most normal (AUROC well below 50)",
)
def test_ring_ocsvm_is_random():
    assert 45.0 <= ring_scores(0)[1] <= 55.0
