import numpy as np
import pytest
from hypothesis import given, strategies as st

from magrep import svm

from oracles import oracle_bias, projected_gradient_dual

LINEAR = svm.KernelSpec("linear")


def random_problem(seed, n_max=5, d_max=2):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, n_max + 1))
    d = int(rng.integers(1, d_max + 1))
    X = rng.normal(size=(n, d))
    y = rng.permutation(np.concatenate([[1, -1], rng.choice([-1, 1], size=n - 2)]))
    kernel = LINEAR if seed % 2 else svm.KernelSpec("rbf", float(rng.choice([0.5, 1.0, 2.0])))
    C = float(rng.choice([0.1, 1.0, 10.0]))
    return X, y, kernel, C


# ---- examples

def test_two_point_linear():
    m = svm.train_smo(np.array([[0.0], [2.0]]), np.array([-1, 1]), C=10, kernel=LINEAR)
    assert svm.decision_function(m, np.array([0.0])) == pytest.approx(-1, abs=1e-6)
    assert svm.decision_function(m, np.array([2.0])) == pytest.approx(1, abs=1e-6)
    assert svm.decision_function(m, np.array([1.0])) == pytest.approx(0, abs=1e-6)
    np.testing.assert_allclose(m.alpha, [0.5, 0.5], atol=1e-9)
    assert svm.predict(m, np.array([[0.0], [2.0]])).tolist() == [-1, 1]


def test_xor_rbf():
    X = np.array([[0.0, 0], [1, 1], [0, 1], [1, 0]])
    y = np.array([-1, -1, 1, 1])
    m = svm.train_smo(X, y, C=10, kernel=svm.KernelSpec("rbf", 1.0))
    assert svm.predict(m, X).tolist() == y.tolist()
    a_o, _ = projected_gradient_dual(m.kernel(X, X), y, 10.0)
    np.testing.assert_allclose(m.alpha, a_o, atol=1e-3)


def test_single_class_rejected():
    with pytest.raises(ValueError, match="degenerate labels"):
        svm.train_smo(np.zeros((3, 1)), np.ones(3))


def test_nonfinite_rejected():
    with pytest.raises(ValueError):
        svm.train_smo(np.array([[0.0], [np.nan]]), np.array([-1, 1]))


def test_bad_inputs():
    with pytest.raises(ValueError):
        svm.train_smo(np.zeros((2, 1)), np.array([0, 1]))
    with pytest.raises(ValueError):
        svm.train_smo(np.zeros((2, 1)), np.array([-1, 1]), C=0)
    with pytest.raises(ValueError):
        svm.KernelSpec("rbf", -1.0)
    with pytest.raises(ValueError):
        svm.KernelSpec("poly")


def test_decision_function_examples():
    lone = svm.SvmModel(np.array([[1.0, 2.0]]), np.array([0.7]), 0.0, svm.KernelSpec("rbf", 0.5), 1.0)
    assert svm.decision_function(lone, np.array([1.0, 2.0])) == pytest.approx(0.7)
    lin = svm.SvmModel(np.array([[1.0, 2.0]]), np.array([0.3]), -0.25, LINEAR, 1.0)
    assert svm.decision_function(lin, np.zeros(2)) == -0.25
    tie = svm.SvmModel(np.zeros((0, 2)), np.zeros(0), 0.0, LINEAR, 1.0)
    assert svm.predict(tie, np.ones((3, 2))).tolist() == [1, 1, 1]
    with pytest.raises(ValueError):
        svm.decision_function(lin, np.zeros(3))


def test_sign_agrees_with_predict(rng):
    X = rng.normal(size=(30, 3))
    y = np.where(X[:, 0] + 0.3 * rng.normal(size=30) > 0, 1, -1)
    m = svm.train_smo(X, y)
    probes = rng.normal(size=(1000, 3))
    f = svm.decision_function(m, probes)
    np.testing.assert_array_equal(svm.predict(m, probes), np.where(f >= 0, 1, -1))


def test_scale_gamma(rng):
    X = rng.normal(size=(10, 4)) * 3
    k = svm.KernelSpec().resolve(X)
    assert k.gamma == pytest.approx(1 / (4 * X.var()))
    with pytest.raises(ValueError):
        svm.KernelSpec()(X, X)


def test_separable_large_c_fits_training(rng):
    X = np.vstack([rng.normal(size=(15, 2)) + 3, rng.normal(size=(15, 2)) - 3])
    y = np.array([1] * 15 + [-1] * 15)
    for kernel in (LINEAR, svm.KernelSpec()):
        m = svm.train_smo(X, y, C=1e6, kernel=kernel)
        assert svm.predict(m, X).tolist() == y.tolist()


# ---- invariants

@given(st.integers(0, 2**31), st.integers(2, 25), st.integers(1, 4),
       st.sampled_from([0.1, 1.0, 10.0]), st.booleans())
def test_kkt_and_dual_feasibility(seed, n, d, C, linear):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = rng.permutation(np.concatenate([[1, -1], rng.choice([-1, 1], size=n - 2)]))
    m = svm.train_smo(X, y, C=C, kernel=LINEAR if linear else svm.KernelSpec())
    assert m.converged
    assert np.all(m.alpha >= 0) and np.all(m.alpha <= C)
    assert abs(np.sum(m.alpha * y)) <= 1e-6
    assert np.all(m.alpha[m.support_indices] > 0)
    assert len(m.support_vectors) == np.count_nonzero(m.alpha > 0)
    assert len(svm.kkt_violations(m, X, y, 1e-3)) == 0


@pytest.mark.parametrize("seed", range(40))
def test_oracle_equivalence(seed):
    X, y, kernel, C = random_problem(seed)
    m = svm.train_smo(X, y, C=C, kernel=kernel)
    K = m.kernel(X, X)
    a_o, obj_o = projected_gradient_dual(K, y, C)
    assert abs(svm.dual_objective(m.alpha, y, K) + obj_o) < 1e-4
    b_o = oracle_bias(a_o, y, K, C)
    probes = np.vstack([X, np.random.default_rng(seed + 1).normal(size=(50, X.shape[1]))])
    ref = np.where(m.kernel(probes, X) @ (a_o * y) + b_o >= 0, 1, -1)
    np.testing.assert_array_equal(svm.predict(m, probes), ref)


@pytest.mark.parametrize("seed", range(30))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(12, 2))
    y = np.where(X[:, 0] * X[:, 1] + 0.2 * rng.normal(size=12) > 0, 1, -1)
    if len(set(y)) < 2:
        y[0] = -y[0]
    kernel = svm.KernelSpec("rbf", 1.0)
    perm = rng.permutation(12)
    a = svm.train_smo(X, y, C=1.0, kernel=kernel, tol=1e-8)
    b = svm.train_smo(X[perm], y[perm], C=1.0, kernel=kernel, tol=1e-8)
    probes = rng.normal(size=(200, 2))
    np.testing.assert_array_equal(svm.predict(a, probes), svm.predict(b, probes))


def test_save_load(tmp_path, rng):
    X = rng.normal(size=(20, 3))
    y = np.where(X[:, 1] > 0, 1, -1)
    m = svm.train_smo(X, y)
    svm.save_svm(m, tmp_path)
    back = svm.load_svm(tmp_path / "svm.json")
    assert back.kernel == m.kernel and back.C == m.C
    probes = rng.normal(size=(50, 3))
    np.testing.assert_allclose(svm.decision_function(back, probes),
                               svm.decision_function(m, probes), atol=1e-5)
