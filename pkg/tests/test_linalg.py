import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from auglaplace.augment import GENERATORS
from auglaplace.linalg import (
    IndefiniteError,
    ShapeError,
    SingularMatrixError,
    expm3,
    expm3_frechet,
    inv3,
    kron_damped_bilinear_trace,
    kron_damped_logdet,
    logdet_spd,
    rotated_diag,
    sym_eigh,
)


def random_spd(rng, n, jitter=0.5):
    a = rng.normal(size=(n, n))
    return a @ a.T + jitter * np.eye(n)


def random_sym(rng, n):
    a = rng.normal(size=(n, n))
    return 0.5 * (a + a.T)


def taylor_expm(m, terms=30):
    out = np.eye(3)
    term = np.eye(3)
    for k in range(1, terms):
        term = term @ m / k
        out = out + term
    return out


# --- sym_eigh / logdet_spd ----------------------------------------------------

def test_sym_eigh_identity():
    e = sym_eigh(np.eye(3))
    np.testing.assert_allclose(e.eigenvalues, [1, 1, 1])
    np.testing.assert_allclose(e.eigenvectors.T @ e.eigenvectors, np.eye(3), atol=1e-14)


def test_sym_eigh_diagonal():
    e = sym_eigh(np.diag([2.0, 5.0]))
    np.testing.assert_allclose(e.eigenvalues, [2, 5])
    np.testing.assert_allclose(np.abs(e.eigenvectors), np.eye(2))


def test_sym_eigh_reconstructs_random_symmetric():
    m = random_sym(np.random.default_rng(0), 6)
    e = sym_eigh(m)
    rec = (e.eigenvectors * e.eigenvalues) @ e.eigenvectors.T
    assert np.max(np.abs(rec - m)) < 1e-9
    assert np.all(np.diff(e.eigenvalues) >= 0)


@pytest.mark.parametrize("bad", [np.ones((2, 3)), np.array([[1.0, 2.0], [0.0, 1.0]])])
def test_sym_eigh_rejects_non_symmetric(bad):
    with pytest.raises(ShapeError):
        sym_eigh(bad)


def test_logdet_spd_simple_cases():
    assert logdet_spd(np.eye(4)) == 0.0
    assert logdet_spd(np.diag([2.0, 2.0])) == pytest.approx(2 * np.log(2), abs=1e-15)


def test_logdet_spd_matches_eigenvalues():
    m = random_spd(np.random.default_rng(1), 8)
    assert logdet_spd(m) == pytest.approx(np.sum(np.log(sym_eigh(m).eigenvalues)), abs=1e-8)


def test_logdet_spd_flags_indefinite():
    with pytest.raises(IndefiniteError):
        logdet_spd(np.diag([1.0, -1.0]))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 12), seed=st.integers(0, 2**31))
def test_logdet_spd_equals_sum_log_eigenvalues(n, seed):
    m = random_spd(np.random.default_rng(seed), n)
    assert logdet_spd(m) == pytest.approx(np.sum(np.log(np.linalg.eigvalsh(m))), abs=1e-8)


# --- matrix exponential -------------------------------------------------------

def test_expm3_zero_is_identity():
    np.testing.assert_array_equal(expm3(np.zeros((3, 3))), np.eye(3))


def test_expm3_quarter_turn():
    want = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    np.testing.assert_allclose(expm3(np.pi / 2 * GENERATORS[2]), want, atol=1e-15)


def test_expm3_matches_taylor_series():
    rng = np.random.default_rng(2)
    for _ in range(20):
        m = rng.normal(size=(3, 3))
        m /= np.linalg.norm(m, 2)
        assert np.max(np.abs(expm3(m) - taylor_expm(m))) < 1e-10


def test_expm3_agrees_with_scipy_on_large_norm():
    import scipy.linalg

    m = np.random.default_rng(3).normal(size=(3, 3)) * 4
    np.testing.assert_allclose(expm3(m), scipy.linalg.expm(m), rtol=1e-12)


def test_expm3_batched():
    ms = np.random.default_rng(4).normal(size=(5, 2, 3, 3))
    out = expm3(ms)
    for idx in np.ndindex(5, 2):
        np.testing.assert_allclose(out[idx], expm3(ms[idx]), rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), norm=st.floats(0.0, 5.0))
def test_expm3_inverse_pair(seed, norm):
    a = np.random.default_rng(seed).normal(size=(3, 3))
    a *= norm / max(np.linalg.norm(a, 2), 1e-12)
    assert np.max(np.abs(expm3(a) @ expm3(-a) - np.eye(3))) < 1e-9


@settings(max_examples=50, deadline=None)
@given(i=st.integers(0, 5), s=st.floats(-2, 2), t=st.floats(-2, 2))
def test_expm3_one_parameter_subgroup(i, s, t):
    g = GENERATORS[i]
    lhs = expm3((s + t) * g)
    rhs = expm3(s * g) @ expm3(t * g)
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_frechet_at_zero_is_identity_map():
    T, L = expm3_frechet(np.zeros((3, 3)), GENERATORS[2])
    np.testing.assert_array_equal(T, np.eye(3))
    np.testing.assert_allclose(L, GENERATORS[2], atol=1e-16)
    _, L0 = expm3_frechet(np.zeros((3, 3)), np.zeros((3, 3)))
    np.testing.assert_array_equal(L0, 0.0)


def test_frechet_matches_finite_difference():
    rng = np.random.default_rng(5)
    h = 1e-6
    for _ in range(10):
        m, e = rng.normal(size=(2, 3, 3))
        T, L = expm3_frechet(m, e)
        fd = (expm3(m + h * e) - expm3(m - h * e)) / (2 * h)
        np.testing.assert_allclose(T, expm3(m), rtol=1e-13)
        assert np.max(np.abs(L - fd)) < 1e-6


# --- inv3 ---------------------------------------------------------------------

def test_inv3_identity_and_rotation():
    np.testing.assert_array_equal(inv3(np.eye(3)), np.eye(3))
    r = expm3(0.7 * GENERATORS[2])
    np.testing.assert_allclose(inv3(r), r.T, atol=1e-15)


def test_inv3_random_stack():
    m = np.random.default_rng(6).normal(size=(4, 3, 3))
    np.testing.assert_allclose(inv3(m) @ m, np.broadcast_to(np.eye(3), m.shape), atol=1e-10)


def test_inv3_singular():
    with pytest.raises(SingularMatrixError):
        inv3(np.array([[1.0, 2, 3], [2, 4, 6], [0, 0, 1]]))


# --- Kronecker identities -----------------------------------------------------

def test_kron_logdet_identity_factors():
    assert kron_damped_logdet([1, 1], [1, 1, 1], 1.0, 1e-300) == pytest.approx(0.0, abs=1e-12)
    assert kron_damped_logdet([1.0], [1.0], 1.0, 1.0) == pytest.approx(np.log(2), abs=1e-15)


def test_kron_logdet_rejects_bad_damping():
    with pytest.raises(ValueError):
        kron_damped_logdet([1.0], [1.0], 1.0, 0.0)


def test_kron_logdet_matches_dense():
    rng = np.random.default_rng(7)
    a, g = random_spd(rng, 3, 0.0), random_spd(rng, 4, 0.0)
    scale, gamma = 0.3, 0.7
    dense = logdet_spd(scale * np.kron(a, g) + gamma * np.eye(12))
    got = kron_damped_logdet(np.linalg.eigvalsh(a), np.linalg.eigvalsh(g), scale, gamma)
    assert got == pytest.approx(dense, abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), gamma=st.floats(1e-3, 10.0))
def test_kron_logdet_symmetric_in_factors(seed, gamma):
    rng = np.random.default_rng(seed)
    la, lg = rng.uniform(0, 3, 4), rng.uniform(0, 3, 5)
    assert kron_damped_logdet(la, lg, 0.5, gamma) == pytest.approx(kron_damped_logdet(lg, la, 0.5, gamma), abs=1e-12)


def test_kron_logdet_undamped_limit():
    rng = np.random.default_rng(8)
    a, g = random_spd(rng, 3), random_spd(rng, 4)
    want = 4 * logdet_spd(a) + 3 * logdet_spd(g)
    got = kron_damped_logdet(np.linalg.eigvalsh(a), np.linalg.eigvalsh(g), 1.0, 1e-300)
    assert got == pytest.approx(want, abs=1e-8)


def test_kron_trace_self_trace_case():
    la, lg = np.array([0.5, 2.0]), np.array([1.0, 3.0, 4.0])
    n, gamma = 10, 0.2
    d = np.outer(la, lg) / n
    got = kron_damped_bilinear_trace(la, lg, la, lg, 1.0 / n, gamma)
    assert got == pytest.approx(np.sum(d / (d + gamma)) * n, rel=1e-12)


def test_kron_trace_pure_damping():
    assert kron_damped_bilinear_trace([1.0], [1.0], [0.0], [0.0], 1.0, 1.0) == 1.0


def test_kron_trace_shape_mismatch():
    with pytest.raises(ShapeError):
        kron_damped_bilinear_trace([1.0, 2.0], [1.0], [1.0], [1.0], 1.0, 1.0)


def test_kron_trace_matches_dense():
    rng = np.random.default_rng(9)
    a, g = random_spd(rng, 3, 0.0), random_spd(rng, 4, 0.0)
    x, y = random_sym(rng, 3), random_sym(rng, 4)
    scale, gamma = 0.25, 0.4
    hbar = scale * np.kron(a, g) + gamma * np.eye(12)
    dense = np.trace(np.linalg.solve(hbar, np.kron(x, y)))
    ea, eg = sym_eigh(a), sym_eigh(g)
    got = kron_damped_bilinear_trace(
        rotated_diag(ea.eigenvectors, x), rotated_diag(eg.eigenvectors, y), ea.eigenvalues, eg.eigenvalues, scale, gamma
    )
    assert got == pytest.approx(dense, abs=1e-8)


def test_rotated_diag_batched():
    rng = np.random.default_rng(10)
    v = np.linalg.qr(rng.normal(size=(4, 4)))[0]
    x = rng.normal(size=(3, 4, 4))
    for i in range(3):
        np.testing.assert_allclose(rotated_diag(v, x)[i], np.diag(v.T @ x[i] @ v), atol=1e-13)
