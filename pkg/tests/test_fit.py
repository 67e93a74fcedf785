import numpy as np
import pytest

from ksi import (
    DataPairs,
    DriftTable,
    LinearCoordinates,
    Monomials,
    NumericalError,
    RadialQuadratic,
    assemble,
    concat,
    fit_table,
    interpolate,
    solve_eta,
)
from ksi.fit import GramSystem


def test_hand_solved_system():
    sol = solve_eta(GramSystem(np.array([[1.0, 0.5], [0.5, 1.25]]), np.array([1.0, 0.5]), 0.5), ridge=0.0)
    np.testing.assert_allclose(sol.eta, [1.0, 0.0], atol=1e-15)
    assert not sol.fallback
    # trace 2.25, determinant 1: eigenvalues 1.125 +- sqrt(1.125**2 - 1)
    lo, hi = 1.125 - np.sqrt(0.265625), 1.125 + np.sqrt(0.265625)
    assert sol.condition == pytest.approx(hi / lo)


def test_matches_brute_force_least_squares(trig):
    rng = np.random.default_rng(3)
    a = rng.normal([0.5, -1.0], 0.7, size=(400, 2))
    pairs = DataPairs(rng.standard_normal(a.shape), a)
    fmap = concat([LinearCoordinates(2)])
    batch = interpolate(pairs, trig, 0.4)
    sol = solve_eta(assemble(fmap, batch), ridge=0.0)

    J = fmap.jacobian_batch(batch.I)

    def loss(eta):
        return np.mean(np.sum((np.einsum("npd,p->nd", J, eta) - batch.Idot) ** 2, axis=1))

    # 1e6-point grid, then exact coordinate descent on the quadratic
    K = np.einsum("npd,nqd->pq", J, J) / len(J)
    r = np.einsum("npd,nd->p", J, batch.Idot) / len(J)
    g = np.linspace(-3, 3, 1000)
    E0, E1 = np.meshgrid(g, g, indexing="ij")
    Q = K[0, 0] * E0**2 + 2 * K[0, 1] * E0 * E1 + K[1, 1] * E1**2 - 2 * (r[0] * E0 + r[1] * E1)
    i, j = np.unravel_index(np.argmin(Q), Q.shape)
    eta = np.array([g[i], g[j]])
    for _ in range(200):
        for p in range(2):
            eta[p] = (r[p] - K[p] @ eta + K[p, p] * eta[p]) / K[p, p]
    np.testing.assert_allclose(sol.eta, eta, rtol=1e-9, atol=1e-12)
    assert loss(sol.eta) <= loss(eta) + 1e-12


def test_assemble_matches_direct_sums(trig):
    rng = np.random.default_rng(4)
    pairs = DataPairs(rng.standard_normal((50, 3)), rng.standard_normal((50, 3)))
    fmap = concat([LinearCoordinates(3), Monomials(3), RadialQuadratic(3)])
    batch = interpolate(pairs, trig, 0.7)
    sys_ = assemble(fmap, batch, chunk=7)
    J = fmap.jacobian_batch(batch.I)
    np.testing.assert_allclose(sys_.K, np.einsum("npd,nqd->pq", J, J) / 50, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(sys_.r, np.einsum("npd,nd->p", J, batch.Idot) / 50, rtol=1e-13, atol=1e-15)
    np.testing.assert_array_equal(sys_.K, sys_.K.T)


def test_interpolant_endpoints(trig):
    rng = np.random.default_rng(5)
    pairs = DataPairs(rng.standard_normal((5, 2)), rng.standard_normal((5, 2)))
    np.testing.assert_array_equal(interpolate(pairs, trig, 0.0).I, pairs.z)
    np.testing.assert_array_equal(interpolate(pairs, trig, 1.0).I, pairs.a)
    with pytest.raises(ValueError):
        interpolate(pairs, trig, -0.1)


def test_ridge_is_trace_scaled():
    K = np.diag([4.0, 1.0])
    r = np.array([1.0, 1.0])
    sol = solve_eta(GramSystem(K, r, 0.5), ridge=0.1)
    # tr(K)/P = 2.5, so the shift is 0.25
    np.testing.assert_allclose(sol.eta, [1 / 4.25, 1 / 1.25])


def test_singular_system_falls_back():
    K = np.array([[1.0, 1.0], [1.0, 1.0]])
    sol = solve_eta(GramSystem(K, np.array([2.0, 2.0]), 0.3), ridge=0.0)
    assert sol.fallback
    np.testing.assert_allclose(sol.eta, [1.0, 1.0])


def test_zero_gram_with_nonzero_rhs_raises():
    with pytest.raises(NumericalError) as err:
        solve_eta(GramSystem(np.zeros((2, 2)), np.array([1.0, 0.0]), 0.25))
    assert err.value.t == 0.25
    ok = solve_eta(GramSystem(np.zeros((2, 2)), np.zeros(2), 0.25))
    assert ok.fallback and not ok.eta.any()


def test_non_finite_system_raises():
    with pytest.raises(NumericalError):
        solve_eta(GramSystem(np.array([[np.nan]]), np.array([1.0]), 0.1))


@pytest.fixture
def small_fit(trig, gauss2d):
    pairs = DataPairs.with_noise(gauss2d.sample(2000, np.random.default_rng(6)), seed=1)
    fmap = concat([LinearCoordinates(2), Monomials(2), RadialQuadratic(2)])
    return fmap, pairs


def test_fit_table_structure(trig, small_fit):
    fmap, pairs = small_fit
    table = fit_table(fmap, pairs, trig, 20)
    assert table.etas.shape == (20, 6)
    np.testing.assert_array_equal(table.grid, np.arange(21) / 20)
    assert table.schedule_id == 1 and table.n_pairs == 2000 and table.dim == 2
    assert table.fallback_nodes == ()


def test_fit_is_permutation_and_thread_invariant(trig, small_fit):
    fmap, pairs = small_fit
    base = fit_table(fmap, pairs, trig, 10)
    perm = np.random.default_rng(0).permutation(pairs.n)
    shuffled = fit_table(fmap, DataPairs(pairs.z[perm], pairs.a[perm]), trig, 10, threads=3)
    assert base.identical(shuffled)


def test_assemble_is_permutation_invariant(trig, small_fit):
    fmap, pairs = small_fit
    perm = np.random.default_rng(1).permutation(pairs.n)
    a = assemble(fmap, interpolate(pairs, trig, 0.3))
    b = assemble(fmap, interpolate(DataPairs(pairs.z[perm], pairs.a[perm]), trig, 0.3))
    assert a.K.tobytes() == b.K.tobytes() and a.r.tobytes() == b.r.tobytes()


def test_node_lookup_is_left_continuous():
    table = DriftTable(np.arange(5) / 4, np.arange(8.0).reshape(4, 2), {"type": "linear"}, 1, 1e-8, 10, 2)
    assert table.node_index(0.0) == 0
    assert table.node_index(0.2499) == 0
    assert table.node_index(0.25) == 1
    assert table.node_index(1.0) == 3
    np.testing.assert_array_equal(table.eta_at(0.6), [4.0, 5.0])


def test_table_validation():
    with pytest.raises(ValueError):
        DriftTable(np.array([0.0, 0.5]), np.zeros((1, 2)), {}, 1, 0.0, 1, 2)
    with pytest.raises(ValueError):
        DriftTable(np.array([0.0, 1.0]), np.zeros((2, 2)), {}, 1, 0.0, 1, 2)


def test_data_pairs_validation():
    with pytest.raises(ValueError):
        DataPairs(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        DataPairs(np.zeros((1, 2)), np.array([[np.inf, 0.0]]))
    a = np.ones((4, 2))
    p1, p2 = DataPairs.with_noise(a, 9), DataPairs.with_noise(a, 9)
    np.testing.assert_array_equal(p1.z, p2.z)
    assert not np.array_equal(p1.z, DataPairs.with_noise(a, 10).z)
