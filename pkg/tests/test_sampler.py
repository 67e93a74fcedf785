import numpy as np
import pytest
import scipy.linalg

from ksi import ConfigError, DriftTable, GenerationError, LinearCoordinates, OracleDrift, TableDrift, generate
from ksi.sampler import (
    Diffusion,
    GenConfig,
    _reverse_variance,
    chain_stream,
    reversed_ou_generate,
    step_generic,
    step_optimal,
)


def test_optimal_step_drops_state_at_t0(trig, gauss2d):
    drift = OracleDrift(gauss2d, trig)
    g = np.array([[0.3, -0.7]])
    a = step_optimal(np.array([[5.0, 1.0]]), 0.0, 0.01, drift, trig, g)
    b = step_optimal(np.array([[-40.0, 1e6]]), 0.0, 0.01, drift, trig, g)
    np.testing.assert_array_equal(a, b)


def test_optimal_step_formula(trig):
    x = np.array([[1.0, 2.0]])
    g = np.array([[0.5, -1.0]])
    t, h = 0.3, 0.1

    def drift(X, tt):
        return 0.5 * X

    b0, b1 = trig.beta(t), trig.beta(t + h)
    var = h * (trig.alpha(t) * b0 * trig.gamma(t) + trig.alpha(t + h) * b1 * trig.gamma(t + h))
    expected = (b0 / b1) * x + h * (1 + b0 / b1) * 0.5 * x + np.sqrt(var) / b1 * g
    np.testing.assert_allclose(step_optimal(x, t, h, drift, trig, g), expected, rtol=1e-14)


def test_generic_step_formula(linear):
    x = np.array([[1.0, -1.0]])
    g = np.array([[0.2, 0.4]])
    t, h, D = 0.25, 0.05, 0.7
    ag = linear.alpha(t) * linear.gamma(t)
    b = 2.0 * x
    expected = x + h * ((1 + D * linear.beta(t) / ag) * b - D * linear.dbeta(t) / ag * x) + np.sqrt(2 * D * h) * g
    np.testing.assert_allclose(step_generic(x, t, h, lambda X, tt: 2.0 * X, linear, D, g), expected)
    np.testing.assert_allclose(step_generic(x, t, h, lambda X, tt: 2.0 * X, linear, 0.0, g), x + h * b)
    with pytest.raises(ValueError):
        step_generic(x, t, h, lambda X, tt: X, linear, -1.0, g)


def test_chunking_and_threads_do_not_change_samples(trig, gauss2d):
    drift = OracleDrift(gauss2d, trig)
    cfg = GenConfig(20, 37, seed=4)
    a = generate(drift, trig, cfg).states
    b = generate(drift, trig, cfg, threads=3, chunk=5).states
    assert a.tobytes() == b.tobytes()
    # a chain's path depends only on (seed, chain index)
    c = generate(drift, trig, GenConfig(20, 10, seed=4)).states
    assert a[:10].tobytes() == c.tobytes()


def test_chain_streams_are_distinct():
    a = chain_stream(1, 0).standard_normal(4)
    assert not np.array_equal(a, chain_stream(1, 1).standard_normal(4))
    np.testing.assert_array_equal(a, chain_stream(1, 0).standard_normal(4))


def test_probability_flow_matches_transport_map(trig, gauss2d):
    # the exact ODE flow maps x0 to m + C^{1/2} x0 (covariances commute along the path)
    cfg = GenConfig(2000, 6, seed=0, diffusion=Diffusion.zero())
    X1 = generate(OracleDrift(gauss2d, trig), trig, cfg).states
    X0 = np.stack([chain_stream(0, c).standard_normal(2) for c in range(6)])
    expected = gauss2d.mean + X0 @ scipy.linalg.sqrtm(gauss2d.cov).real.T
    np.testing.assert_allclose(X1, expected, atol=5e-3)


def test_optimal_mode_requires_matching_steps(trig):
    table = DriftTable(np.arange(11) / 10, np.zeros((10, 2)), {"type": "linear"}, 1, 1e-8, 1, 2)
    drift = TableDrift(table, LinearCoordinates(2))
    with pytest.raises(ConfigError):
        generate(drift, trig, GenConfig(20, 5))
    generate(drift, trig, GenConfig(20, 5, diffusion=Diffusion.zero()))
    with pytest.raises(ConfigError):
        TableDrift(table, LinearCoordinates(3))


def test_failures_are_reported_per_chain(trig):
    class Exploding:
        dim = 1

        def __call__(self, X, t):
            out = np.zeros_like(X)
            if t >= 0.5:
                out[X[:, 0] > 0] = np.inf
            return out

    with pytest.raises(GenerationError) as err:
        generate(Exploding(), trig, GenConfig(10, 50, seed=1, diffusion=Diffusion.zero()))
    chains = [c for c, _, _ in err.value.failures]
    assert chains == sorted(chains) and len(chains) > 0
    assert all(k == 5 for _, k, _ in err.value.failures)


def test_diffusion_specs():
    assert Diffusion.from_spec("optimal") == Diffusion.optimal()
    assert Diffusion.from_spec({"constant": 2}).value == 2.0
    assert Diffusion.constant(1.5).to_spec() == {"constant": 1.5}
    with pytest.raises(ConfigError):
        Diffusion.from_spec("huge")
    with pytest.raises(ConfigError):
        Diffusion.constant(-1)
    with pytest.raises(ConfigError):
        GenConfig(0, 1)


@pytest.mark.parametrize("name", ["linear", "trig"])
def test_reverse_step_variance_matches_closed_form(name):
    from ksi import Schedule

    # d/ds (alpha^2 / beta^2) = -2 alpha gamma / beta^3 gives the exact integral
    s = Schedule.from_name(name)
    K = 1000
    for k in range(K - 1):
        hi, lo = 1 - k / K, 1 - (k + 1) / K
        exact = s.alpha(lo) ** 2 - s.beta(lo) ** 2 * s.alpha(hi) ** 2 / s.beta(hi) ** 2
        # quadrature error peaks next to beta = 0
        tol = 2e-4 if lo < 0.01 else 1e-5
        assert _reverse_variance(s, hi, lo) == pytest.approx(exact, rel=tol)


def test_reversed_ou_dirac_data_linear(linear):
    # a = 0 gives I_t = (1 - t) z, so the snapshot at tau has variance tau^2
    out = reversed_ou_generate(np.zeros((20_000, 1)), linear, 100, seed=2, snapshots=[0.3, 0.7, 0.995, 1.0])
    for tau, Y in out.items():
        assert abs(Y.mean()) < 4 * tau / np.sqrt(len(Y))
        assert Y.var() == pytest.approx(tau**2, rel=4 * np.sqrt(2 / len(Y)))


def test_generic_step_is_first_order(linear):
    """Mean error over a fixed interval on the eta = 0 problem halves with h."""
    t0, t1, x0, D = 0.3, 0.5, 1.0, 0.5
    # drift -D x / (1 - u) on the linear schedule; exact mean x0 ((1 - t1) / (1 - t0))**D
    exact = x0 * ((1 - t1) / (1 - t0)) ** D
    errs = []
    for n in (4, 8, 16, 32):
        h = (t1 - t0) / n
        x = np.array([[x0]])
        for k in range(n):
            x = step_generic(x, t0 + k * h, h, lambda X, u: 0 * X, linear, D, np.zeros((1, 1)))
        errs.append(abs(x[0, 0] - exact))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    np.testing.assert_allclose(ratios, 2.0, rtol=0.1)
