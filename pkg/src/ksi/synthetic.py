"""Built-in synthetic data generators for configs and presets."""

from __future__ import annotations

import numpy as np


def _rng(seed, tag):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0x5E, tag))))


def gaussian_mixture(n: int, means, weights, std: float, seed: int = 0) -> np.ndarray:
    """``n`` draws from an isotropic Gaussian mixture."""
    means = np.atleast_2d(np.asarray(means, dtype=float))
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (means.shape[0],) or np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("weights must be non-negative, one per component")
    rng = _rng(seed, 1)
    comp = rng.choice(means.shape[0], size=n, p=weights / weights.sum())
    return means[comp] + std * rng.standard_normal((n, means.shape[1]))


def ar1_series(length: int, phi: float, sigma: float = 1.0, seed: int = 0) -> np.ndarray:
    """Stationary AR(1) path ``x_t = phi x_{t-1} + sigma e_t``."""
    if not abs(phi) < 1:
        raise ValueError("|phi| must be < 1 for a stationary AR(1)")
    rng = _rng(seed, 2)
    e = rng.standard_normal(length)
    x = np.empty(length)
    x[0] = sigma * e[0] / np.sqrt(1 - phi * phi)
    for t in range(1, length):
        x[t] = phi * x[t - 1] + sigma * e[t]
    return x


def cascade_series(
    length: int,
    scales: int = 6,
    vol_of_vol: float = 0.2,
    leverage: float = 0.2,
    seed: int = 0,
    standardize: bool = True,
) -> np.ndarray:
    """Multiscale log-volatility cascade with planted leverage.

    Log-volatility is a sum of AR(1) components with correlation times
    2, 4, ..., 2**scales. Each component is also pushed down by the current
    return shock (weight ``leverage``), so a positive return is followed by
    lower volatility: corr(r_t, r_{t+1}**2) < 0. Returns are
    ``exp(logvol) * shock``, standardized to zero mean and unit variance.
    """
    rng = _rng(seed, 3)
    burn = 4 * 2**scales
    n = length + burn
    shocks = rng.standard_normal(n)
    innov = rng.standard_normal((n, scales))
    rho = 1.0 - 1.0 / 2.0 ** np.arange(1, scales + 1)
    s = vol_of_vol * np.sqrt(1.0 - rho * rho)
    u = np.zeros(scales)
    r = np.empty(n)
    for t in range(n):
        r[t] = np.exp(u.sum()) * shocks[t]
        u = rho * u + s * innov[t] - leverage * np.sqrt(1.0 - rho * rho) * shocks[t] / np.sqrt(scales)
    r = r[burn:]
    if standardize:
        r = (r - r.mean()) / r.std()
    return r
