"""Feature maps exposing their Jacobian ``grad_phi(x, t)`` of shape (P, d).

Only the Jacobian enters the Gram system, so maps are free to skip
``values`` (the velocity ensemble does). Every map works on batches:
``jacobian_batch`` takes an (n, d) array and returns (n, P, d).
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from typing import Callable, Sequence

import numpy as np

from ksi.errors import ConfigError

SMOOTH_EPS = 1e-6

VelocityField = Callable[[np.ndarray, float], np.ndarray]


class FeatureMap(ABC):
    """Abstract P-dimensional feature family on R^d."""

    dim_in: int
    dim_out: int
    time_dependent: bool = False

    @abstractmethod
    def jacobian_batch(self, X: np.ndarray, t: float = 0.0) -> np.ndarray:
        """Jacobians for each row of ``X``; shape (n, P, d)."""

    def values(self, X: np.ndarray) -> np.ndarray:
        """Feature values phi(x) for each row of ``X``; shape (n, P)."""
        raise NotImplementedError(f"{type(self).__name__} defines only its Jacobian")

    @abstractmethod
    def describe(self) -> dict:
        """JSON-serializable spec that :func:`build_feature_map` can rebuild from."""

    def _check_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.dim_in:
            raise ValueError(f"expected states of shape (n, {self.dim_in}), got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("non-finite state passed to feature map")
        return X

    def jacobian(self, x, t: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim_in,):
            raise ValueError(f"expected a state of shape ({self.dim_in},), got {x.shape}")
        if not (0.0 <= t <= 1.0):
            raise ValueError("t must lie in [0, 1]")
        return self.jacobian_batch(x[None, :], t)[0]

    def drift_apply(self, x, t: float, eta) -> np.ndarray:
        """``jacobian(x, t).T @ eta``. Accepts a single state or an (n, d) batch."""
        eta = np.asarray(eta, dtype=float)
        if eta.shape != (self.dim_out,):
            raise ValueError(f"eta must have length {self.dim_out}, got shape {eta.shape}")
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        J = self.jacobian_batch(self._check_batch(np.atleast_2d(x)), t)
        out = np.einsum("npd,p->nd", J, eta)
        return out[0] if single else out


class LinearCoordinates(FeatureMap):
    """phi_i(x) = x_i, so the Jacobian is the identity."""

    def __init__(self, d: int):
        self.dim_in = self.dim_out = int(d)

    def jacobian_batch(self, X, t=0.0):
        X = self._check_batch(X)
        return np.broadcast_to(np.eye(self.dim_in), (X.shape[0], self.dim_in, self.dim_in)).copy()

    def values(self, X):
        return self._check_batch(X).copy()

    def describe(self):
        return {"type": "linear"}


class RadialQuadratic(FeatureMap):
    """Single feature |x|^2 / 2 with gradient x."""

    def __init__(self, d: int):
        self.dim_in = int(d)
        self.dim_out = 1

    def jacobian_batch(self, X, t=0.0):
        return self._check_batch(X)[:, None, :].copy()

    def values(self, X):
        X = self._check_batch(X)
        return 0.5 * np.sum(X * X, axis=1, keepdims=True)

    def describe(self):
        return {"type": "radial_quadratic"}


class Monomials(FeatureMap):
    """All quadratic monomials x_i x_j with i <= j, ordered row-major."""

    def __init__(self, d: int):
        self.dim_in = int(d)
        self.pairs = [(i, j) for i in range(d) for j in range(i, d)]
        self.dim_out = len(self.pairs)

    def jacobian_batch(self, X, t=0.0):
        X = self._check_batch(X)
        J = np.zeros((X.shape[0], self.dim_out, self.dim_in))
        for p, (i, j) in enumerate(self.pairs):
            J[:, p, i] += X[:, j]
            J[:, p, j] += X[:, i]
        return J

    def values(self, X):
        X = self._check_batch(X)
        return np.stack([X[:, i] * X[:, j] for i, j in self.pairs], axis=1)

    def describe(self):
        return {"type": "monomials"}


def _smooth_abs(u):
    return np.sqrt(u * u + SMOOTH_EPS**2)


def _haar_details(X, levels):
    """Orthonormal Haar pyramid; returns detail arrays for scales 1..levels."""
    approx = X
    details = []
    for _ in range(levels):
        even, odd = approx[:, 0::2], approx[:, 1::2]
        details.append((even - odd) / math.sqrt(2.0))
        approx = (even + odd) / math.sqrt(2.0)
    return details


def _haar_detail_adjoint(v, level):
    """Apply the transpose of x -> W_level x to ``v`` of shape (n, T / 2**level)."""
    n = v.shape[0]
    out = np.stack([v, -v], axis=-1).reshape(n, -1) / math.sqrt(2.0)
    for _ in range(level - 1):
        out = np.repeat(out, 2, axis=1) / math.sqrt(2.0)
    return out


class HaarScattering1D(FeatureMap):
    """Simplified first/second-order scattering statistics of a 1-D signal.

    Features, in order:

    * ``mean |W_j x|`` for j = 1..J
    * ``mean (W_j x)**2`` for j = 1..J
    * ``mean x`` and ``mean x**2``
    * ``mean |W_j x| * |W_k x|`` for j < k, where the coarser scale is
      repeated to the finer scale's length

    ``|u|`` is smoothed as ``sqrt(u**2 + eps**2)`` with eps = 1e-6 so the
    Jacobian exists everywhere.
    """

    def __init__(self, length: int, levels: int):
        length, levels = int(length), int(levels)
        if length < 2 or length & (length - 1):
            raise ConfigError(f"signal length must be a power of two, got {length}")
        if not 1 <= levels <= int(math.log2(length)):
            raise ConfigError(f"levels must lie in [1, log2(length)={int(math.log2(length))}], got {levels}")
        self.dim_in = length
        self.levels = levels
        self.cross = [(j, k) for j in range(levels) for k in range(j + 1, levels)]
        self.dim_out = 2 * levels + 2 + len(self.cross)

    def _cross_terms(self, mags, j, k):
        rep = 2 ** (k - j)
        return mags[j] * np.repeat(mags[k], rep, axis=1)

    def values(self, X):
        X = self._check_batch(X)
        details = _haar_details(X, self.levels)
        mags = [_smooth_abs(d) for d in details]
        cols = [m.mean(axis=1) for m in mags]
        cols += [(d * d).mean(axis=1) for d in details]
        cols += [X.mean(axis=1), (X * X).mean(axis=1)]
        cols += [self._cross_terms(mags, j, k).mean(axis=1) for j, k in self.cross]
        return np.stack(cols, axis=1)

    def jacobian_batch(self, X, t=0.0):
        X = self._check_batch(X)
        n, T = X.shape
        J = np.empty((n, self.dim_out, T))
        details = _haar_details(X, self.levels)
        mags = [_smooth_abs(d) for d in details]
        slopes = [d / m for d, m in zip(details, mags)]
        L = self.levels
        for j, d in enumerate(details):
            size = d.shape[1]
            J[:, j] = _haar_detail_adjoint(slopes[j] / size, j + 1)
            J[:, L + j] = _haar_detail_adjoint(2.0 * d / size, j + 1)
        J[:, 2 * L] = 1.0 / T
        J[:, 2 * L + 1] = 2.0 * X / T
        for p, (j, k) in enumerate(self.cross, start=2 * L + 2):
            rep = 2 ** (k - j)
            size = details[j].shape[1]
            g_fine = slopes[j] * np.repeat(mags[k], rep, axis=1) / size
            g_coarse = slopes[k] * mags[j].reshape(n, -1, rep).sum(axis=2) / size
            J[:, p] = _haar_detail_adjoint(g_fine, j + 1) + _haar_detail_adjoint(g_coarse, k + 1)
        return J

    def describe(self):
        return {"type": "haar_scatter", "levels": self.levels}


def haar_scattering_1d(length: int, levels: int) -> HaarScattering1D:
    return HaarScattering1D(length, levels)


class RandomFourier(FeatureMap):
    """Features cos(w_i . x / sigma) for i < M followed by sin(w_i . x / sigma).

    Frequencies are standard normal, drawn once from ``seed``.
    """

    def __init__(self, d: int, num_frequencies: int, bandwidth: float, seed: int = 0):
        if num_frequencies < 1:
            raise ConfigError("num_frequencies must be >= 1")
        if not bandwidth > 0:
            raise ConfigError("bandwidth must be positive")
        self.dim_in = int(d)
        self.num_frequencies = int(num_frequencies)
        self.bandwidth = float(bandwidth)
        self.seed = int(seed)
        self.dim_out = 2 * self.num_frequencies
        rng = np.random.Generator(np.random.Philox(self.seed))
        self.omega = rng.standard_normal((self.num_frequencies, self.dim_in))
        self.omega.setflags(write=False)

    def values(self, X):
        proj = self._check_batch(X) @ self.omega.T / self.bandwidth
        return np.concatenate([np.cos(proj), np.sin(proj)], axis=1)

    def jacobian_batch(self, X, t=0.0):
        proj = self._check_batch(X) @ self.omega.T / self.bandwidth
        w = self.omega / self.bandwidth
        cos_rows = -np.sin(proj)[:, :, None] * w[None]
        sin_rows = np.cos(proj)[:, :, None] * w[None]
        return np.concatenate([cos_rows, sin_rows], axis=1)

    def describe(self):
        return {
            "type": "rff",
            "num_frequencies": self.num_frequencies,
            "bandwidth": self.bandwidth,
            "seed": self.seed,
        }


def random_fourier(d: int, num_frequencies: int, bandwidth: float, seed: int = 0) -> RandomFourier:
    return RandomFourier(d, num_frequencies, bandwidth, seed)


class LaggedLeverage(FeatureMap):
    """Odd cross-lag moments ``mean_t x_t * x_{t+l}**2`` (circular) for l = 1..L.

    The Haar statistics are all even in x apart from the mean, so on their
    own they cannot steer the sign of return/volatility correlations.
    """

    def __init__(self, length: int, max_lag: int):
        if not 1 <= max_lag < length:
            raise ConfigError(f"max_lag must lie in [1, {length - 1}], got {max_lag}")
        self.dim_in = int(length)
        self.max_lag = int(max_lag)
        self.dim_out = self.max_lag

    def values(self, X):
        X = self._check_batch(X)
        lags = range(1, self.max_lag + 1)
        return np.stack([np.mean(X * np.roll(X, -l, axis=1) ** 2, axis=1) for l in lags], axis=1)

    def jacobian_batch(self, X, t=0.0):
        X = self._check_batch(X)
        T = self.dim_in
        J = np.empty((X.shape[0], self.dim_out, T))
        for p, l in enumerate(range(1, self.max_lag + 1)):
            ahead = np.roll(X, -l, axis=1)
            behind = np.roll(X, l, axis=1)
            J[:, p] = (ahead**2 + 2.0 * X * behind) / T
        return J

    def describe(self):
        return {"type": "leverage", "max_lag": self.max_lag}


class MarginalBumps(FeatureMap):
    """Pointwise density probes ``mean_i exp(-(x_i - c_k)**2 / (2 w**2))``.

    Centers are evenly spaced on [-span, span] and the width equals their
    spacing. The resulting drift acts coordinatewise, which lets the model
    reshape the one-point marginal of a stationary signal.
    """

    def __init__(self, length: int, num_centers: int, span: float):
        if num_centers < 2:
            raise ConfigError("num_centers must be >= 2")
        if not span > 0:
            raise ConfigError("span must be positive")
        self.dim_in = int(length)
        self.dim_out = int(num_centers)
        self.span = float(span)
        self.centers = np.linspace(-self.span, self.span, self.dim_out)
        self.width = float(self.centers[1] - self.centers[0])

    def values(self, X):
        X = self._check_batch(X)
        u = (X[:, None, :] - self.centers[None, :, None]) / self.width
        return np.exp(-0.5 * u * u).mean(axis=2)

    def jacobian_batch(self, X, t=0.0):
        X = self._check_batch(X)
        u = (X[:, None, :] - self.centers[None, :, None]) / self.width
        return -u * np.exp(-0.5 * u * u) / (self.width * self.dim_in)

    def describe(self):
        return {"type": "marginal", "num_centers": self.dim_out, "span": self.span}


class EnsembleVelocity(FeatureMap):
    """Velocity fields used directly as feature gradients: row i is ``b_i(x, t)``.

    ``fields`` take an (n, d) batch and a time and return (n, d).
    """

    time_dependent = True

    def __init__(self, d: int, fields: Sequence[VelocityField], descriptor: dict | None = None):
        if not fields:
            raise ConfigError("ensemble needs at least one velocity field")
        self.dim_in = int(d)
        self.fields = tuple(fields)
        self.dim_out = len(self.fields)
        self._descriptor = descriptor

    def jacobian_batch(self, X, t=0.0):
        X = self._check_batch(X)
        rows = [np.asarray(f(X, t), dtype=float) for f in self.fields]
        for i, r in enumerate(rows):
            if r.shape != X.shape:
                raise ValueError(f"velocity field {i} returned shape {r.shape}, expected {X.shape}")
        return np.stack(rows, axis=1)

    def describe(self):
        if self._descriptor is None:
            return {"type": "ensemble", "fields": "opaque"}
        return self._descriptor


class Concat(FeatureMap):
    """Row-block stacking of several maps sharing ``dim_in``."""

    def __init__(self, maps: Sequence[FeatureMap]):
        maps = list(maps)
        if not maps:
            raise ConfigError("concat needs at least one map")
        dims = {m.dim_in for m in maps}
        if len(dims) != 1:
            raise ConfigError(f"concat maps disagree on dim_in: {sorted(dims)}")
        self.maps = tuple(maps)
        self.dim_in = maps[0].dim_in
        self.dim_out = sum(m.dim_out for m in maps)
        self.time_dependent = any(m.time_dependent for m in maps)

    def jacobian_batch(self, X, t=0.0):
        X = self._check_batch(X)
        return np.concatenate([m.jacobian_batch(X, t) for m in self.maps], axis=1)

    def values(self, X):
        return np.concatenate([m.values(X) for m in self.maps], axis=1)

    def describe(self):
        return {"type": "concat", "maps": [m.describe() for m in self.maps]}


def concat(maps: Sequence[FeatureMap]) -> Concat:
    return Concat(maps)


# ---------------------------------------------------------------------------
# synthetic velocity fields for the ensemble map


def affine_field(A0, c0, A1=None, c1=None) -> VelocityField:
    """Field ``x -> (A0 + t A1) x + (c0 + t c1)``."""
    A0 = np.asarray(A0, dtype=float)
    c0 = np.asarray(c0, dtype=float)
    A1 = np.zeros_like(A0) if A1 is None else np.asarray(A1, dtype=float)
    c1 = np.zeros_like(c0) if c1 is None else np.asarray(c1, dtype=float)

    def field(X, t):
        return X @ (A0 + t * A1).T + (c0 + t * c1)

    return field


def gaussian_drift_field(target, schedule, perturb_A=None, perturb_c=None) -> VelocityField:
    """Exact Gaussian-target drift plus a fixed affine perturbation ``A x + c``."""
    from ksi.oracle import exact_drift

    d = target.dim
    A = np.zeros((d, d)) if perturb_A is None else np.asarray(perturb_A, dtype=float)
    c = np.zeros(d) if perturb_c is None else np.asarray(perturb_c, dtype=float)

    def field(X, t):
        return exact_drift(target, schedule, t, X) + X @ A.T + c

    return field


def _build_field(spec: dict, d: int, schedule, pointer: str) -> VelocityField:
    from ksi.oracle import GaussianTarget

    kind = spec.get("kind")
    if kind == "affine":
        A0 = np.asarray(spec.get("A0", np.zeros((d, d))), dtype=float)
        c0 = np.asarray(spec.get("c0", np.zeros(d)), dtype=float)
        if A0.shape != (d, d) or c0.shape != (d,):
            raise ConfigError(f"affine field needs A0 of shape ({d},{d}) and c0 of length {d}", pointer)
        return affine_field(A0, c0, spec.get("A1"), spec.get("c1"))
    if kind == "gaussian_drift":
        if schedule is None:
            raise ConfigError("gaussian_drift fields need a schedule", pointer)
        target = GaussianTarget.from_spec(spec["target"], pointer + "/target")
        if target.dim != d:
            raise ConfigError(f"gaussian_drift target has dimension {target.dim}, data has {d}", pointer)
        return gaussian_drift_field(target, schedule, spec.get("perturb_A"), spec.get("perturb_c"))
    raise ConfigError(f"unknown velocity field kind {kind!r}; expected 'affine' or 'gaussian_drift'", pointer)


def build_feature_map(spec, d: int, schedule=None, pointer: str = "/features") -> FeatureMap:
    """Construct a feature map from its config/descriptor form."""
    if isinstance(spec, str):
        spec = {"type": spec}
    kind = spec.get("type")
    if kind == "linear":
        return LinearCoordinates(d)
    if kind == "radial_quadratic":
        return RadialQuadratic(d)
    if kind == "monomials":
        return Monomials(d)
    if kind == "haar_scatter":
        return HaarScattering1D(d, spec.get("levels", 1))
    if kind == "rff":
        return RandomFourier(d, spec.get("num_frequencies", 1), spec.get("bandwidth", 1.0), spec.get("seed", 0))
    if kind == "leverage":
        return LaggedLeverage(d, spec.get("max_lag", 1))
    if kind == "marginal":
        return MarginalBumps(d, spec.get("num_centers", 2), spec.get("span", 1.0))
    if kind == "ensemble":
        fields = spec.get("fields")
        if not isinstance(fields, list):
            raise ConfigError("ensemble descriptor has no inline field list", pointer)
        built = [_build_field(f, d, schedule, f"{pointer}/fields/{i}") for i, f in enumerate(fields)]
        return EnsembleVelocity(d, built, descriptor=spec)
    if kind == "concat":
        maps = [build_feature_map(m, d, schedule, f"{pointer}/maps/{i}") for i, m in enumerate(spec.get("maps", []))]
        return Concat(maps)
    raise ConfigError(f"unknown feature map type {kind!r}", pointer)
