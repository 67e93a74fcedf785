"""Sample-quality metrics and consistency checks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from ksi.features import Concat, FeatureMap, RadialQuadratic
from ksi.fit import DataPairs, assemble, interpolate, solve_eta
from ksi.oracle import GaussianTarget, exact_drift
from ksi.schedules import Schedule


@dataclass(frozen=True)
class Metric:
    value: float
    se: float
    reference: float = 0.0

    @property
    def z(self) -> float:
        if self.se == 0:
            return 0.0 if self.value == self.reference else math.copysign(math.inf, self.value - self.reference)
        return (self.value - self.reference) / self.se


@dataclass
class MetricReport:
    metrics: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add(self, name: str, value: float, se: float, reference: float = 0.0):
        if not (math.isfinite(value) and math.isfinite(se)) or se < 0:
            raise ValueError(f"metric {name!r} must be finite with se >= 0, got {value}, {se}")
        self.metrics[name] = Metric(float(value), float(se), float(reference))

    def max_abs_z(self, prefix: str = "") -> float:
        zs = [abs(m.z) for k, m in self.metrics.items() if k.startswith(prefix)]
        return max(zs) if zs else 0.0

    def to_dict(self) -> dict:
        return {
            "metrics": {
                k: {"value": m.value, "se": m.se, "reference": m.reference, "z": m.z} for k, m in self.metrics.items()
            },
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# MMD


def _canonical_rows(x: np.ndarray) -> np.ndarray:
    return x[np.lexsort(x.T[::-1])]


def median_bandwidth(x: np.ndarray, y: np.ndarray, max_points: int = 1000) -> float:
    """Median pairwise distance of the pooled sample (strided subsample if large)."""
    pooled = _canonical_rows(np.concatenate([x, y], axis=0))
    stride = max(1, math.ceil(pooled.shape[0] / max_points))
    return float(np.median(pdist(pooled[::stride])))


def _kernel_row_sums(a, b, bw, chunk=2048):
    """Row sums of exp(-|a_i - b_j|^2 / (2 bw^2)) over j."""
    out = np.empty(a.shape[0])
    b2 = np.sum(b * b, axis=1)
    for lo in range(0, a.shape[0], chunk):
        blk = a[lo : lo + chunk]
        sq = np.sum(blk * blk, axis=1)[:, None] + b2[None, :] - 2.0 * blk @ b.T
        np.maximum(sq, 0.0, out=sq)
        out[lo : lo + chunk] = np.exp(-sq / (2.0 * bw * bw)).sum(axis=1)
    return out


def mmd2(x, y, bandwidth: float | None = None):
    """Unbiased squared MMD with a Gaussian RBF kernel, and its jackknife standard error.

    Rows are put in canonical order first, so the result does not depend on
    sample ordering. ``bandwidth`` defaults to the median heuristic.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ValueError("mmd2 needs at least two samples on each side")
    x, y = _canonical_rows(x), _canonical_rows(y)
    bw = median_bandwidth(x, y) if bandwidth is None else float(bandwidth)
    if not bw > 0:
        raise ValueError("degenerate input: kernel bandwidth is zero (all points identical?)")
    # row sums exclude the diagonal (k(u, u) = 1)
    axx = _kernel_row_sums(x, x, bw) - 1.0
    ayy = _kernel_row_sums(y, y, bw) - 1.0
    cxy = _kernel_row_sums(x, y, bw)
    cyx = _kernel_row_sums(y, x, bw)
    A, B, C = math.fsum(axx), math.fsum(ayy), math.fsum(cxy)
    est = A / (m * (m - 1)) + B / (n * (n - 1)) - 2.0 * C / (m * n)

    jx = (A - 2 * axx) / ((m - 1) * (m - 2)) + B / (n * (n - 1)) - 2 * (C - cxy) / ((m - 1) * n) if m > 2 else None
    jy = A / (m * (m - 1)) + (B - 2 * ayy) / ((n - 1) * (n - 2)) - 2 * (C - cyx) / (m * (n - 1)) if n > 2 else None
    var = 0.0
    for j, k in ((jx, m), (jy, n)):
        if j is not None:
            var += (k - 1) / k * float(np.sum((j - j.mean()) ** 2))
    return float(est), math.sqrt(var)


def gaussian_rbf_mmd2(mean1, cov1, mean2, cov2, bandwidth: float) -> float:
    """Population squared MMD between two Gaussians under the RBF kernel, in closed form."""
    mean1, mean2 = np.atleast_1d(mean1).astype(float), np.atleast_1d(mean2).astype(float)
    cov1, cov2 = np.atleast_2d(cov1).astype(float), np.atleast_2d(cov2).astype(float)
    s2 = bandwidth**2
    d = mean1.size

    def expected_kernel(mu, S):
        M = np.eye(d) + S / s2
        return np.linalg.det(M) ** -0.5 * math.exp(-0.5 * mu @ np.linalg.solve(s2 * M, mu))

    zero = np.zeros(d)
    return (
        expected_kernel(zero, 2 * cov1)
        + expected_kernel(zero, 2 * cov2)
        - 2 * expected_kernel(mean1 - mean2, cov1 + cov2)
    )


# ---------------------------------------------------------------------------
# moments


def _grouped_jackknife_cov_se(x: np.ndarray, groups: int) -> np.ndarray:
    n, d = x.shape
    G = min(groups, n)
    bounds = np.linspace(0, n, G + 1).astype(int)
    s1 = np.stack([x[lo:hi].sum(axis=0) for lo, hi in zip(bounds[:-1], bounds[1:])])
    s2 = np.stack([x[lo:hi].T @ x[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])])
    counts = np.diff(bounds)
    t1, t2 = s1.sum(axis=0), s2.sum(axis=0)
    covs = np.empty((G, d, d))
    for g in range(G):
        k = n - counts[g]
        mu = (t1 - s1[g]) / k
        covs[g] = ((t2 - s2[g]) / k - np.outer(mu, mu)) * k / (k - 1)
    return np.sqrt((G - 1) / G * np.sum((covs - covs.mean(axis=0)) ** 2, axis=0))


def moment_report(x, reference, groups: int = 100) -> MetricReport:
    """Mean and covariance errors of ``x`` against a Gaussian target or a reference sample.

    Mean errors use the exact jackknife (s / sqrt(n)); covariance errors use a
    grouped jackknife. Against an empirical reference the two standard errors
    are combined in quadrature.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError("moment_report needs at least two samples")
    d = x.shape[1]
    mean = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    mean_se = x.std(axis=0, ddof=1) / math.sqrt(x.shape[0])
    cov_se = _grouped_jackknife_cov_se(x, groups)
    if isinstance(reference, GaussianTarget):
        ref_mean, ref_cov = reference.mean, reference.cov
        ref_mean_se, ref_cov_se = np.zeros(d), np.zeros((d, d))
        n_ref = None
    else:
        ref = np.asarray(reference, dtype=float)
        if ref.ndim == 1:
            ref = ref[:, None]
        ref_mean = ref.mean(axis=0)
        ref_cov = np.atleast_2d(np.cov(ref, rowvar=False))
        ref_mean_se = ref.std(axis=0, ddof=1) / math.sqrt(ref.shape[0])
        ref_cov_se = _grouped_jackknife_cov_se(ref, groups)
        n_ref = ref.shape[0]
    report = MetricReport(metadata={"num_samples": x.shape[0], "dim": d, "reference_samples": n_ref})
    for i in range(d):
        report.add(f"mean[{i}]", mean[i], math.hypot(mean_se[i], ref_mean_se[i]), ref_mean[i])
    for i in range(d):
        for j in range(i, d):
            report.add(f"cov[{i},{j}]", cov[i, j], math.hypot(cov_se[i, j], ref_cov_se[i, j]), ref_cov[i, j])
    return report


# ---------------------------------------------------------------------------
# time-series statistics


def _pearson(u: np.ndarray, v: np.ndarray) -> float:
    # fsum is exactly rounded, so the value is independent of pair order
    n = u.size
    mu, mv = math.fsum(u) / n, math.fsum(v) / n
    du, dv = u - mu, v - mv
    suv = math.fsum(du * dv)
    suu, svv = math.fsum(du * du), math.fsum(dv * dv)
    if suu == 0 or svv == 0:
        raise ValueError("zero-variance series: correlation undefined")
    return suv / math.sqrt(suu * svv)


def leverage_effect(series, max_lag: int) -> dict[int, float]:
    """``corr(r_t, r_{t+lag}**2)`` for lag in [-max_lag, max_lag] over valid t.

    Negative values at positive lags mean returns anticipate lower future
    volatility (the leverage effect). The volatility proxy is the squared return.
    """
    r = np.asarray(series, dtype=float).ravel()
    T = r.size
    if T <= 2 * max_lag:
        raise ValueError(f"series length {T} must exceed 2 * max_lag = {2 * max_lag}")
    if np.all(r == r[0]):
        raise ValueError("constant series: correlation undefined")
    sq = r * r
    out = {}
    for lag in range(-max_lag, max_lag + 1):
        if lag >= 0:
            out[lag] = _pearson(r[: T - lag], sq[lag:])
        else:
            out[lag] = _pearson(r[-lag:], sq[: T + lag])
    return out


def density_histogram(values, bins: int = 60, value_range=None):
    """Normalized histogram (bin centers, density) for plotting."""
    dens, edges = np.histogram(np.ravel(values), bins=bins, range=value_range, density=True)
    return 0.5 * (edges[:-1] + edges[1:]), dens


# ---------------------------------------------------------------------------
# score matching vs drift regression


def _radial_index(fmap: FeatureMap) -> int | None:
    if isinstance(fmap, RadialQuadratic):
        return 0
    if isinstance(fmap, Concat):
        offset = 0
        for m in fmap.maps:
            idx = _radial_index(m)
            if idx is not None:
                return offset + idx
            offset += m.dim_out
    return None


@dataclass(frozen=True)
class ScoreEquivalence:
    eta: np.ndarray
    zeta: np.ndarray
    zeta_from_drift: np.ndarray | None
    max_deviation: float
    has_radial: bool
    flagged: bool


def score_matching_equivalence(
    pairs: DataPairs,
    schedule: Schedule,
    t: float,
    fmap: FeatureMap,
    ridge: float = 0.0,
    n_eval: int = 100,
    seed: int = 0,
) -> ScoreEquivalence:
    """Compare the drift-derived score estimate with direct score regression.

    Drift route: solve ``K eta = mean J Idot`` then map the drift to a score.
    Direct route: solve ``K zeta = -mean J z / alpha``. Both fields are
    evaluated at ``n_eval`` interpolant points and the largest absolute
    componentwise difference is returned. The routes agree exactly when the
    feature set contains |x|^2/2; otherwise the deviation is only reported.
    """
    if not 0 < t < 1:
        raise ValueError("t must lie in (0, 1)")
    a, b, db, g = schedule.alpha(t), schedule.beta(t), schedule.dbeta(t), schedule.gamma(t)
    batch = interpolate(pairs, schedule, t)
    system = assemble(fmap, batch)
    drift_sol = solve_eta(system, ridge)
    # same Gram matrix, noise-regression right-hand side
    noise_batch = type(batch)(I=batch.I, Idot=-pairs.z / a, t=t)
    score_system = assemble(fmap, noise_batch)
    score_sol = solve_eta(score_system, ridge)

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(3,))))
    idx = rng.choice(pairs.n, size=min(n_eval, pairs.n), replace=False)
    X = batch.I[np.sort(idx)]
    derived = (b * fmap.drift_apply(X, t, drift_sol.eta) - db * X) / (a * g)
    direct = fmap.drift_apply(X, t, score_sol.eta)
    rad = _radial_index(fmap)
    zeta_from_drift = None
    if rad is not None:
        zeta_from_drift = b * drift_sol.eta / (a * g)
        zeta_from_drift[rad] -= db / (a * g)
    return ScoreEquivalence(
        eta=drift_sol.eta,
        zeta=score_sol.eta,
        zeta_from_drift=zeta_from_drift,
        max_deviation=float(np.max(np.abs(derived - direct))),
        has_radial=rad is not None,
        flagged=drift_sol.fallback or score_sol.fallback,
    )


# ---------------------------------------------------------------------------
# ensemble combination


@dataclass(frozen=True)
class EnsembleRow:
    t: float
    individual_mse: np.ndarray
    combined_mse: float
    individual_excess: np.ndarray
    combined_excess: float
    eta: np.ndarray


def ensemble_comparison(
    fmap: FeatureMap,
    target: GaussianTarget,
    schedule: Schedule,
    pairs: DataPairs,
    times,
    ridge: float = 0.0,
) -> list[EnsembleRow]:
    """Per-field versus combined drift error for a velocity ensemble, in-sample.

    ``*_mse`` is mean |b_hat - b|^2 against the exact drift over the training
    interpolants. ``*_excess`` is the in-sample regression loss
    mean |b_hat - Idot|^2 minus that of the exact drift; least squares over
    the span guarantees the combined value is no larger than any single field's.
    """
    rows = []
    for t in times:
        batch = interpolate(pairs, schedule, t)
        sol = solve_eta(assemble(fmap, batch), ridge)
        J = fmap.jacobian_batch(batch.I, t)
        exact = exact_drift(target, schedule, t, batch.I)
        base_loss = np.mean(np.sum((exact - batch.Idot) ** 2, axis=1))

        def errs(pred):
            mse = np.mean(np.sum((pred - exact) ** 2, axis=1))
            loss = np.mean(np.sum((pred - batch.Idot) ** 2, axis=1))
            return mse, loss - base_loss

        indiv = [errs(J[:, i, :]) for i in range(fmap.dim_out)]
        comb = errs(np.einsum("npd,p->nd", J, sol.eta))
        rows.append(
            EnsembleRow(
                t=float(t),
                individual_mse=np.array([m for m, _ in indiv]),
                combined_mse=float(comb[0]),
                individual_excess=np.array([e for _, e in indiv]),
                combined_excess=float(comb[1]),
                eta=sol.eta,
            )
        )
    return rows


def drift_mse(drift, target: GaussianTarget, schedule: Schedule, t: float, draws: int = 100_000, seed: int = 0) -> float:
    """Monte Carlo E|b_hat(I_t) - b(I_t)|^2 over fresh interpolant draws."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(4,))))
    z = rng.standard_normal((draws, target.dim))
    a = target.sample(draws, rng)
    I = schedule.alpha(t) * z + schedule.beta(t) * a
    diff = drift(I, t) - exact_drift(target, schedule, t, I)
    return float(np.mean(np.sum(diff * diff, axis=1)))
