"""Empirical Gram systems and the drift table.

At each grid time the drift coefficients solve ``K eta = r`` with

    K = mean_n J_n J_n^T,    r = mean_n J_n Idot_n,

where ``J_n`` is the feature Jacobian at the interpolant sample ``I_n``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ksi.errors import NumericalError
from ksi.features import FeatureMap
from ksi.schedules import Schedule

log = logging.getLogger(__name__)

DEFAULT_RIDGE = 1e-8
PSEUDO_INVERSE_CUTOFF = 1e-10
# squared Cholesky pivots below this fraction of max(diag K) count as a failed factorization
PIVOT_TOLERANCE = 1e-14
_SMALL_DIM = 8


@dataclass(frozen=True)
class DataPairs:
    """Paired noise/data draws; row n of ``z`` is matched with row n of ``a``."""

    z: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        z = np.ascontiguousarray(self.z, dtype=float)
        a = np.ascontiguousarray(self.a, dtype=float)
        if z.ndim != 2 or z.shape != a.shape:
            raise ValueError(f"z and a must be matching 2-D arrays, got {z.shape} and {a.shape}")
        if z.shape[0] < 1:
            raise ValueError("need at least one pair")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(a))):
            raise ValueError("data pairs contain non-finite entries")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "a", a)

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def d(self) -> int:
        return self.z.shape[1]

    @classmethod
    def with_noise(cls, a: np.ndarray, seed: int) -> "DataPairs":
        """Pair targets ``a`` with standard-normal ``z`` regenerated from ``seed``."""
        a = np.atleast_2d(np.asarray(a, dtype=float))
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0x7A,))))
        return cls(rng.standard_normal(a.shape), a)


@dataclass(frozen=True)
class InterpolantBatch:
    I: np.ndarray
    Idot: np.ndarray
    t: float


@dataclass(frozen=True)
class GramSystem:
    K: np.ndarray
    r: np.ndarray
    t: float


@dataclass(frozen=True)
class EtaSolution:
    """Result of :func:`solve_eta`. ``fallback`` marks a pseudo-inverse solve."""

    eta: np.ndarray
    fallback: bool
    condition: float


@dataclass
class DriftTable:
    """Drift coefficients on a uniform grid, used piecewise-constant from the left node.

    ``etas[k]`` applies on ``[grid[k], grid[k+1])``.
    """

    grid: np.ndarray
    etas: np.ndarray
    feature_map: dict
    schedule_id: int
    ridge: float
    n_pairs: int
    dim: int
    conditions: np.ndarray | None = field(default=None, compare=False)
    fallback_nodes: tuple = field(default=(), compare=False)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.etas = np.atleast_2d(np.asarray(self.etas, dtype=float))
        if self.grid.ndim != 1 or self.grid.size < 2:
            raise ValueError("grid needs at least two nodes")
        if self.grid[0] != 0.0 or self.grid[-1] != 1.0 or np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must increase strictly from 0 to 1")
        if self.etas.shape[0] != self.grid.size - 1:
            raise ValueError(f"{self.grid.size - 1} grid intervals but {self.etas.shape[0]} eta rows")

    @property
    def steps(self) -> int:
        return self.etas.shape[0]

    @property
    def num_features(self) -> int:
        return self.etas.shape[1]

    def node_index(self, t: float) -> int:
        """Index of the left grid node for time ``t`` (the last interval is closed)."""
        k = int(np.searchsorted(self.grid, t, side="right")) - 1
        return min(max(k, 0), self.steps - 1)

    def eta_at(self, t: float) -> np.ndarray:
        return self.etas[self.node_index(t)]

    def identical(self, other: "DriftTable") -> bool:
        """Bitwise equality of every persisted field."""
        return (
            self.grid.tobytes() == other.grid.tobytes()
            and self.etas.shape == other.etas.shape
            and self.etas.tobytes() == other.etas.tobytes()
            and self.feature_map == other.feature_map
            and self.schedule_id == other.schedule_id
            and np.float64(self.ridge).tobytes() == np.float64(other.ridge).tobytes()
            and self.n_pairs == other.n_pairs
            and self.dim == other.dim
        )


def interpolate(pairs: DataPairs, schedule: Schedule, t: float) -> InterpolantBatch:
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    a, b = schedule.alpha(t), schedule.beta(t)
    da, db = schedule.dalpha(t), schedule.dbeta(t)
    return InterpolantBatch(I=a * pairs.z + b * pairs.a, Idot=da * pairs.z + db * pairs.a, t=float(t))


def _canonical_order(batch: InterpolantBatch) -> np.ndarray:
    keys = np.concatenate([batch.I, batch.Idot], axis=1)
    # lexsort treats the last key as primary
    return np.lexsort(keys.T[::-1])


def canonical_pairs(pairs: DataPairs) -> DataPairs:
    """Pairs reordered lexicographically by (z, a) rows."""
    keys = np.concatenate([pairs.z, pairs.a], axis=1)
    order = np.lexsort(keys.T[::-1])
    return DataPairs(pairs.z[order], pairs.a[order])


def assemble(
    fmap: FeatureMap, batch: InterpolantBatch, chunk: int | None = None, canonical: bool = True
) -> GramSystem:
    """Empirical Gram matrix and right-hand side at ``batch.t``.

    With ``canonical`` set, samples are summed in lexicographic order of
    (I, Idot) so the result does not depend on how the pairs were ordered.
    :func:`fit_table` sorts the pairs once up front and skips this.
    """
    if batch.I.shape[1] != fmap.dim_in:
        raise ValueError(f"batch dimension {batch.I.shape[1]} != feature map dim_in {fmap.dim_in}")
    if canonical:
        order = _canonical_order(batch)
        I, Idot = batch.I[order], batch.Idot[order]
    else:
        I, Idot = batch.I, batch.Idot
    n, d = I.shape
    P = fmap.dim_out
    if chunk is None:
        chunk = max(1, int(2**24 // max(1, P * d)))
    # per-sample products stored sample-minor so the mean is a contiguous pairwise sum
    KK = np.empty((P, P, n))
    rr = np.empty((P, n))
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        J = fmap.jacobian_batch(I[lo:hi], batch.t)
        if not np.all(np.isfinite(J)):
            raise NumericalError("non-finite feature Jacobian", t=batch.t)
        if d <= _SMALL_DIM:
            Jt = np.ascontiguousarray(J.transpose(1, 2, 0))
            KK[:, :, lo:hi] = np.einsum("pcn,qcn->pqn", Jt, Jt)
            rr[:, lo:hi] = np.einsum("pcn,cn->pn", Jt, Idot[lo:hi].T)
        else:
            KK[:, :, lo:hi] = (J @ J.transpose(0, 2, 1)).transpose(1, 2, 0)
            rr[:, lo:hi] = np.einsum("npd,nd->pn", J, Idot[lo:hi])
    K = KK.sum(axis=2) / n
    r = rr.sum(axis=1) / n
    K = 0.5 * (K + K.T)
    return GramSystem(K=K, r=r, t=batch.t)


def _condition(K: np.ndarray) -> float:
    w = np.linalg.eigvalsh(K)
    top = w[-1]
    if top <= 0:
        return float("inf")
    return float(top / max(w[0], 0.0)) if w[0] > 0 else float("inf")


def solve_eta(system: GramSystem, ridge: float = DEFAULT_RIDGE) -> EtaSolution:
    """Solve ``(K + ridge * tr(K)/P * Id) eta = r``.

    Cholesky first; if it fails (or leaves a negligible pivot) fall back to an
    eigendecomposition pseudo-inverse with relative cutoff 1e-10 and flag it.
    """
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    K, r = system.K, system.r
    if not (np.all(np.isfinite(K)) and np.all(np.isfinite(r))):
        raise NumericalError("Gram system has non-finite entries", t=system.t)
    P = K.shape[0]
    trace = float(np.trace(K))
    if trace == 0.0:
        if np.any(r != 0):
            raise NumericalError("Gram matrix is zero but right-hand side is not: drift is unrepresentable", t=system.t)
        return EtaSolution(np.zeros(P), fallback=True, condition=float("inf"))
    Kr = K + (ridge * trace / P) * np.eye(P)
    condition = _condition(Kr)
    try:
        c, lower = scipy.linalg.cho_factor(Kr, lower=True, check_finite=False)
        pivots = np.diag(c) ** 2
        if np.min(pivots) <= PIVOT_TOLERANCE * np.max(np.diag(Kr)):
            raise np.linalg.LinAlgError("negligible pivot")
        eta = scipy.linalg.cho_solve((c, lower), r, check_finite=False)
        return EtaSolution(eta, fallback=False, condition=condition)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        pass
    w, V = np.linalg.eigh(Kr)
    keep = w > PSEUDO_INVERSE_CUTOFF * w[-1]
    eta = V[:, keep] @ ((V[:, keep].T @ r) / w[keep])
    log.warning("t=%.6g: Cholesky failed, used pseudo-inverse (%d of %d modes kept)", system.t, keep.sum(), P)
    return EtaSolution(eta, fallback=True, condition=condition)


def fit_table(
    fmap: FeatureMap,
    pairs: DataPairs,
    schedule: Schedule,
    steps: int,
    ridge: float = DEFAULT_RIDGE,
    threads: int = 1,
) -> DriftTable:
    """Solve the Gram system at every left node ``t_k = k / steps``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if pairs.d != fmap.dim_in:
        raise ValueError(f"data dimension {pairs.d} != feature map dim_in {fmap.dim_in}")
    grid = np.arange(steps + 1) / steps
    pairs = canonical_pairs(pairs)

    def node(k):
        t = float(grid[k])
        try:
            return solve_eta(assemble(fmap, interpolate(pairs, schedule, t), canonical=False), ridge)
        except NumericalError as exc:
            if exc.t is None:
                raise NumericalError(str(exc), t=t) from exc
            raise

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            sols = list(pool.map(node, range(steps)))
    else:
        sols = [node(k) for k in range(steps)]
    etas = np.stack([s.eta for s in sols])
    if not np.all(np.isfinite(etas)):
        bad = int(np.argmax(~np.all(np.isfinite(etas), axis=1)))
        raise NumericalError("non-finite drift coefficients", t=float(grid[bad]))
    return DriftTable(
        grid=grid,
        etas=etas,
        feature_map=fmap.describe(),
        schedule_id=schedule.id if schedule.kind != "custom" else 255,
        ridge=float(ridge),
        n_pairs=pairs.n,
        dim=pairs.d,
        conditions=np.array([s.condition for s in sols]),
        fallback_nodes=tuple(k for k, s in enumerate(sols) if s.fallback),
    )
