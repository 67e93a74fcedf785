"""SDE integrators for drift-table generation and the reversed-OU validator."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from ksi.errors import ConfigError, GenerationError, NumericalError
from ksi.features import FeatureMap
from ksi.fit import DriftTable
from ksi.schedules import Schedule

# per-chain noise is drawn in blocks of steps; cap each block buffer at ~32 MB
_NOISE_BUFFER_FLOATS = 4_000_000


@dataclass(frozen=True)
class Diffusion:
    """Diffusion mode: ``optimal`` (D*), ``constant`` (D = value) or ``zero``."""

    kind: str
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("optimal", "constant", "zero"):
            raise ConfigError(f"unknown diffusion mode {self.kind!r}")
        if self.kind == "constant" and not (self.value >= 0 and math.isfinite(self.value)):
            raise ConfigError("constant diffusion must be finite and >= 0")

    @classmethod
    def optimal(cls):
        return cls("optimal")

    @classmethod
    def constant(cls, D: float):
        return cls("constant", float(D))

    @classmethod
    def zero(cls):
        return cls("zero")

    @classmethod
    def from_spec(cls, spec) -> "Diffusion":
        if spec in ("optimal", "zero"):
            return cls(spec)
        if isinstance(spec, dict) and set(spec) == {"constant"}:
            return cls.constant(spec["constant"])
        raise ConfigError(f"diffusion must be 'optimal', 'zero' or {{'constant': D}}, got {spec!r}")

    def to_spec(self):
        return {"constant": self.value} if self.kind == "constant" else self.kind

    def __str__(self):
        return f"constant({self.value:g})" if self.kind == "constant" else self.kind


@dataclass(frozen=True)
class GenConfig:
    steps: int
    num_samples: int
    seed: int = 0
    schedule: str = "trig"
    diffusion: Diffusion = field(default_factory=Diffusion.optimal)

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.num_samples < 1:
            raise ConfigError("num_samples must be >= 1")


@dataclass
class SampleBatch:
    states: np.ndarray
    config: GenConfig
    stream_ids: np.ndarray


class TableDrift:
    """Drift ``grad_phi(x, t).T @ eta`` with eta looked up at the left grid node."""

    def __init__(self, table: DriftTable, fmap: FeatureMap):
        if fmap.dim_out != table.num_features:
            raise ConfigError(f"feature map has P={fmap.dim_out}, table has P={table.num_features}")
        self.table = table
        self.fmap = fmap
        self.dim = fmap.dim_in

    def __call__(self, X, t):
        return self.fmap.drift_apply(X, t, self.table.eta_at(t))


def step_optimal(x, t: float, h: float, drift, schedule: Schedule, g) -> np.ndarray:
    """One step of the D*-integrator written for ``d(beta X) = 2 beta b dt + ...``.

    The state enters only through ``beta_t / beta_{t+h}``, so at t = 0 the
    previous state is dropped and no infinite diffusion is ever formed.
    """
    t1 = t + h
    if abs(t1 - 1.0) <= 1e-12:
        t1 = 1.0
    b0, b1 = schedule.beta(t), schedule.beta(t1)
    if not b1 > 0:
        raise NumericalError("beta vanishes at the step end", t=t1)
    ratio = b0 / b1
    var = h * (schedule.alpha(t) * b0 * schedule.gamma(t) + schedule.alpha(t1) * b1 * schedule.gamma(t1))
    return ratio * x + h * (1.0 + ratio) * drift(x, t) + (math.sqrt(max(var, 0.0)) / b1) * g


def step_generic(x, t: float, h: float, drift, schedule: Schedule, D: float, g) -> np.ndarray:
    """Euler-Maruyama step of the explicit SDE with diffusion ``D``."""
    if D < 0 or not math.isfinite(D):
        raise ValueError("D must be finite and non-negative")
    ag = schedule.alpha(t) * schedule.gamma(t)
    if not ag > 0:
        raise NumericalError("alpha*gamma vanishes; the explicit SDE is undefined here", t=t)
    b = drift(x, t)
    if D == 0:
        return x + h * b
    coef = D * schedule.beta(t) / ag
    pull = D * schedule.dbeta(t) / ag
    return x + h * ((1.0 + coef) * b - pull * x) + math.sqrt(2.0 * D * h) * g


def chain_stream(seed: int, chain: int) -> np.random.Generator:
    """Counter-based per-chain stream keyed on (seed, chain index)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(1, chain))))


def _run_chunk(chains, drift, schedule, cfg, d):
    K = cfg.steps
    h = 1.0 / K
    gens = [chain_stream(cfg.seed, c) for c in chains]
    n = len(chains)
    X = np.stack([g.standard_normal(d) for g in gens])
    block = max(1, min(K, _NOISE_BUFFER_FLOATS // max(1, n * d)))
    alive = np.ones(n, dtype=bool)
    failures = []
    noise = None
    for k in range(K):
        if k % block == 0:
            rows = min(block, K - k)
            noise = np.stack([g.standard_normal((rows, d)) for g in gens], axis=1)
        gk = noise[k % block]
        t = k / K
        if cfg.diffusion.kind == "optimal":
            X = step_optimal(X, t, h, drift, schedule, gk)
        else:
            D = cfg.diffusion.value if cfg.diffusion.kind == "constant" else 0.0
            X = step_generic(X, t, h, drift, schedule, D, gk)
        bad = alive & ~np.all(np.isfinite(X), axis=1)
        if np.any(bad):
            for i in np.flatnonzero(bad):
                failures.append((int(chains[i]), k, t))
            alive &= ~bad
            X[bad] = 0.0
    return X, failures


def generate(drift, schedule: Schedule, cfg: GenConfig, threads: int = 1, chunk: int | None = None) -> SampleBatch:
    """Integrate ``cfg.num_samples`` independent chains from N(0, Id) at t=0 to t=1.

    Each chain draws its initial state and then its per-step noise
    (step-major, coordinate-minor) from its own stream, so results do not
    depend on chunking or thread count. Failures are all-or-nothing.
    """
    if isinstance(drift, TableDrift) and cfg.diffusion.kind == "optimal" and drift.table.steps != cfg.steps:
        raise ConfigError(f"optimal mode needs steps == table steps ({drift.table.steps}), got {cfg.steps}")
    d = drift.dim
    M = cfg.num_samples
    if chunk is None:
        chunk = max(1, min(M, 8192, _NOISE_BUFFER_FLOATS // max(1, 16 * d)))
    starts = list(range(0, M, chunk))

    def work(lo):
        return _run_chunk(np.arange(lo, min(lo + chunk, M)), drift, schedule, cfg, d)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, starts))
    else:
        results = [work(lo) for lo in starts]
    failures = sorted(f for _, fs in results for f in fs)
    if failures:
        raise GenerationError(failures)
    states = np.concatenate([X for X, _ in results], axis=0)
    return SampleBatch(states=states, config=cfg, stream_ids=np.arange(M))


# ---------------------------------------------------------------------------
# reversed (data -> noise) dynamics under D*


def _reverse_variance(schedule: Schedule, t_hi: float, t_lo: float, panels: int = 64) -> float:
    """Composite-trapezoid variance of one exact linear step from t_hi down to t_lo.

    integral over [t_lo, t_hi] of (beta_lo / beta_s)^2 * 2 alpha_s gamma_s / beta_s ds
    """
    s = np.linspace(t_lo, t_hi, panels + 1)
    b_lo = schedule.beta(t_lo)
    f = (b_lo / schedule.beta(s)) ** 2 * 2.0 * schedule.alpha(s) * schedule.gamma(s) / schedule.beta(s)
    return float(trapezoid(f, s))


def reversed_ou_generate(data, schedule: Schedule, steps: int, seed: int = 0, snapshots=None, tail: float = 0.01):
    """Run the score-free reversed dynamics from data (tau=0) to noise (tau=1).

    Returns ``{tau: states}`` for each requested snapshot (rounded to the
    nearest grid node). The linear drift is integrated exactly; the
    increment variance uses trapezoidal quadrature. For the linear schedule
    the last ``tail`` of the tau-range uses the closed-form solution
    ``Y = (1 - tau) Z``; other schedules stop at ``1 - 1/steps`` and report a
    fresh standard normal at tau = 1.
    """
    if steps < 10:
        raise ValueError("reversed_ou_generate needs steps >= 10")
    if schedule.kind not in ("linear", "trig"):
        raise ValueError("reversed_ou_generate supports the built-in schedules only")
    Y = np.array(data, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    taus = np.arange(steps + 1) / steps
    wanted = np.arange(steps + 1) if snapshots is None else np.unique(np.rint(np.asarray(snapshots) * steps).astype(int))
    if np.any((wanted < 0) | (wanted > steps)):
        raise ValueError("snapshot times must lie in [0, 1]")
    wanted = set(int(k) for k in wanted)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(2,))))
    out = {}
    if 0 in wanted:
        out[0.0] = Y.copy()
    if schedule.kind == "linear":
        k_tail = int(math.floor((1.0 - tail) * steps))
    else:
        k_tail = steps - 1
    for k in range(k_tail):
        t_hi, t_lo = 1.0 - taus[k], 1.0 - taus[k + 1]
        decay = schedule.beta(t_lo) / schedule.beta(t_hi)
        var = _reverse_variance(schedule, t_hi, t_lo)
        Y = decay * Y + math.sqrt(var) * rng.standard_normal(Y.shape)
        if k + 1 in wanted:
            out[float(taus[k + 1])] = Y.copy()
    if schedule.kind == "linear":
        tau_s = taus[k_tail]
        Z = Y / (1.0 - tau_s)
        v_s = tau_s**2 / (1.0 - tau_s) ** 2
        for k in range(k_tail + 1, steps):
            tau = taus[k]
            v = tau**2 / (1.0 - tau) ** 2
            Z = Z + math.sqrt(v - v_s) * rng.standard_normal(Y.shape)
            v_s = v
            if k in wanted:
                out[float(tau)] = (1.0 - tau) * Z
    if steps in wanted:
        # (1 - tau) Z_tau -> N(0, Id) independently of the past as tau -> 1
        out[1.0] = rng.standard_normal(Y.shape)
    return out
