"""Interpolant coefficient schedules ``I_t = alpha_t z + beta_t a``.

All scalar functions accept floats or numpy arrays of times in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ksi.errors import ConfigError

ScalarFn = Callable[[np.ndarray], np.ndarray]

SCHEDULE_IDS = {"linear": 0, "trig": 1}
_GRID = np.linspace(0.0, 1.0, 1024)


def _lin_alpha(t):
    return 1.0 - t


def _lin_beta(t):
    return t + 0.0


def _lin_dalpha(t):
    return np.full_like(t, -1.0)


def _lin_dbeta(t):
    return np.full_like(t, 1.0)


_HALF_PI = 0.5 * math.pi


# cos(pi/2) is 6e-17 in floating point; pin the endpoint to an exact zero.
def _trig_alpha(t):
    return np.where(t == 1.0, 0.0, np.cos(_HALF_PI * t))


def _trig_beta(t):
    return np.where(t == 1.0, 1.0, np.sin(_HALF_PI * t))


def _trig_dalpha(t):
    return -_HALF_PI * _trig_beta(t)


def _trig_dbeta(t):
    return _HALF_PI * _trig_alpha(t)


@dataclass(frozen=True, eq=False)
class Schedule:
    """Coefficient pair (alpha, beta) with explicit derivatives.

    Use :meth:`linear`, :meth:`trig` or :meth:`custom` rather than the
    constructor. Invariants are checked on a 1024-point grid at construction
    and violations raise :class:`ConfigError`.
    """

    kind: str
    alpha_fn: ScalarFn = field(repr=False)
    beta_fn: ScalarFn = field(repr=False)
    dalpha_fn: ScalarFn = field(repr=False)
    dbeta_fn: ScalarFn = field(repr=False)

    def __post_init__(self):
        ends = [self._call(f, np.array([0.0, 1.0])) for f in (self.alpha_fn, self.beta_fn)]
        (a0, a1), (b0, b1) = ends
        if abs(a0 - 1) > 1e-12 or abs(a1) > 1e-12 or abs(b0) > 1e-12 or abs(b1 - 1) > 1e-12:
            raise ConfigError(
                f"schedule endpoints must satisfy alpha(0)=beta(1)=1, alpha(1)=beta(0)=0; "
                f"got alpha=({a0}, {a1}), beta=({b0}, {b1})"
            )
        inner = _GRID[1:-1]
        if not np.all(self.dalpha(inner) < 0):
            raise ConfigError("dalpha must be negative on (0, 1)")
        if not np.all(self.dbeta(inner) > 0):
            raise ConfigError("dbeta must be positive on (0, 1)")
        if not np.all(self.gamma(inner) > 0):
            raise ConfigError("gamma = alpha*dbeta - dalpha*beta must be positive on (0, 1)")

    @classmethod
    def linear(cls) -> "Schedule":
        return cls("linear", _lin_alpha, _lin_beta, _lin_dalpha, _lin_dbeta)

    @classmethod
    def trig(cls) -> "Schedule":
        return cls("trig", _trig_alpha, _trig_beta, _trig_dalpha, _trig_dbeta)

    @classmethod
    def custom(cls, alpha: ScalarFn, beta: ScalarFn, dalpha: ScalarFn, dbeta: ScalarFn) -> "Schedule":
        """User-supplied schedule. Derivatives must be given explicitly."""
        return cls("custom", alpha, beta, dalpha, dbeta)

    @classmethod
    def from_name(cls, name: str) -> "Schedule":
        if name == "linear":
            return cls.linear()
        if name in ("trig", "trigonometric"):
            return cls.trig()
        raise ConfigError(f"unknown schedule {name!r}; expected 'linear' or 'trig'")

    @classmethod
    def from_id(cls, sid: int) -> "Schedule":
        for name, value in SCHEDULE_IDS.items():
            if value == sid:
                return cls.from_name(name)
        raise ConfigError(f"unknown schedule id {sid}")

    @property
    def id(self) -> int:
        """Integer id used by the table file format (custom schedules have none)."""
        if self.kind not in SCHEDULE_IDS:
            raise ConfigError("custom schedules cannot be persisted")
        return SCHEDULE_IDS[self.kind]

    @staticmethod
    def _call(fn, t):
        arr = np.asarray(t, dtype=float)
        out = np.asarray(fn(arr), dtype=float)
        if out.shape != arr.shape:
            out = np.broadcast_to(out, arr.shape).copy()
        return out[()] if out.ndim == 0 else out

    def alpha(self, t):
        return self._call(self.alpha_fn, t)

    def beta(self, t):
        return self._call(self.beta_fn, t)

    def dalpha(self, t):
        return self._call(self.dalpha_fn, t)

    def dbeta(self, t):
        return self._call(self.dbeta_fn, t)

    def gamma(self, t):
        """``alpha * dbeta - dalpha * beta``; strictly positive on (0, 1)."""
        return self.alpha(t) * self.dbeta(t) - self.dalpha(t) * self.beta(t)

    def d_star(self, t):
        """Optimal diffusion ``alpha * gamma / beta``.

        Returns ``inf`` where beta vanishes (t = 0). The integrator never
        evaluates this; it exists for diagnostics and path-KL weights.
        """
        t = np.asarray(t, dtype=float)
        if np.any((t < 0) | (t > 1)):
            raise ValueError("t must lie in [0, 1]")
        beta = self.beta(t)
        num = self.alpha(t) * self.gamma(t)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(beta > 0, num / np.where(beta > 0, beta, 1.0), np.inf)
        return out[()] if out.ndim == 0 else out

    def kl_weight(self, t, D):
        """Multiplier of the drift error in the path-KL integrand at diffusion ``D``.

        ``(1 / (4 D)) * (1 + D beta / (alpha gamma))**2``, minimized over D at
        :meth:`d_star`.
        """
        t = np.asarray(t, dtype=float)
        D = np.asarray(D, dtype=float)
        if np.any(D <= 0):
            raise ValueError("diffusion coefficient D must be positive")
        if np.any((t <= 0) | (t >= 1)):
            raise ValueError("kl_weight is defined for t in (0, 1)")
        ratio = self.beta(t) / (self.alpha(t) * self.gamma(t))
        out = (1.0 + D * ratio) ** 2 / (4.0 * D)
        return out[()] if out.ndim == 0 else out

    def optimal_kl_weight(self, t):
        """:meth:`kl_weight` at ``D = d_star``, which simplifies to ``beta / (alpha gamma)``."""
        t = np.asarray(t, dtype=float)
        out = self.beta(t) / (self.alpha(t) * self.gamma(t))
        return out[()] if out.ndim == 0 else out
