"""Problem data for the coupled elliptic-parabolic system.

The model couples a parabolic equation for a nonnegative state y with an
instantaneous elliptic equation for a boundary-driven state q on the
interval (0, L):

    y_t - mu1 (kappa1 y')' - mu2 f(y, q) = 0,
    -mu3 (kappa2 q')' + mu4 f(y, q) = 0,      f(y, q) = sqrt(y) sinh(q),

with homogeneous Neumann conditions for y, q(t, 0) = 0 and the input u(t)
acting as Neumann datum mu3 kappa2(L) q'(t, L) = u(t).  The four scalars
mu = (mu1, mu2, mu3, mu4) are the estimation parameters and live in a box.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "ProblemDefinition",
    "TimeGrid",
    "constant_signal",
    "step_signal",
    "sincos_signal",
    "sampled_signal",
    "named_signal",
]


def _as_mu(mu) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (4,):
        raise ValueError(f"expected 4 parameters, got shape {mu.shape}")
    return mu


@dataclass(frozen=True)
class ProblemDefinition:
    """Continuous problem description, independent of any discretization.

    ``kappa1``, ``kappa2`` and ``y_init`` must accept numpy arrays of points
    in [0, length]; ``u`` is evaluated at scalar times in [0, final_time].
    """

    length: float
    final_time: float
    kappa1: Callable[[np.ndarray], np.ndarray]
    kappa2: Callable[[np.ndarray], np.ndarray]
    y_init: Callable[[np.ndarray], np.ndarray]
    u: Callable[[float], float]
    mu_low: np.ndarray = field(default_factory=lambda: np.ones(4))
    mu_high: np.ndarray = field(default_factory=lambda: np.full(4, 5.0))

    def __post_init__(self):
        object.__setattr__(self, "mu_low", _as_mu(self.mu_low))
        object.__setattr__(self, "mu_high", _as_mu(self.mu_high))
        if self.length <= 0 or self.final_time <= 0:
            raise ValueError("length and final_time must be positive")
        if not np.all(self.mu_low > 0):
            raise ValueError("parameter box must have positive lower bounds")
        if not np.all(self.mu_high >= self.mu_low):
            raise ValueError("parameter box is empty")

    def check_mu(self, mu) -> np.ndarray:
        """Return mu as array, warning (not failing) outside the box."""
        mu = _as_mu(mu)
        if np.any(mu < self.mu_low - 1e-12) or np.any(mu > self.mu_high + 1e-12):
            warnings.warn(f"parameter {mu.tolist()} outside admissible box", stacklevel=3)
        return mu

    def clip_mu(self, mu) -> np.ndarray:
        return np.clip(_as_mu(mu), self.mu_low, self.mu_high)

    def midpoint_mu(self) -> np.ndarray:
        return 0.5 * (self.mu_low + self.mu_high)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid t_k = (k-1)*dt, k = 1..K, with trapezoid weights.

    ``weights`` carries dt/2 at both ends and dt inside, so that
    sum_k weights[k] * g(t_k) is the trapezoid rule for int_0^T g dt.
    """

    final_time: float
    n_steps: int
    dt: float
    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def uniform(cls, final_time: float, n_steps: int) -> "TimeGrid":
        if n_steps < 2:
            raise ValueError("need at least two time nodes")
        nodes = np.linspace(0.0, final_time, n_steps)
        dt = final_time / (n_steps - 1)
        weights = np.full(n_steps, dt)
        weights[0] = weights[-1] = 0.5 * dt
        return cls(final_time, n_steps, dt, nodes, weights)

    def sample_input(self, u: Callable[[float], float]) -> np.ndarray:
        """Pointwise samples u(t_k); discontinuities resolve right-continuously
        because u itself is defined via half-open intervals."""
        return np.array([float(u(t)) for t in self.nodes])


# --- input signal family -------------------------------------------------

def constant_signal(value: float) -> Callable[[float], float]:
    def u(t: float) -> float:
        return value

    return u


def step_signal(switch: float, before: float, after: float) -> Callable[[float], float]:
    """Piecewise constant input, right-continuous at the switch time."""

    def u(t: float) -> float:
        return after if t >= switch else before

    return u


def sincos_signal(a: float, omega_a: float, b: float, omega_b: float) -> Callable[[float], float]:
    def u(t: float) -> float:
        return a * np.cos(omega_a * t) + b * np.sin(omega_b * t)

    return u


def sampled_signal(times, values) -> Callable[[float], float]:
    """Tabulated input, linearly interpolated between samples."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.ndim != 1 or times.shape != values.shape or times.size < 2:
        raise ValueError("need matching 1d arrays with at least two samples")
    if np.any(np.diff(times) <= 0):
        raise ValueError("sample times must be strictly increasing")

    def u(t: float) -> float:
        return float(np.interp(t, times, values))

    return u


_NAMED = {
    "u1": lambda: constant_signal(1.0),
    "u2": lambda: step_signal(0.75, -1.0, 1.0),
    "u3": lambda: sincos_signal(0.5, 10.0, 0.4, 20.0),
    "sinusoid": lambda: sincos_signal(0.5, 10.0, 0.4, 20.0),
    "step3": lambda: step_signal(4.0 / 3.0, -3.0, 3.0),
}


def named_signal(name: str) -> Callable[[float], float]:
    try:
        return _NAMED[name]()
    except KeyError:
        raise ValueError(f"unknown input signal {name!r}; known: {sorted(_NAMED)}") from None
