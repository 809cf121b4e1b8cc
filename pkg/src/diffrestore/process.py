"""Affine-drift diffusion processes (VE, VP, OUVE, BBED).

Every process has a Gaussian transition kernel

    p(x_tau | x0, y) = N(a(tau) x0 + b(tau) y, sigma(tau)^2 I)

so the mean is stored as the pair of scalar coefficients ``(a, b)``. VE and VP
ignore ``y`` (``b == 0``); OUVE and BBED are task-adapted and pull the mean
from the clean signal towards the degraded one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

KINDS = ("ve", "vp", "ouve", "bbed")

DEFAULT_PARAMS = {
    "ve": {"sigma_min": 0.01, "sigma_max": 10.0},
    "vp": {"beta_min": 0.1, "beta_max": 20.0},
    "ouve": {"gamma": 1.5, "sigma_min": 0.05, "sigma_max": 0.5},
    "bbed": {"k": 1.0},
}


class KernelMoments(NamedTuple):
    mean: np.ndarray
    std: float


@dataclass(frozen=True)
class DiffusionProcess:
    kind: str
    params: dict = field(default_factory=dict)
    T: float = 1.0
    tau_eps: float = 1e-3

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in KINDS:
            raise ValueError(f"unknown process kind {self.kind!r}; expected one of {KINDS}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[kind])
        if unknown:
            raise ValueError(f"unknown {kind} parameters: {sorted(unknown)}")
        params = {**DEFAULT_PARAMS[kind], **self.params}
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "params", params)
        if not 0.0 < self.tau_eps < self.T:
            raise ValueError("need 0 < tau_eps < T")
        p = params
        if kind in ("ve", "ouve") and not p["sigma_max"] > p["sigma_min"] > 0:
            raise ValueError("need sigma_max > sigma_min > 0")
        if kind == "vp" and not p["beta_max"] > p["beta_min"] > 0:
            raise ValueError("need beta_max > beta_min > 0")
        if kind == "ouve" and not p["gamma"] > 0:
            raise ValueError("need gamma > 0")
        if kind == "bbed" and not p["k"] > 0:
            raise ValueError("need k > 0")

    @property
    def requires_y(self) -> bool:
        return self.kind in ("ouve", "bbed")

    @property
    def tau_max(self) -> float:
        """Start time of reverse integration.

        The bridge variance vanishes and its drift is singular at ``T``, so
        BBED sampling starts one ``tau_eps`` early.
        """
        if self.kind == "bbed":
            return self.T - self.tau_eps
        return self.T

    def with_params(self, **params) -> "DiffusionProcess":
        return replace(self, params={**self.params, **params})

    # -- schedule primitives (no range checks; callers validate) ---------

    def _log_ratio(self) -> float:
        p = self.params
        return math.log(p["sigma_max"] / p["sigma_min"]) / self.T

    def _beta_integral(self, tau):
        p = self.params
        return p["beta_min"] * tau + 0.5 * (p["beta_max"] - p["beta_min"]) * tau**2 / self.T

    def coefficients(self, tau):
        """Kernel mean coefficients ``(a, b)`` with mean = a*x0 + b*y."""
        tau = np.asarray(tau, dtype=float)
        if self.kind == "ve":
            return np.ones_like(tau), np.zeros_like(tau)
        if self.kind == "vp":
            return np.exp(-0.5 * self._beta_integral(tau)), np.zeros_like(tau)
        if self.kind == "ouve":
            a = np.exp(-self.params["gamma"] * tau)
            return a, 1.0 - a
        r = tau / self.T
        return 1.0 - r, r

    def sigma(self, tau):
        """Kernel standard deviation, exactly zero at tau = 0."""
        tau = np.asarray(tau, dtype=float)
        p = self.params
        if self.kind == "ve":
            lam = self._log_ratio()
            return p["sigma_min"] * np.sqrt(np.expm1(2.0 * lam * tau))
        if self.kind == "vp":
            return np.sqrt(-np.expm1(-self._beta_integral(tau)))
        if self.kind == "ouve":
            lam = self._log_ratio()
            g = p["gamma"]
            var = lam * p["sigma_min"] ** 2 / (g + lam) * (np.exp(2 * lam * tau) - np.exp(-2 * g * tau))
            return np.sqrt(np.maximum(var, 0.0))
        var = p["k"] ** 2 * tau * (self.T - tau) / self.T
        return np.sqrt(np.maximum(var, 0.0))

    def diffusion(self, tau):
        tau = np.asarray(tau, dtype=float)
        p = self.params
        if self.kind in ("ve", "ouve"):
            lam = self._log_ratio()
            return p["sigma_min"] * np.exp(lam * tau) * math.sqrt(2.0 * lam)
        if self.kind == "vp":
            return np.sqrt(p["beta_min"] + tau / self.T * (p["beta_max"] - p["beta_min"]))
        return p["k"] * np.ones_like(tau)

    def drift(self, x, tau: float, y=None):
        x = np.asarray(x, dtype=float)
        if self.kind == "ve":
            return np.zeros_like(x)
        if self.kind == "vp":
            return -0.5 * self.diffusion(tau) ** 2 * x
        if self.kind == "ouve":
            return self.params["gamma"] * (y - x)
        if tau >= self.T:
            raise ValueError("BBED drift is singular at tau = T")
        return (y - x) / (self.T - tau)

    def sigma_inverse(self, s: float) -> float:
        """Process time at which ``sigma(tau) == s`` (monotone processes only)."""
        if self.kind == "bbed":
            raise ValueError("BBED standard deviation is not monotone in tau")
        p = self.params
        if self.kind == "ve":
            return math.log1p((s / p["sigma_min"]) ** 2) / (2.0 * self._log_ratio())
        if self.kind == "vp":
            B = -math.log1p(-(s**2))
            qa = 0.5 * (p["beta_max"] - p["beta_min"]) / self.T
            qb = p["beta_min"]
            return (-qb + math.sqrt(qb * qb + 4 * qa * B)) / (2 * qa)
        from scipy.optimize import brentq

        return brentq(lambda t: self.sigma(t) - s, 0.0, self.T, xtol=1e-14, rtol=1e-14)


def make_process(kind: str, T: float = 1.0, tau_eps: float = 1e-3, **params) -> DiffusionProcess:
    return DiffusionProcess(kind, params, T=T, tau_eps=tau_eps)


def _check_tau(process: DiffusionProcess, tau: float, allow_zero: bool = False) -> None:
    lo = 0.0 if allow_zero else process.tau_eps
    if not (lo <= tau <= process.T) or not math.isfinite(tau):
        raise ValueError(f"tau={tau} outside [{lo}, {process.T}]")


def _check_y(process: DiffusionProcess, x, y):
    if process.requires_y:
        if y is None:
            raise ValueError(f"{process.kind} process requires the degraded signal y")
        y = np.asarray(y, dtype=float)
        if np.broadcast_shapes(np.shape(x), y.shape) != np.shape(x):
            raise ValueError(f"shape mismatch: x {np.shape(x)} vs y {y.shape}")
        return y
    if y is not None:
        raise ValueError(f"{process.kind} process takes no y")
    return None


def drift_diffusion(process: DiffusionProcess, x, tau: float, y=None):
    """Drift vector ``f(x, tau)`` and scalar diffusion coefficient ``g(tau)``."""
    x = np.asarray(x, dtype=float)
    _check_tau(process, tau)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite state")
    y = _check_y(process, x, y)
    if process.kind == "bbed" and tau >= process.T:
        raise ValueError("BBED drift is singular at tau = T")
    return process.drift(x, tau, y), process.diffusion(tau)


def kernel_moments(process: DiffusionProcess, x0, y=None, tau: float = 1.0) -> KernelMoments:
    x0 = np.asarray(x0, dtype=float)
    _check_tau(process, tau, allow_zero=True)
    y = _check_y(process, x0, y)
    a, b = process.coefficients(tau)
    mean = a * x0 if y is None else a * x0 + b * y
    return KernelMoments(mean, float(process.sigma(tau)))


def sample_kernel(process: DiffusionProcess, x0, y, tau: float, rng: np.random.Generator):
    """Draw ``x_tau = mean + std * eps``; ``tau = 0`` returns ``x0`` exactly."""
    m = kernel_moments(process, x0, y, tau)
    eps = rng.standard_normal(m.mean.shape)
    if m.std == 0.0:
        return m.mean.copy()
    return m.mean + m.std * eps


def prior_sample(process: DiffusionProcess, shape, y=None, rng: np.random.Generator = None):
    """Initial reverse-diffusion state; task-adapted processes centre it on ``y``."""
    if rng is None:
        raise ValueError("prior_sample needs an explicit rng")
    shape = (int(shape),) if np.isscalar(shape) else tuple(shape)
    std = float(process.sigma(process.tau_max))
    if process.kind == "vp":
        std = 1.0
    eps = rng.standard_normal(shape)
    if process.requires_y:
        if y is None:
            raise ValueError(f"{process.kind} process requires y for warm initialization")
        return np.broadcast_to(np.asarray(y, dtype=float), shape) + std * eps
    return std * eps


def denoise_to_x0(process: DiffusionProcess, x_tau, score, tau: float, y=None):
    """One-step Tweedie estimate of the clean signal from ``x_tau`` and its score."""
    x_tau = np.asarray(x_tau, dtype=float)
    _check_tau(process, tau)
    y = _check_y(process, x_tau, y)
    a, b = process.coefficients(tau)
    if abs(a) < 1e-12:
        raise ValueError(f"kernel mean coefficient a({tau}) = {a} is numerically singular")
    s2 = process.sigma(tau) ** 2
    num = x_tau + s2 * np.asarray(score, dtype=float)
    if y is not None:
        num = num - b * y
    return num / a
