"""Reverse-time integration: Euler-Maruyama for the reverse SDE and Euler/Heun
for the probability-flow ODE."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .process import DiffusionProcess, denoise_to_x0, drift_diffusion, prior_sample
from .score import GuidedScore

SOLVERS = ("em", "ode_euler", "ode_heun")


class NonFiniteState(FloatingPointError):
    def __init__(self, step: int, tau: float):
        super().__init__(f"non-finite state at step {step} (tau={tau:.6g})")
        self.step = step
        self.tau = tau


@dataclass(frozen=True)
class TimeGrid:
    taus: np.ndarray
    scheme: str

    @property
    def steps(self) -> int:
        return len(self.taus) - 1


@dataclass
class SamplerConfig:
    steps: int = 50
    scheme: str = "uniform"
    solver: str = "em"
    guidance: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.scheme not in ("uniform", "log"):
            raise ValueError("scheme must be 'uniform' or 'log'")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")


def discretize(T: float, tau_eps: float, N: int, scheme: str = "uniform",
               process: Optional[DiffusionProcess] = None) -> TimeGrid:
    """``N + 1`` strictly decreasing times from ``T`` down to ``tau_eps``.

    ``log`` spaces the noise levels geometrically, so it needs the process to
    map them back to times.
    """
    if N < 1:
        raise ValueError("need at least one step")
    if not 0 <= tau_eps < T:
        raise ValueError("need 0 <= tau_eps < T")
    if scheme == "uniform":
        taus = np.linspace(T, tau_eps, N + 1)
    elif scheme == "log":
        if process is None:
            raise ValueError("log scheme needs the process schedule")
        sig = np.geomspace(float(process.sigma(T)), float(process.sigma(tau_eps)), N + 1)
        taus = np.array([process.sigma_inverse(s) for s in sig])
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    taus[0], taus[-1] = T, tau_eps
    if np.any(np.diff(taus) >= 0):
        raise ValueError("time grid is not strictly decreasing; use fewer steps")
    return TimeGrid(taus, scheme)


def reverse_step_em(process, field, x, tau, dtau, y=None, rng=None, cond=None, noise=True):
    """One Euler-Maruyama step of the reverse SDE (``dtau < 0``)."""
    if dtau >= 0:
        raise ValueError("reverse steps need dtau < 0")
    f, g = drift_diffusion(process, x, tau, y)
    s = field.evaluate(x, tau, cond)
    x_next = x + (f - g * g * s) * dtau
    if noise and g != 0:
        x_next = x_next + g * np.sqrt(-dtau) * rng.standard_normal(np.shape(x))
    return x_next


def _flow(process, field, x, tau, y, cond):
    f, g = drift_diffusion(process, x, tau, y)
    return f - 0.5 * g * g * field.evaluate(x, tau, cond)


def reverse_step_ode(process, field, x, tau, dtau, y=None, order=1, cond=None):
    """One probability-flow ODE step; ``order=2`` adds the Heun correction."""
    if dtau >= 0:
        raise ValueError("reverse steps need dtau < 0")
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    d1 = _flow(process, field, x, tau, y, cond)
    x_euler = x + d1 * dtau
    if order == 1:
        return x_euler
    d2 = _flow(process, field, x_euler, tau + dtau, y, cond)
    return x + 0.5 * (d1 + d2) * dtau


def integrate(process, field, x, grid: TimeGrid, solver: str = "em", rng=None, y=None, cond=None,
              callback: Optional[Callable] = None):
    """Run the reverse loop over ``grid`` and return the state at its last time.

    The Euler-Maruyama branch never adds noise on the final step.
    ``callback(step, tau, x)`` fires after every step and may return a
    replacement state (used for projection).
    """
    if solver == "em" and rng is None:
        raise ValueError("stochastic solver needs an rng")
    taus = grid.taus
    x = np.array(x, dtype=float)
    n = len(taus) - 1
    for i in range(n):
        tau, dtau = float(taus[i]), float(taus[i + 1] - taus[i])
        if solver == "em":
            x = reverse_step_em(process, field, x, tau, dtau, y, rng, cond, noise=i < n - 1)
        else:
            x = reverse_step_ode(process, field, x, tau, dtau, y, 2 if solver == "ode_heun" else 1, cond)
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(i, tau)
        if callback is not None:
            out = callback(i, float(taus[i + 1]), x)
            if out is not None:
                x = out
    return x


def sample(process: DiffusionProcess, field, cfg: SamplerConfig, y=None, conditioning=None,
           shape=None, rng=None, callback=None):
    """Full generation loop: prior draw, reverse integration, final Tweedie step."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if shape is None:
        if y is None:
            raise ValueError("need shape or y")
        shape = np.shape(y)
    if process.requires_y and y is None:
        raise ValueError(f"{process.kind} sampling needs y")
    y_proc = np.asarray(y, dtype=float) if process.requires_y else None
    cond = conditioning if conditioning is not None else y_proc
    if cfg.guidance is not None:
        field = GuidedScore(field, cfg.guidance)
    x = prior_sample(process, shape, y_proc, rng)
    grid = discretize(process.tau_max, process.tau_eps, cfg.steps, cfg.scheme, process)
    x = integrate(process, field, x, grid, cfg.solver, rng, y_proc, cond, callback)
    s = field.evaluate(x, process.tau_eps, cond)
    return denoise_to_x0(process, x, s, process.tau_eps, y_proc)


class TrajectoryRecorder:
    """Collects per-step diagnostics for CSV export."""

    def __init__(self, process: DiffusionProcess, components: bool = False):
        self.process = process
        self.components = components
        self.rows = []

    def __call__(self, step, tau, x):
        row = [step, tau, float(self.process.sigma(tau))]
        if self.components:
            row += list(np.ravel(x))
        else:
            row.append(float(np.linalg.norm(x)))
        self.rows.append(row)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            if self.components and self.rows:
                w.writerow(["step", "tau", "sigma"] + [f"x{i}" for i in range(len(self.rows[0]) - 3)])
            else:
                w.writerow(["step", "tau", "sigma", "state_norm"])
            for row in self.rows:
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
