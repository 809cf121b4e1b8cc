"""Independent oracles: Monte-Carlo forward simulation, exact linear-Gaussian
posteriors and central finite differences.

Nothing here touches the closed-form kernel moments, so these functions can be
used to check them.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .process import DiffusionProcess


class McEstimate(NamedTuple):
    mean: np.ndarray
    std: np.ndarray
    std_error: np.ndarray
    paths: int


def mc_forward(process: DiffusionProcess, x0, y=None, tau: float = 1.0, paths: int = 10_000,
               substeps: int = 500, seed: int = 0) -> McEstimate:
    """Euler-Maruyama simulation of the forward SDE from ``x0`` at 0 to ``tau``.

    Only ``process.drift`` and ``process.diffusion`` are used. Each substep is split
    symmetrically: a left-point drift half-step, the noise increment with the
    diffusion coefficient taken at the substep midpoint, then a second drift
    half-step from the midpoint. The final half-step lets the bridge drift pin
    paths exactly at its endpoint.
    """
    if paths < 1000:
        raise ValueError("mc_forward needs at least 1000 paths")
    if substeps < 100:
        raise ValueError("mc_forward needs at least 100 substeps")
    rng = np.random.default_rng(seed)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    yv = None if y is None else np.broadcast_to(np.asarray(y, dtype=float), x0.shape)
    x = np.broadcast_to(x0, (paths,) + x0.shape).copy()
    h = tau / substeps
    sqrt_h = np.sqrt(h)
    for i in range(substeps):
        t = i * h
        x = x + process.drift(x, t, yv) * (0.5 * h)
        x = x + process.diffusion(t + 0.5 * h) * sqrt_h * rng.standard_normal(x.shape)
        x = x + process.drift(x, t + 0.5 * h, yv) * (0.5 * h)
    mean = x.mean(axis=0)
    std = x.std(axis=0, ddof=1)
    return McEstimate(mean, std, std / np.sqrt(paths), paths)


def operator_matrix(apply: Callable, d: int) -> np.ndarray:
    """Dense matrix of a linear map obtained by probing it with basis vectors."""
    cols = [np.asarray(apply(e), dtype=float).ravel() for e in np.eye(d)]
    return np.stack(cols, axis=1)


def exact_linear_gaussian_posterior(prior_mean, prior_cov, A, sigma_y: float, y):
    """Posterior ``N(mean, cov)`` of x0 given ``y = A x0 + n``, ``n ~ N(0, sigma_y^2 I)``."""
    if not sigma_y > 0:
        raise ValueError("sigma_y must be positive")
    m = np.asarray(prior_mean, dtype=float)
    C = np.asarray(prior_cov, dtype=float)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    S = A @ C @ A.T + sigma_y**2 * np.eye(A.shape[0])
    try:
        K = np.linalg.solve(S, A @ C).T
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular innovation covariance") from exc
    mean = m + K @ (y - A @ m)
    cov = C - K @ A @ C
    return mean, 0.5 * (cov + cov.T)


def gaussian_marginal_score(mean, cov, process: DiffusionProcess, x, tau: float, y=None):
    """Exact score of p_tau when x0 ~ N(mean, cov), pushed through the kernel."""
    a, b = process.coefficients(tau)
    s2 = process.sigma(tau) ** 2
    mean = np.asarray(mean, dtype=float)
    C = a * a * np.asarray(cov, dtype=float) + s2 * np.eye(mean.shape[-1])
    centre = a * mean if y is None else a * mean + b * np.asarray(y, dtype=float)
    diff = np.asarray(x, dtype=float) - centre
    return -np.linalg.solve(C, diff[..., None])[..., 0]


def exact_posterior_score(prior_mean, prior_cov, A, sigma_y, y_obs, process, x, tau):
    """Score of p_tau(x | y_obs) for a Gaussian prior and linear measurement."""
    mean, cov = exact_linear_gaussian_posterior(prior_mean, prior_cov, A, sigma_y, y_obs)
    return gaussian_marginal_score(mean, cov, process, x, tau)


def finite_diff_grad(fn: Callable, x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function; ``eps`` is relative."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        xi = x.reshape(-1)[i]
        h = eps * max(1.0, abs(xi))
        xp = x.copy()
        xm = x.copy()
        xp.reshape(-1)[i] += h
        xm.reshape(-1)[i] -= h
        flat[i] = (fn(xp) - fn(xm)) / (2 * h)
    return grad


def gaussian_flow_map(mean, var, process: DiffusionProcess, x_start, tau_start: float, tau_end: float, y=None):
    """Exact probability-flow transport for data ``x0 ~ N(mean, diag(var))``.

    Each coordinate's standardized value ``(x - m(tau)) / s(tau)``, with
    ``m = a mean + b y`` and ``s = sqrt(a^2 var + sigma^2)``, is constant
    along the flow.
    """
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)

    def moments(tau):
        a, b = process.coefficients(tau)
        m = a * mean + (0.0 if y is None else b * np.asarray(y, dtype=float))
        return m, np.sqrt(a * a * var + float(process.sigma(tau)) ** 2)

    m0, s0 = moments(tau_start)
    m1, s1 = moments(tau_end)
    return m1 + s1 / s0 * (np.asarray(x_start, dtype=float) - m0)
