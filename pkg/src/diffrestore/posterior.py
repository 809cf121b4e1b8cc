"""Posterior sampling for inverse problems ``y = A(x0) + n``.

Three ways of conditioning a reverse diffusion on a measurement:

* DPS: add the gradient of a measurement cost evaluated at the one-step
  denoised estimate to the prior score.
* projection: overwrite the observed part of the state after every step.
* blind: DPS with a parametric operator whose parameters are refined by
  gradient descent between diffusion steps.

``storm_restore`` is the two-stage predictive + generative pipeline.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import operators as ops
from .process import DiffusionProcess, denoise_to_x0, prior_sample
from .signal import DEFAULT_HOP, DEFAULT_WIN, bin_weights, compress_complex, compress_complex_vjp, stft_adjoint, stft_frames
from .solver import NonFiniteState, SamplerConfig, discretize, integrate, reverse_step_em, reverse_step_ode, sample

log = logging.getLogger(__name__)

PROJECTABLE = ("identity", "mask", "ideal_lowpass")


@dataclass
class LikelihoodConfig:
    mode: str = "dps"
    zeta_prime: float = 0.3
    sigma_y: Optional[float] = None
    cost_domain: str = "waveform"
    compression: float = 0.5
    inflate: bool = True
    data_std: Optional[float] = None
    win: int = DEFAULT_WIN
    hop: int = DEFAULT_HOP

    def __post_init__(self):
        if self.mode not in ("dps", "projection", "none"):
            raise ValueError("mode must be dps, projection or none")
        if not self.zeta_prime > 0:
            raise ValueError("zeta_prime must be positive")
        if self.data_std is not None and not self.data_std > 0:
            raise ValueError("data_std must be positive")
        if self.sigma_y is not None and not self.sigma_y > 0:
            raise ValueError("sigma_y must be positive")
        if self.cost_domain not in ("waveform", "compressed_stft"):
            raise ValueError("cost_domain must be waveform or compressed_stft")


@dataclass
class BlindConfig:
    phi_init: tuple = (4000.0, 24.0)
    lower: tuple = (200.0, 6.0)
    upper: tuple = (7800.0, 120.0)
    lr: float = 0.3
    steps_per_diffusion_step: int = 1
    warm_start: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("phi learning rate must be positive")
        if self.steps_per_diffusion_step < 1:
            raise ValueError("need at least one phi step per diffusion step")


class NonFiniteGradient(FloatingPointError):
    pass


# -- measurement cost ------------------------------------------------------


def measurement_cost(y, op, x0_hat, cfg: LikelihoodConfig):
    """Per-signal cost ``||c(y) - c(A(x0_hat))||^2`` and its gradient w.r.t. ``x0_hat``.

    ``c`` is the identity (waveform) or the magnitude-compressed STFT with
    one-sided bins counted at their full-spectrum multiplicity.
    """
    Ax = ops.apply(op, x0_hat)
    if cfg.cost_domain == "waveform":
        r = y - Ax
        return np.sum(r * r, axis=-1), ops.grad_x(op, x0_hat, -2.0 * r)
    p = cfg.compression
    Zy = stft_frames(y, cfg.win, cfg.hop)
    Zx = stft_frames(Ax, cfg.win, cfg.hop)
    R = compress_complex(Zy, p) - compress_complex(Zx, p)
    wts = bin_weights(cfg.win)
    cost = np.sum(wts * np.abs(R) ** 2, axis=(-2, -1))
    G = compress_complex_vjp(Zx, -2.0 * wts * R, p)
    return cost, ops.grad_x(op, x0_hat, stft_adjoint(G, x0_hat.shape[-1], cfg.win, cfg.hop))


def _norm(v):
    return np.linalg.norm(v, axis=-1, keepdims=True)


def posterior_score(field, process: DiffusionProcess, x, tau: float, y, op, cfg: LikelihoodConfig,
                    cond=None, y_proc=None, full_output: bool = False):
    """Prior score plus the DPS likelihood score at ``(x, tau)``.

    With a known noise level and ``inflate`` off, the likelihood term is
    ``-grad / (2 sigma_y^2)``. With ``inflate`` on, the measurement is treated
    as Gaussian with covariance ``sigma_y^2 I + v A A^T`` around ``A(x0_hat)``,
    where ``v = sd^2 s'^2 / (sd^2 + s'^2)``, ``s' = sigma / a``, is the spread of
    x0 given x_tau for data of scale ``sd`` (``cfg.data_std``, else the
    field's ``sigma_data``, else 1). The compressed-STFT cost uses the scalar
    version ``sigma_y^2 + v``. With no noise level the gradient is rescaled to
    norm ``zeta_prime`` per signal.
    """
    if cfg.mode != "dps":
        raise ValueError("posterior_score needs mode='dps'")
    x = np.asarray(x, dtype=float)
    s = field.evaluate(x, tau, cond)
    x0_hat = denoise_to_x0(process, x, s, tau, y_proc)
    cost, g0 = measurement_cost(y, op, x0_hat, cfg)
    a, _ = process.coefficients(tau)
    s2 = float(process.sigma(tau)) ** 2

    def chain(u):
        return (u + s2 * field.vjp(x, tau, u, cond)) / a

    if cfg.sigma_y is not None:
        var = cfg.sigma_y**2
        spread = 0.0
        if cfg.inflate:
            sd2 = (cfg.data_std if cfg.data_std is not None else getattr(field, "sigma_data", 1.0)) ** 2
            sp2 = s2 / (a * a)
            spread = sd2 * sp2 / (sd2 + sp2)
        zeta = np.full(x.shape[:-1], 0.5 / (var + spread))
        if spread > 0 and cfg.cost_domain == "waveform":
            # Gaussian likelihood with covariance sigma_y^2 I + spread A A^T
            r = y - ops.apply(op, x0_hat)
            lik = chain(ops.adjoint(op, ops.gram_inverse(op, r, var, spread)))
        else:
            lik = chain(-zeta[..., None] * g0)
    else:
        grad = chain(g0)
        zeta = cfg.zeta_prime / (_norm(grad)[..., 0] + 1e-12)
        lik = -zeta[..., None] * grad
    if not np.all(np.isfinite(lik)):
        raise NonFiniteGradient(f"non-finite likelihood gradient at tau={tau:.6g}")
    if full_output:
        return s + lik, {"x0_hat": x0_hat, "cost": cost, "zeta": zeta, "likelihood": lik}
    return s + lik


class PosteriorField:
    """Wraps a prior field so a solver sees the DPS posterior score."""

    def __init__(self, field, process, y, op, cfg, y_proc=None, on_eval: Optional[Callable] = None):
        self.field, self.process, self.y, self.op, self.cfg = field, process, y, op, cfg
        self.y_proc = y_proc
        self.on_eval = on_eval
        self.last = None

    def evaluate(self, x, tau, cond=None):
        s, info = posterior_score(self.field, self.process, x, tau, self.y, self.op, self.cfg, cond,
                                  self.y_proc, full_output=True)
        self.last = (tau, info)
        if self.on_eval is not None:
            self.on_eval(tau, info)
        return s

    def vjp(self, x, tau, v, cond=None):
        raise NotImplementedError("posterior fields are not differentiated")


# -- projection ------------------------------------------------------------


def project(x, y, op):
    """Replace the observed part of ``x`` with ``y``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if op.kind == "identity":
        return np.broadcast_to(y, x.shape).copy()
    if op.kind == "mask":
        m = op.data["mask"]
        return m * y + (1.0 - m) * x
    if op.kind == "ideal_lowpass":
        n = x.shape[-1]
        keep = np.fft.rfftfreq(n, 1.0 / op.sample_rate) <= op.data["cutoff_hz"]
        X = np.fft.rfft(x, axis=-1)
        Y = np.fft.rfft(np.broadcast_to(y, x.shape), axis=-1)
        return np.fft.irfft(np.where(keep, Y, X), n=n, axis=-1)
    raise ValueError(f"no closed-form projection for {op.kind} operators")


# -- reports ---------------------------------------------------------------


class RestorationReport:
    def __init__(self):
        self.rows = []

    def add(self, step, tau, residual, zeta=float("nan"), phi=None):
        self.rows.append((step, tau, residual, zeta, None if phi is None else tuple(phi)))

    def write_csv(self, path) -> None:
        blind = any(r[4] is not None for r in self.rows)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "tau", "residual_norm", "zeta"] + (["cutoff_hz", "slope_db_per_octave"] if blind else []))
            for step, tau, res, zeta, phi in self.rows:
                row = [step, repr(float(tau)), repr(float(res)), repr(float(zeta))]
                if blind:
                    row += [repr(float(v)) for v in phi]
                w.writerow(row)


def _residual_norm(y, op, x):
    return float(np.linalg.norm(y - ops.apply(op, x)))


# -- restoration -----------------------------------------------------------


def restore(y, op, process: DiffusionProcess, field, sampler_cfg: SamplerConfig, lik_cfg: LikelihoodConfig,
            rng=None, report: Optional[RestorationReport] = None, chains: Optional[int] = None):
    """Posterior sampling of x0 given ``y``.

    ``chains`` draws that many independent restorations in one batched run.
    Task-adapted processes start from a Gaussian centred on ``y``.
    """
    y = np.asarray(y, dtype=float)
    rng = np.random.default_rng(sampler_cfg.seed) if rng is None else rng
    shape = y.shape if chains is None else (chains,) + y.shape
    y_proc = np.broadcast_to(y, shape) if process.requires_y else None
    cond = y_proc
    grid = discretize(process.tau_max, process.tau_eps, sampler_cfg.steps, sampler_cfg.scheme, process)
    x = prior_sample(process, shape, y_proc, rng)

    if lik_cfg.mode == "dps":
        def on_eval(tau, info):
            if report is not None:
                report.add(len(report.rows), tau, float(np.mean(np.sqrt(info["cost"]))), float(np.mean(info["zeta"])))

        run_field = PosteriorField(field, process, y, op, lik_cfg, y_proc,
                                   on_eval if sampler_cfg.solver != "ode_heun" else None)
        x = integrate(process, run_field, x, grid, sampler_cfg.solver, rng, y_proc, cond)
        x0 = denoise_to_x0(process, x, field.evaluate(x, process.tau_eps, cond), process.tau_eps, y_proc)
        return x0

    if lik_cfg.mode == "projection" and op.kind not in PROJECTABLE:
        raise ValueError(f"no closed-form projection for {op.kind} operators")

    def callback(step, tau, xs):
        if lik_cfg.mode != "projection":
            return None
        # observed part follows the forward-diffused measurement at tau
        a, b = process.coefficients(tau)
        y_tau = a * y + float(process.sigma(tau)) * ops.apply(op, rng.standard_normal(shape))
        if y_proc is not None:
            y_tau = y_tau + b * ops.apply(op, y_proc)
        out = project(xs, y_tau, op)
        if report is not None:
            report.add(step, tau, _residual_norm(y_tau, op, out))
        return out

    x = integrate(process, field, x, grid, sampler_cfg.solver, rng, y_proc, cond, callback)
    x0 = denoise_to_x0(process, x, field.evaluate(x, process.tau_eps, cond), process.tau_eps, y_proc)
    if lik_cfg.mode == "projection":
        x0 = project(x0, y, op)
        if report is not None:
            report.add(len(report.rows), 0.0, _residual_norm(y, op, x0))
    return x0


@dataclass
class ParametricFamily:
    """Bounds of a blind lowpass operator; carries no parameter values."""

    lower: tuple = (200.0, 6.0)
    upper: tuple = (7800.0, 120.0)
    sample_rate: int = 16000


@dataclass
class BlindResult:
    x0: np.ndarray
    phi: np.ndarray
    phi_trace: np.ndarray
    bound_warning: bool
    report: RestorationReport = field(default_factory=RestorationReport)


def blind_restore(y, family: ParametricFamily, process: DiffusionProcess, field, sampler_cfg: SamplerConfig,
                  blind_cfg: BlindConfig, lik_cfg: Optional[LikelihoodConfig] = None, rng=None) -> BlindResult:
    """Alternate one reverse-diffusion step on x with gradient steps on phi.

    Each diffusion step first updates x with the DPS posterior score under the
    current phi, then takes ``steps_per_diffusion_step`` gradient steps on the
    normalized residual ``||y - A_phi(x0_hat)||^2 / ||y||^2`` in the
    unconstrained parameter space. ``y`` may hold a batch of frames that share
    one phi. The deterministic ``ode_euler`` solver gives the least biased phi:
    noise injected by ``em`` leaks into x0_hat and skews the fit.
    """
    y = np.asarray(y, dtype=float)
    lik_cfg = LikelihoodConfig(sigma_y=1e-2) if lik_cfg is None else lik_cfg
    if lik_cfg.mode != "dps":
        raise ValueError("blind restoration needs DPS likelihood mode")
    if sampler_cfg.solver == "ode_heun":
        raise ValueError("blind restoration supports the em and ode_euler solvers")
    params = ops.OperatorParams.from_phi(blind_cfg.phi_init, family.lower, family.upper)
    rng = np.random.default_rng(sampler_cfg.seed) if rng is None else rng
    y_proc = y if process.requires_y else None
    grid = discretize(process.tau_max, process.tau_eps, sampler_cfg.steps, sampler_cfg.scheme, process)
    x = prior_sample(process, y.shape, y_proc, rng)
    if blind_cfg.warm_start and not process.requires_y:
        x = x + y
    y_energy = float(np.sum(y * y)) + 1e-30
    report = RestorationReport()
    trace = []
    hits = 0
    n = grid.steps
    for i in range(n):
        tau, dtau = float(grid.taus[i]), float(grid.taus[i + 1] - grid.taus[i])
        op = ops.parametric_lowpass(*params.phi, sample_rate=family.sample_rate)
        pf = PosteriorField(field, process, y, op, lik_cfg, y_proc)
        if sampler_cfg.solver == "em":
            x = reverse_step_em(process, pf, x, tau, dtau, y_proc, rng, y_proc, noise=i < n - 1)
        else:
            x = reverse_step_ode(process, pf, x, tau, dtau, y_proc, 1, y_proc)
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(i, tau)
        info = pf.last[1]
        x0_hat = info["x0_hat"]
        for _ in range(blind_cfg.steps_per_diffusion_step):
            op = ops.with_phi(op, params.phi)
            r = y - ops.apply(op, x0_hat)
            g_phi = ops.grad_phi(op, x0_hat, -2.0 * r) / y_energy
            params.u = params.u - blind_cfg.lr * params.chain(g_phi)
        hits += params.at_bound()
        trace.append(params.phi.copy())
        report.add(i, float(grid.taus[i + 1]), float(np.linalg.norm(r)), float(np.mean(info["zeta"])), params.phi)
    x0 = denoise_to_x0(process, x, field.evaluate(x, process.tau_eps, y_proc), process.tau_eps, y_proc)
    warn = hits > 0.5 * n
    if warn:
        log.warning("phi sat at a bound for %d of %d steps", hits, n)
    return BlindResult(x0, params.phi.copy(), np.array(trace), warn, report)


def storm_restore(y, predictor: Callable, process: DiffusionProcess, field, sampler_cfg: SamplerConfig, rng=None):
    """Predictive estimate followed by task-adapted diffusion anchored on it."""
    y_hat = np.asarray(predictor(np.asarray(y, dtype=float)), dtype=float)
    if sampler_cfg.steps == 0:
        return y_hat
    if not process.requires_y:
        raise ValueError("storm needs a task-adapted process (ouve or bbed)")
    return sample(process, field, sampler_cfg, y=y_hat, rng=rng)


def wiener_predictor(signal_cov, noise_std: float, signal_mean=None):
    """Linear MMSE estimate of a signal in white noise."""
    C = np.asarray(signal_cov, dtype=float)
    mu = np.zeros(C.shape[0]) if signal_mean is None else np.asarray(signal_mean, dtype=float)
    W = C @ np.linalg.inv(C + noise_std**2 * np.eye(C.shape[0]))
    return lambda y: mu + (np.asarray(y, dtype=float) - mu) @ W.T


def spectral_gain_predictor(noise_std: float, floor: float = 0.1):
    """Per-frame spectral-subtraction gain; needs no training."""

    def predict(y):
        y = np.asarray(y, dtype=float)
        n = y.shape[-1]
        Y = np.fft.rfft(y, axis=-1)
        power = np.abs(Y) ** 2 + 1e-30
        gain = np.maximum(1.0 - n * noise_std**2 / power, floor)
        return np.fft.irfft(gain * Y, n=n, axis=-1)

    return predict
