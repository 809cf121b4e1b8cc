"""Score fields: exact Gaussian-mixture scores and a small learned MLP.

A score field is any object with

    evaluate(x, tau, cond=None) -> score, same shape as x
    vjp(x, tau, v, cond=None)   -> (d score / d x)^T v

For task-adapted processes (OUVE, BBED) the degraded signal ``y`` is passed as
``cond``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from .process import DiffusionProcess

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DFRS1"


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Gaussian mixtures


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = np.asarray(self.covs, dtype=float)
        K, d = self.means.shape
        if covs.ndim == 2 and covs.shape == (K, d):
            covs = np.stack([np.diag(c) for c in covs])
        self.covs = covs
        if self.weights.shape != (K,) or self.covs.shape != (K, d, d):
            raise ValueError("inconsistent mixture shapes")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be a probability vector")
        if not np.allclose(self.covs, np.swapaxes(self.covs, -1, -2)):
            raise ValueError("covariances must be symmetric")
        if np.any(np.linalg.eigvalsh(self.covs) <= 0):
            raise ValueError("covariances must be positive definite")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        L = np.linalg.cholesky(self.covs)
        eps = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", L[comp], eps)

    def component_log_densities(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        L = np.linalg.cholesky(self.covs)
        diff = x[..., None, :] - self.means
        z = np.linalg.solve(L, diff[..., None])[..., 0]
        logdet = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(-1)
        return -0.5 * (np.sum(z * z, axis=-1) + logdet + self.dim * np.log(2 * np.pi))

    def log_density(self, x) -> np.ndarray:
        lp = self.component_log_densities(x) + np.log(self.weights)
        m = lp.max(axis=-1, keepdims=True)
        return (m + np.log(np.exp(lp - m).sum(-1, keepdims=True)))[..., 0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        d = self.means - mu
        return np.einsum("k,kij->ij", self.weights, self.covs) + np.einsum("k,ki,kj->ij", self.weights, d, d)

    def marginal(self, process: DiffusionProcess, tau: float, y=None) -> "GaussianMixture":
        """The mixture pushed through the transition kernel at ``tau``."""
        a, b = process.coefficients(tau)
        s2 = float(process.sigma(tau)) ** 2
        means = a * self.means
        if y is not None:
            means = means + b * np.asarray(y, dtype=float)
        covs = a * a * self.covs + s2 * np.eye(self.dim)
        return GaussianMixture(self.weights, means, covs)

    def posterior(self, A, sigma_n: float, y) -> "GaussianMixture":
        """Mixture posterior of x given ``y = A x + n`` with white Gaussian ``n``."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        y = np.asarray(y, dtype=float)
        R = sigma_n**2 * np.eye(A.shape[0])
        logw, means, covs = [], [], []
        for w, m, C in zip(self.weights, self.means, self.covs):
            S = A @ C @ A.T + R
            K = np.linalg.solve(S, A @ C).T
            r = y - A @ m
            _, logdet = np.linalg.slogdet(S)
            logw.append(np.log(w) - 0.5 * (r @ np.linalg.solve(S, r) + logdet))
            means.append(m + K @ r)
            Cp = C - K @ A @ C
            covs.append(0.5 * (Cp + Cp.T))
        logw = np.array(logw)
        w = np.exp(logw - logw.max())
        return GaussianMixture(w / w.sum(), np.array(means), np.array(covs))


def _mixture_terms(mixture: GaussianMixture, x):
    """Responsibilities, per-component scores and precisions at ``x``."""
    x = np.asarray(x, dtype=float)
    P = np.linalg.inv(mixture.covs)
    lp = mixture.component_log_densities(x) + np.log(mixture.weights)
    top = lp.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise FloatingPointError("all mixture responsibilities underflow")
    r = np.exp(lp - top)
    r /= r.sum(-1, keepdims=True)
    sk = -np.einsum("kij,...kj->...ki", P, x[..., None, :] - mixture.means)
    return r, sk, P


def _shift(process, x, tau, y):
    # the kernel mean term b*y only translates the marginal, so a batch of y
    # is handled by moving x instead of the component means
    x = np.asarray(x, dtype=float)
    if y is None:
        return x
    return x - process.coefficients(tau)[1] * np.asarray(y, dtype=float)


def gmm_score(mixture: GaussianMixture, process: DiffusionProcess, x, tau: float, y=None):
    """Exact score of the mixture's marginal at ``tau``; ``y`` may be batched like ``x``."""
    r, sk, _ = _mixture_terms(mixture.marginal(process, tau), _shift(process, x, tau, y))
    return np.einsum("...k,...ki->...i", r, sk)


def gmm_score_vjp(mixture: GaussianMixture, process: DiffusionProcess, x, tau: float, v, y=None):
    # J = sum_k r_k (s_k s_k^T - P_k) - s s^T, symmetric
    r, sk, P = _mixture_terms(mixture.marginal(process, tau), _shift(process, x, tau, y))
    v = np.asarray(v, dtype=float)
    s = np.einsum("...k,...ki->...i", r, sk)
    skv = np.einsum("...ki,...i->...k", sk, v)
    Pv = np.einsum("kij,...j->...ki", P, v)
    out = np.einsum("...k,...ki->...i", r, sk * skv[..., None] - Pv)
    return out - s * np.sum(s * v, axis=-1, keepdims=True)


class GmmScore:
    """Analytic score field for mixture-distributed clean data."""

    def __init__(self, mixture: GaussianMixture, process: DiffusionProcess):
        self.mixture = mixture
        self.process = process

    def _y(self, cond):
        return cond if self.process.requires_y else None

    def evaluate(self, x, tau, cond=None):
        return gmm_score(self.mixture, self.process, x, tau, self._y(cond))

    def vjp(self, x, tau, v, cond=None):
        return gmm_score_vjp(self.mixture, self.process, x, tau, v, self._y(cond))


def cfg_mix(s_cond, s_uncond, w: float):
    """Classifier-free guidance: ``w * s_cond + (1 - w) * s_uncond``."""
    s_cond = np.asarray(s_cond, dtype=float)
    s_uncond = np.asarray(s_uncond, dtype=float)
    if s_cond.shape != s_uncond.shape:
        raise ValueError("guidance inputs must have equal shapes")
    return w * s_cond + (1.0 - w) * s_uncond


class GuidedScore:
    """Mixes a field's conditional and unconditional (zeroed-conditioning) outputs."""

    def __init__(self, field, w: float):
        self.field = field
        self.w = w

    def evaluate(self, x, tau, cond=None):
        if cond is None:
            return self.field.evaluate(x, tau, None)
        s_c = self.field.evaluate(x, tau, cond)
        s_u = self.field.evaluate(x, tau, np.zeros_like(np.asarray(cond, dtype=float)))
        return cfg_mix(s_c, s_u, self.w)

    def vjp(self, x, tau, v, cond=None):
        if cond is None:
            return self.field.vjp(x, tau, v, None)
        zero = np.zeros_like(np.asarray(cond, dtype=float))
        return cfg_mix(self.field.vjp(x, tau, v, cond), self.field.vjp(x, tau, v, zero), self.w)


def score_vjp(field, x, tau, v, cond=None):
    return field.vjp(x, tau, v, cond)


# --------------------------------------------------------------------------
# MLP with hand-written reverse mode

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(z):
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def gelu_grad(z):
    return 0.5 * (1.0 + erf(z / _SQRT2)) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)


class Mlp:
    """Fully connected GELU network; ``layers`` is a list of ``(W, b)``."""

    def __init__(self, layers):
        self.layers = [(np.asarray(W, dtype=float), np.asarray(b, dtype=float)) for W, b in layers]

    @classmethod
    def init(cls, widths, rng: np.random.Generator, out_scale: float = 0.1):
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            W = rng.standard_normal((fan_in, fan_out)) * np.sqrt(1.0 / fan_in)
            if i == len(widths) - 2:
                W *= out_scale
            layers.append((W, np.zeros(fan_out)))
        return cls(layers)

    @property
    def widths(self):
        return [self.layers[0][0].shape[0]] + [W.shape[1] for W, _ in self.layers]

    def forward(self, h):
        cache = []
        for i, (W, b) in enumerate(self.layers):
            z = h @ W + b
            cache.append((h, z))
            h = z if i == len(self.layers) - 1 else gelu(z)
        return h, cache

    def backward(self, cache, dout, want_params: bool = True):
        """Gradients of ``sum(out * dout)`` w.r.t. parameters and input."""
        grads = []
        delta = dout
        for i in reversed(range(len(self.layers))):
            h, z = cache[i]
            if i != len(self.layers) - 1:
                delta = delta * gelu_grad(z)
            W, _ = self.layers[i]
            if want_params:
                hf = h.reshape(-1, h.shape[-1])
                df = delta.reshape(-1, delta.shape[-1])
                grads.append((hf.T @ df, df.sum(0)))
            delta = delta @ W.T
        grads.reverse()
        return grads, delta

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    def set_flat(self, theta) -> None:
        i = 0
        layers = []
        for W, b in self.layers:
            nW, nb = W.size, b.size
            layers.append((theta[i:i + nW].reshape(W.shape).copy(), theta[i + nW:i + nW + nb].copy()))
            i += nW + nb
        self.layers = layers


class MlpScoreModel:
    """Learned score built around a preconditioned denoiser.

    With ``x' = (x - b y) / a`` and ``sigma' = sigma / a`` the network ``F``
    predicts ``x0`` through

        D = c_skip x' + c_out F([c_in x', c, log sigma'])
        s = (a D + b y - x) / sigma^2

    where ``c_skip = sd^2 / (sigma'^2 + sd^2)``, ``c_out = sigma' sd / sqrt(sigma'^2 + sd^2)``,
    ``c_in = 1 / sqrt(sigma'^2 + sd^2)`` and ``sd`` is the RMS of the training
    data. Denoiser errors stay of order ``sd`` at every noise level, which an
    unscaled score network cannot guarantee.
    """

    def __init__(self, net: Mlp, process: DiffusionProcess, dim: int, cond_dim: int = 0, sigma_data: float = 0.5):
        if net.widths[0] != dim + cond_dim + 1 or net.widths[-1] != dim:
            raise ValueError("network widths do not match dim/cond_dim")
        if not sigma_data > 0:
            raise ValueError("sigma_data must be positive")
        self.net = net
        self.process = process
        self.dim = dim
        self.cond_dim = cond_dim
        self.sigma_data = float(sigma_data)

    @classmethod
    def create(cls, process, dim, cond_dim=0, hidden=(128, 128), rng=None, sigma_data=0.5):
        rng = np.random.default_rng(0) if rng is None else rng
        net = Mlp.init([dim + cond_dim + 1, *hidden, dim], rng)
        return cls(net, process, dim, cond_dim, sigma_data)

    def _precondition(self, x, tau, cond):
        x = np.asarray(x, dtype=float)
        tau = np.broadcast_to(np.asarray(tau, dtype=float), x.shape[:-1])
        sigma = np.asarray(self.process.sigma(tau), dtype=float)
        a, b = self.process.coefficients(tau)
        a = np.broadcast_to(np.asarray(a, dtype=float), sigma.shape)
        b = np.broadcast_to(np.asarray(b, dtype=float), sigma.shape)
        xs = x
        if self.process.requires_y:
            if cond is None:
                raise ValueError(f"{self.process.kind} model needs y as conditioning")
            xs = x - b[..., None] * np.asarray(cond, dtype=float)
        xs = xs / a[..., None]
        sp = sigma / a
        sd2 = self.sigma_data**2
        c = {
            "sigma": sigma, "a": a, "xs": xs,
            "skip": sd2 / (sp * sp + sd2),
            "out": sp * self.sigma_data / np.sqrt(sp * sp + sd2),
            "in": 1.0 / np.sqrt(sp * sp + sd2),
        }
        parts = [xs * c["in"][..., None]]
        if self.cond_dim:
            if cond is None:
                cond = np.zeros(self.cond_dim)
            parts.append(np.broadcast_to(np.asarray(cond, dtype=float), x.shape[:-1] + (self.cond_dim,)))
        parts.append(np.log(sp)[..., None])
        return np.concatenate(parts, axis=-1), c

    def forward(self, x, tau, cond=None):
        feats, c = self._precondition(x, tau, cond)
        F, cache = self.net.forward(feats)
        xs = c["xs"]
        denoised = c["skip"][..., None] * xs + c["out"][..., None] * F
        s = c["a"][..., None] * (denoised - xs) / (c["sigma"] ** 2)[..., None]
        return s, (cache, c)

    def evaluate(self, x, tau, cond=None):
        return self.forward(x, tau, cond)[0]

    def vjp(self, x, tau, v, cond=None):
        _, (cache, c) = self.forward(x, tau, cond)
        v = np.asarray(v, dtype=float) / (c["sigma"] ** 2)[..., None]
        _, dfeat = self.net.backward(cache, v * (c["out"] * c["in"])[..., None], want_params=False)
        return (c["skip"] - 1.0)[..., None] * v + dfeat[..., : self.dim]

    def param_grads(self, state, ds):
        cache, c = state
        grads, _ = self.net.backward(cache, ds * (c["a"] * c["out"] / c["sigma"] ** 2)[..., None])
        return grads


# --------------------------------------------------------------------------
# denoising score matching


@dataclass
class TrainConfig:
    batch_size: int = 256
    steps: int = 20_000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    weighting: str = "variance"
    cond_dropout: float = 0.1
    hidden: tuple = (128, 128)
    smooth_window: int = 200

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 1 or self.lr <= 0:
            raise ValueError("batch_size, steps and lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("moment decays must lie in (0, 1)")
        if self.weighting not in ("variance", "none"):
            raise ValueError("weighting must be 'variance' or 'none'")


def dsm_weight(process: DiffusionProcess, tau, rule: str = "variance"):
    if rule == "variance":
        return process.sigma(tau) ** 2
    return np.ones_like(np.asarray(tau, dtype=float))


def draw_dsm_batch(process: DiffusionProcess, x0, y, rng: np.random.Generator):
    """Per-item ``tau ~ U(tau_eps, T)`` and ``x_tau`` from the kernel."""
    n = x0.shape[0]
    tau = rng.uniform(process.tau_eps, process.T, size=n)
    a, b = process.coefficients(tau)
    mean = a[:, None] * x0
    if y is not None:
        mean = mean + b[:, None] * y
    sigma = process.sigma(tau)
    x_tau = mean + sigma[:, None] * rng.standard_normal(x0.shape)
    return tau, x_tau, mean, sigma


def dsm_objective(scores, x_tau, mean, sigma, weight):
    """Weighted squared distance to the kernel score, averaged over the batch."""
    sigma = np.asarray(sigma, dtype=float)[..., None]
    resid = scores + (x_tau - mean) / sigma**2
    return float(np.mean(weight * np.sum(resid * resid, axis=-1))), resid


def dsm_loss(model: MlpScoreModel, process: DiffusionProcess, x0_batch, rng: np.random.Generator,
             y_batch=None, cond_batch=None, weighting: str = "variance"):
    """DSM loss on one batch and its exact parameter gradients."""
    x0 = np.atleast_2d(np.asarray(x0_batch, dtype=float))
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    if process.requires_y and y_batch is None:
        raise ValueError(f"{process.kind} training needs y pairs")
    y = None if y_batch is None else np.asarray(y_batch, dtype=float)
    tau, x_tau, mean, sigma = draw_dsm_batch(process, x0, y, rng)
    cond = y if process.requires_y else cond_batch
    scores, state = model.forward(x_tau, tau, cond)
    w = dsm_weight(process, tau, weighting)
    loss, resid = dsm_objective(scores, x_tau, mean, sigma, w)
    ds = 2.0 * w[:, None] * resid / x0.shape[0]
    return loss, model.param_grads(state, ds)


class Adam:
    def __init__(self, shapes, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


def _smoothed(history, window):
    return float(np.mean(history[-window:]))


def train_score(data, process: DiffusionProcess, cfg: TrainConfig, y_data=None, cond_data=None,
                callback=None) -> MlpScoreModel:
    """Fit an MLP score model by denoising score matching.

    ``data`` is a :class:`GaussianMixture` (sampled on the fly) or an array of
    clean examples. Paired ``y_data`` is required for task-adapted processes;
    ``cond_data`` enables classifier-free conditional training with
    conditioning dropout. The loss trace is stored on ``model.loss_history``.
    """
    init_rng, data_rng, kernel_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3))
    if isinstance(data, GaussianMixture):
        dim = data.dim
        if process.requires_y:
            raise ValueError("task-adapted training needs an array dataset with y pairs")
    else:
        data = np.atleast_2d(np.asarray(data, dtype=float))
        dim = data.shape[1]
    if process.requires_y:
        y_data = np.asarray(y_data, dtype=float)
        cond_dim = dim
    elif cond_data is not None:
        cond_data = np.asarray(cond_data, dtype=float)
        cond_dim = cond_data.shape[1]
    else:
        cond_dim = 0
    if isinstance(data, GaussianMixture):
        sigma_data = np.sqrt(np.mean(np.einsum("kii->ki", data.covs) + data.means**2, axis=1) @ data.weights)
    else:
        sigma_data = np.sqrt(np.mean(data**2))
    model = MlpScoreModel.create(process, dim, cond_dim, cfg.hidden, init_rng, float(sigma_data))
    params = [p for layer in model.net.layers for p in layer]
    opt = Adam([p.shape for p in params], cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history = []
    reference = None
    for step in range(cfg.steps):
        y_b = cond_b = None
        if isinstance(data, GaussianMixture):
            x0 = data.sample(cfg.batch_size, data_rng)
        else:
            idx = data_rng.integers(0, data.shape[0], size=cfg.batch_size)
            x0 = data[idx]
            if process.requires_y:
                y_b = y_data[idx]
            elif cond_data is not None:
                cond_b = cond_data[idx].copy()
                drop = data_rng.random(cfg.batch_size) < cfg.cond_dropout
                cond_b[drop] = 0.0
        loss, grads = dsm_loss(model, process, x0, kernel_rng, y_b, cond_b, cfg.weighting)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        history.append(loss)
        if len(history) == cfg.smooth_window:
            reference = _smoothed(history, cfg.smooth_window)
        elif reference is not None and _smoothed(history, cfg.smooth_window) > 10 * reference:
            raise TrainingDiverged(f"smoothed loss exceeded 10x its initial value at step {step}")
        flat_grads = [g for pair in grads for g in pair]
        params = opt.step(params, flat_grads)
        model.net.layers = [(params[2 * i], params[2 * i + 1]) for i in range(len(model.net.layers))]
        if callback is not None:
            callback(step, loss)
    model.loss_history = np.array(history)
    return model


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: MlpScoreModel, path) -> None:
    """Write ``DFRS1`` + uint32 layer count + (fan_in, fan_out) per layer,
    then float64 weights (row-major) and biases in layer order and finally the
    float64 data scale, all little-endian."""
    layers = model.net.layers
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", len(layers))
    for W, _ in layers:
        buf += struct.pack("<II", *W.shape)
    for W, b in layers:
        buf += np.ascontiguousarray(W, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(b, dtype="<f8").tobytes()
    buf += struct.pack("<d", model.sigma_data)
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path, process: DiffusionProcess) -> MlpScoreModel:
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a DFRS1 checkpoint")
    (n,) = struct.unpack_from("<I", raw, 5)
    shapes = [struct.unpack_from("<II", raw, 9 + 8 * i) for i in range(n)]
    off = 9 + 8 * n
    layers = []
    for fi, fo in shapes:
        W = np.frombuffer(raw, dtype="<f8", count=fi * fo, offset=off).reshape(fi, fo).astype(float)
        off += 8 * fi * fo
        b = np.frombuffer(raw, dtype="<f8", count=fo, offset=off).astype(float)
        off += 8 * fo
        layers.append((W, b))
    if off + 8 != len(raw):
        raise ValueError(f"{path}: checkpoint size does not match its header")
    (sigma_data,) = struct.unpack_from("<d", raw, off)
    dim = shapes[-1][1]
    return MlpScoreModel(Mlp(layers), process, dim, shapes[0][0] - dim - 1, sigma_data)
