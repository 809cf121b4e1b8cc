"""Degradation operators ``y = A(x) + n``.

All operators act along the last axis, so a batch of signals can be degraded
in one call. ``parametric_lowpass`` is the blind operator: a zero-phase
frequency-domain gain that is flat up to a cutoff and falls at a fixed number
of dB per octave above it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

KINDS = ("identity", "mask", "fir_lowpass", "rir_convolution", "ideal_lowpass", "parametric_lowpass")
LINEAR_KINDS = KINDS  # every supported operator is linear in x


@dataclass(frozen=True)
class DegradationOperator:
    kind: str
    data: dict = field(default_factory=dict)
    sample_rate: int = 16000

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        d = self.data
        nyq = self.sample_rate / 2
        if self.kind == "mask":
            m = np.asarray(d["mask"], dtype=float)
            if not np.all((m == 0) | (m == 1)):
                raise ValueError("mask entries must be 0 or 1")
        elif self.kind in ("fir_lowpass", "rir_convolution"):
            h = np.asarray(d["taps"], dtype=float)
            if h.ndim != 1 or h.size == 0 or not np.all(np.isfinite(h)):
                raise ValueError("taps must be a finite non-empty vector")
        elif self.kind == "ideal_lowpass":
            if not 0 < d["cutoff_hz"] < nyq:
                raise ValueError("cutoff must lie in (0, Nyquist)")
        elif self.kind == "parametric_lowpass":
            fc, slope = d["phi"]
            if not 0 < fc < nyq or not slope > 0:
                raise ValueError("need 0 < cutoff < Nyquist and slope > 0")

    @property
    def linear(self) -> bool:
        return self.kind in LINEAR_KINDS


def mask_operator(mask, sample_rate=16000):
    return DegradationOperator("mask", {"mask": np.asarray(mask, dtype=float)}, sample_rate)


def fir_operator(taps, kind="fir_lowpass", sample_rate=16000):
    return DegradationOperator(kind, {"taps": np.asarray(taps, dtype=float)}, sample_rate)


def ideal_lowpass(cutoff_hz, sample_rate=16000):
    return DegradationOperator("ideal_lowpass", {"cutoff_hz": float(cutoff_hz)}, sample_rate)


def parametric_lowpass(cutoff_hz, slope_db_per_octave, sample_rate=16000):
    return DegradationOperator("parametric_lowpass", {"phi": (float(cutoff_hz), float(slope_db_per_octave))},
                               sample_rate)


def with_phi(op: DegradationOperator, phi) -> DegradationOperator:
    return DegradationOperator("parametric_lowpass", {"phi": (float(phi[0]), float(phi[1]))}, op.sample_rate)


def design_lowpass_fir(cutoff_hz, numtaps=63, sample_rate=16000):
    from scipy.signal import firwin

    return firwin(numtaps, cutoff_hz, fs=sample_rate)


def synthetic_rir(t60: float, sample_rate=16000, length_s=0.25, rng=None):
    """Exponentially decaying white noise with a unit direct path."""
    rng = np.random.default_rng(0) if rng is None else rng
    n = int(round(length_s * sample_rate))
    t = np.arange(n) / sample_rate
    h = rng.standard_normal(n) * np.exp(-3.0 * np.log(10.0) * t / t60)
    h[0] = 1.0
    return h / np.linalg.norm(h)


def load_taps_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and r[0].strip()]
    vals = []
    for r in rows:
        try:
            vals.append(float(r[0]))
        except ValueError:
            if vals:
                raise
    return np.asarray(vals, dtype=float)


def save_taps_csv(path, taps) -> None:
    Path(path).write_text("".join(f"{float(t)!r}\n" for t in taps))


# -- frequency response ----------------------------------------------------


def parametric_response(phi, freqs_hz) -> np.ndarray:
    """Linear gain: 1 up to the cutoff, ``-slope`` dB per octave above it."""
    fc, slope = float(phi[0]), float(phi[1])
    f = np.asarray(freqs_hz, dtype=float)
    octaves = np.log2(np.maximum(f, fc) / fc)
    return 10.0 ** (-slope * octaves / 20.0)


def _response_grads(phi, freqs_hz):
    fc, slope = float(phi[0]), float(phi[1])
    f = np.asarray(freqs_hz, dtype=float)
    G = parametric_response(phi, f)
    above = f > fc
    octaves = np.where(above, np.log2(np.maximum(f, fc) / fc), 0.0)
    k = np.log(10.0) / 20.0
    dG_dfc = np.where(above, G * k * slope / (fc * np.log(2.0)), 0.0)
    dG_dslope = -G * k * octaves
    return dG_dfc, dG_dslope


def _freqs(n, sample_rate):
    return np.fft.rfftfreq(n, d=1.0 / sample_rate)


def _apply_gain(x, gain):
    n = x.shape[-1]
    return np.fft.irfft(np.fft.rfft(x, axis=-1) * gain, n=n, axis=-1)


def _conv(x, h):
    n = x.shape[-1]
    return fftconvolve(x, np.broadcast_to(h, x.shape[:-1] + h.shape), mode="full", axes=-1)[..., :n]


def _conv_adjoint(v, h):
    n = v.shape[-1]
    full = fftconvolve(v, np.broadcast_to(h[::-1], v.shape[:-1] + h.shape), mode="full", axes=-1)
    return full[..., len(h) - 1:len(h) - 1 + n]


def _check_signal(op, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ValueError("empty signal")
    if op.kind == "mask":
        m = np.asarray(op.data["mask"])
        if m.shape[-1] != x.shape[-1]:
            raise ValueError(f"mask length {m.shape[-1]} != signal length {x.shape[-1]}")
    return x


def apply(op: DegradationOperator, x):
    x = _check_signal(op, x)
    k = op.kind
    if k == "identity":
        return x.copy()
    if k == "mask":
        return op.data["mask"] * x
    if k in ("fir_lowpass", "rir_convolution"):
        return _conv(x, np.asarray(op.data["taps"], dtype=float))
    if k == "ideal_lowpass":
        keep = _freqs(x.shape[-1], op.sample_rate) <= op.data["cutoff_hz"]
        return _apply_gain(x, keep.astype(float))
    return _apply_gain(x, parametric_response(op.data["phi"], _freqs(x.shape[-1], op.sample_rate)))


def adjoint(op: DegradationOperator, v):
    if not op.linear:
        raise ValueError(f"{op.kind} operator is not linear")
    v = _check_signal(op, v)
    if op.kind in ("fir_lowpass", "rir_convolution"):
        return _conv_adjoint(v, np.asarray(op.data["taps"], dtype=float))
    # remaining kinds are symmetric: diagonal masks and zero-phase real gains
    return apply(op, v)


def grad_x(op: DegradationOperator, x, v):
    """Gradient of ``<A(x), v>`` w.r.t. ``x``."""
    return adjoint(op, v)


def grad_phi(op: DegradationOperator, x, v) -> np.ndarray:
    """Gradient of ``<A_phi(x), v>`` w.r.t. ``phi = (cutoff_hz, slope)``, summed over any batch axes."""
    if op.kind != "parametric_lowpass":
        raise ValueError(f"{op.kind} operator has no parameters")
    x = _check_signal(op, x)
    v = np.asarray(v, dtype=float)
    dfc, dslope = _response_grads(op.data["phi"], _freqs(x.shape[-1], op.sample_rate))
    return np.array([np.sum(_apply_gain(x, dfc) * v), np.sum(_apply_gain(x, dslope) * v)])


# -- bounded parameters ----------------------------------------------------


@dataclass
class OperatorParams:
    """Box-bounded parameters optimized through a sigmoid transform."""

    lower: np.ndarray
    upper: np.ndarray
    u: np.ndarray

    @classmethod
    def from_phi(cls, phi, lower, upper):
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        phi = np.asarray(phi, dtype=float)
        if np.any(upper <= lower):
            raise ValueError("upper bounds must exceed lower bounds")
        if np.any(phi <= lower) or np.any(phi >= upper):
            raise ValueError(f"phi {phi.tolist()} outside bounds ({lower.tolist()}, {upper.tolist()})")
        p = (phi - lower) / (upper - lower)
        return cls(lower, upper, np.log(p) - np.log1p(-p))

    @property
    def phi(self) -> np.ndarray:
        return self.lower + (self.upper - self.lower) / (1.0 + np.exp(-self.u))

    def chain(self, grad_phi_value):
        """Map a gradient w.r.t. phi to one w.r.t. the unconstrained ``u``."""
        s = 1.0 / (1.0 + np.exp(-self.u))
        return np.asarray(grad_phi_value) * (self.upper - self.lower) * s * (1.0 - s)

    def at_bound(self, rel: float = 1e-3) -> bool:
        p = (self.phi - self.lower) / (self.upper - self.lower)
        return bool(np.any((p < rel) | (p > 1 - rel)))


def gram_inverse(op: DegradationOperator, v, s0: float, s1: float):
    """Apply ``(s0 I + s1 A A^T)^-1`` to ``v``.

    Exact for identity, masks and the frequency-domain gains; convolutions use
    the circulant approximation of ``A A^T`` on the signal's own FFT grid.
    """
    if not s0 > 0 or s1 < 0:
        raise ValueError("need s0 > 0 and s1 >= 0")
    v = _check_signal(op, v)
    k = op.kind
    if k == "identity":
        return v / (s0 + s1)
    if k == "mask":
        return v / (s0 + s1 * op.data["mask"])
    n = v.shape[-1]
    if k == "ideal_lowpass":
        power = (_freqs(n, op.sample_rate) <= op.data["cutoff_hz"]).astype(float)
    elif k == "parametric_lowpass":
        power = parametric_response(op.data["phi"], _freqs(n, op.sample_rate)) ** 2
    else:
        h = np.asarray(op.data["taps"], dtype=float)
        wrapped = np.zeros(n)
        np.add.at(wrapped, np.arange(h.size) % n, h)
        power = np.abs(np.fft.rfft(wrapped)) ** 2
    return _apply_gain(v, 1.0 / (s0 + s1 * power))
